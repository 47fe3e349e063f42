//! Synthetic members, journeys, external aggregates and holdout experiments
//! drawn from a known logistic conversion model, with exact removal
//! counterfactual credits under that model.
//!
//! Conversion probability for a member with observed and hidden touches:
//!
//! ```text
//! p = σ(base + Σ_j effect(kind_j)·exp(−decay·gap_j) + ⟨w_M, E_M⟩ + ⟨w_C, E_C⟩)
//! ```
//!
//! where `gap_j` is the whole number of days between touch `j` and the anchor.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::journey::{
    Action, Channel, ChannelAggregates, ExternalCell, Path, TouchKey, Touchpoint, SECONDS_PER_DAY,
};
use crate::kvconf::KvConfig;
use crate::seeds;
use gradkernel::sigmoid;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSpec {
    pub channel: Channel,
    /// Expected exposures per member per day.
    pub rate: f64,
    /// External channels lose member-level exposures; only clicks survive.
    pub external: bool,
    pub exposure: Action,
    /// Follow-up engagement spawned by an exposure, if any.
    pub engage: Option<Action>,
    pub engage_prob: f64,
    pub campaigns: u32,
    pub effects: BTreeMap<Action, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_members: usize,
    pub n_companies: usize,
    pub horizon_days: u32,
    pub start_day: i64,
    pub anchor_spread_days: u32,
    pub base_logit: f64,
    pub decay: f64,
    pub dim_member: usize,
    pub dim_company: usize,
    pub dim_campaign: usize,
    pub member_effect: Vec<f64>,
    pub company_effect: Vec<f64>,
    /// Spread of campaign embeddings around their channel centroid.
    pub campaign_noise: f64,
    pub channels: Vec<ChannelSpec>,
    /// Strength γ in P(Z=1 | E_M) = σ(γ·⟨v, E_M⟩).
    pub confounding: f64,
    pub assignment_direction: Option<Vec<f64>>,
    pub holdout_campaigns: Vec<u32>,
    pub reference_members: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let ch = |name: &str, rate, external, exposure, engage, engage_prob, campaigns, effects: &[(Action, f64)]| {
            ChannelSpec {
                channel: Channel::new(name),
                rate,
                external,
                exposure,
                engage,
                engage_prob,
                campaigns,
                effects: effects.iter().copied().collect(),
            }
        };
        Self {
            seed: 7,
            n_members: 2000,
            n_companies: 200,
            horizon_days: 30,
            start_day: 19_723,
            anchor_spread_days: 21,
            base_logit: -3.0,
            decay: 0.05,
            dim_member: 4,
            dim_company: 4,
            dim_campaign: 4,
            member_effect: vec![0.6, -0.4, 0.0, 0.0],
            company_effect: vec![0.3, 0.0, 0.0, 0.0],
            campaign_noise: 0.3,
            channels: vec![
                ch(
                    "EMAIL",
                    0.15,
                    false,
                    Action::Send,
                    Some(Action::Open),
                    0.3,
                    4,
                    &[(Action::Send, 0.05), (Action::Open, 0.6)],
                ),
                ch(
                    "FEED",
                    0.3,
                    false,
                    Action::Impression,
                    Some(Action::Click),
                    0.05,
                    6,
                    &[(Action::Impression, 0.1), (Action::Click, 1.2)],
                ),
                ch(
                    "SEARCH",
                    0.1,
                    true,
                    Action::Impression,
                    Some(Action::Click),
                    0.1,
                    3,
                    &[(Action::Impression, 0.15), (Action::Click, 1.5)],
                ),
            ],
            confounding: 0.0,
            assignment_direction: None,
            holdout_campaigns: Vec::new(),
            reference_members: 100_000,
        }
    }
}

impl GeneratorConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let mut cfg = Self {
            seed: kv.or("seed", d.seed)?,
            n_members: kv.or("n_members", d.n_members)?,
            n_companies: kv.or("n_companies", d.n_companies)?,
            horizon_days: kv.or("horizon_days", d.horizon_days)?,
            start_day: kv.or("start_day", d.start_day)?,
            anchor_spread_days: kv.or("anchor_spread_days", d.anchor_spread_days)?,
            base_logit: kv.or("base_logit", d.base_logit)?,
            decay: kv.or("decay", d.decay)?,
            dim_member: kv.or("dim_member", d.dim_member)?,
            dim_company: kv.or("dim_company", d.dim_company)?,
            dim_campaign: kv.or("dim_campaign", d.dim_campaign)?,
            member_effect: Vec::new(),
            company_effect: Vec::new(),
            campaign_noise: kv.or("campaign_noise", d.campaign_noise)?,
            channels: Vec::new(),
            confounding: kv.or("confounding", d.confounding)?,
            assignment_direction: kv.list("assignment_direction")?,
            holdout_campaigns: kv.list("experiment.holdout")?.unwrap_or_default(),
            reference_members: kv.or("experiment.reference_members", d.reference_members)?,
        };
        cfg.member_effect = kv
            .list("member_effect")?
            .unwrap_or_else(|| fit_len(&d.member_effect, cfg.dim_member));
        cfg.company_effect = kv
            .list("company_effect")?
            .unwrap_or_else(|| fit_len(&d.company_effect, cfg.dim_company));
        let names: Option<Vec<String>> = kv.list("channels")?;
        match names {
            None => cfg.channels = d.channels,
            Some(names) => {
                for name in names {
                    let p = format!("channel.{name}.");
                    let key = |k: &str| format!("{p}{k}");
                    let parse_action = |k: &str| -> Result<Option<Action>> {
                        match kv.get(&key(k)) {
                            None | Some("") | Some("none") => Ok(None),
                            Some(s) => Action::parse(s)
                                .map(Some)
                                .ok_or_else(|| Error::Config(format!("unknown action `{s}` for {}", key(k)))),
                        }
                    };
                    let mut effects = BTreeMap::new();
                    for (rest, v) in kv.with_prefix(&key("effect.")) {
                        let a = Action::parse(rest)
                            .ok_or_else(|| Error::Config(format!("unknown action `{rest}` in effects of {name}")))?;
                        let e: f64 = v
                            .parse()
                            .map_err(|_| Error::Config(format!("bad effect `{v}` for {name}.{rest}")))?;
                        effects.insert(a, e);
                    }
                    cfg.channels.push(ChannelSpec {
                        channel: Channel::new(&name),
                        rate: kv.require(&key("rate"))?,
                        external: kv.or(&key("external"), false)?,
                        exposure: parse_action("exposure")?.unwrap_or(Action::Impression),
                        engage: parse_action("engage")?,
                        engage_prob: kv.or(&key("engage_prob"), 0.0)?,
                        campaigns: kv.or(&key("campaigns"), 1)?,
                        effects,
                    });
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.horizon_days < 1 {
            return bad("horizon_days must be at least 1".into());
        }
        if self.n_companies == 0 {
            return bad("n_companies must be positive".into());
        }
        if !self.decay.is_finite() || self.decay < 0.0 {
            return bad("decay must be non-negative".into());
        }
        if self.member_effect.len() != self.dim_member || self.company_effect.len() != self.dim_company {
            return bad("entity effect vectors must match embedding dims".into());
        }
        if let Some(v) = &self.assignment_direction {
            if v.len() != self.dim_member {
                return bad("assignment_direction must match dim_member".into());
            }
        }
        if self.confounding < 0.0 || !self.confounding.is_finite() {
            return bad("confounding must be non-negative".into());
        }
        if self.channels.is_empty() {
            return bad("at least one channel is required".into());
        }
        let mut names = BTreeSet::new();
        for c in &self.channels {
            if !names.insert(&c.channel) {
                return bad(format!("duplicate channel {}", c.channel));
            }
            if !(c.rate >= 0.0 && c.rate.is_finite()) {
                return bad(format!("{}: rate must be non-negative", c.channel));
            }
            if !(0.0..=1.0).contains(&c.engage_prob) {
                return bad(format!("{}: engage_prob must be in [0,1]", c.channel));
            }
            if c.campaigns == 0 {
                return bad(format!("{}: needs at least one campaign", c.channel));
            }
            if c.engage == Some(c.exposure) {
                return bad(format!("{}: engagement must differ from exposure", c.channel));
            }
            if c.external && (c.exposure != Action::Impression || c.engage.is_some_and(|a| a != Action::Click)) {
                return bad(format!("{}: external channels use IMPRESSION exposures and CLICK engagements", c.channel));
            }
        }
        Ok(())
    }

    /// Campaign ids are assigned channel by channel in declaration order.
    pub fn campaign_ranges(&self) -> Vec<std::ops::Range<u32>> {
        let mut start = 0;
        self.channels
            .iter()
            .map(|c| {
                let r = start..start + c.campaigns;
                start += c.campaigns;
                r
            })
            .collect()
    }

    pub fn truth_model(&self) -> GroundTruthModel {
        let mut effects = BTreeMap::new();
        for c in &self.channels {
            for a in std::iter::once(c.exposure).chain(c.engage) {
                effects.insert(
                    TouchKey::new(c.channel.clone(), a),
                    c.effects.get(&a).copied().unwrap_or(0.0),
                );
            }
        }
        GroundTruthModel {
            base_logit: self.base_logit,
            decay: self.decay,
            effects,
            member_effect: self.member_effect.clone(),
            company_effect: self.company_effect.clone(),
        }
    }

    pub fn touch_keys(&self) -> Vec<TouchKey> {
        self.truth_model().effects.into_keys().collect()
    }

    fn assignment_direction(&self) -> Vec<f64> {
        if let Some(v) = &self.assignment_direction {
            return v.clone();
        }
        let norm = self.member_effect.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            self.member_effect.iter().map(|x| x / norm).collect()
        } else {
            let mut v = vec![0.0; self.dim_member];
            if let Some(first) = v.first_mut() {
                *first = 1.0;
            }
            v
        }
    }

    /// True treatment propensity P(Z=1 | E_M).
    pub fn propensity(&self, member_emb: &[f64]) -> f64 {
        sigmoid(self.confounding * dot(&self.assignment_direction(), member_emb))
    }
}

fn fit_len(v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| v.get(i).copied().unwrap_or(0.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The generator's true conversion model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthModel {
    pub base_logit: f64,
    pub decay: f64,
    #[serde(with = "touch_key_map")]
    pub effects: BTreeMap<TouchKey, f64>,
    pub member_effect: Vec<f64>,
    pub company_effect: Vec<f64>,
}

mod touch_key_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<TouchKey, f64>, s: S) -> Result<S::Ok, S::Error> {
        let flat: BTreeMap<String, f64> = m.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        flat.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<TouchKey, f64>, D::Error> {
        let flat = BTreeMap::<String, f64>::deserialize(d)?;
        flat.into_iter()
            .map(|(k, v)| {
                let (c, a) = k
                    .rsplit_once('.')
                    .ok_or_else(|| serde::de::Error::custom(format!("bad touch key {k}")))?;
                let a = Action::parse(a).ok_or_else(|| serde::de::Error::custom(format!("bad action in {k}")))?;
                Ok((TouchKey::new(Channel::new(c), a), v))
            })
            .collect()
    }
}

impl GroundTruthModel {
    pub fn gap_days(ts: i64, anchor: i64) -> i64 {
        (anchor - ts).div_euclid(SECONDS_PER_DAY).max(0)
    }

    /// Logit contribution of one touch.
    pub fn contribution(&self, t: &Touchpoint, anchor: i64) -> Result<f64> {
        let e = self
            .effects
            .get(&t.key())
            .ok_or_else(|| Error::InvalidInput(format!("no generator effect for {}", t.key())))?;
        Ok(e * (-self.decay * Self::gap_days(t.ts, anchor) as f64).exp())
    }

    pub fn entity_logit(&self, member_emb: &[f64], company_emb: &[f64]) -> f64 {
        dot(&self.member_effect, member_emb) + dot(&self.company_effect, company_emb)
    }

    /// Full logit of a path; `hidden_logit` carries touches not on the path.
    pub fn logit(&self, path: &Path, hidden_logit: f64) -> Result<f64> {
        let mut z = self.base_logit + hidden_logit + self.entity_logit(&path.member_emb, &path.company_emb);
        for t in &path.touchpoints {
            z += self.contribution(t, path.anchor_time)?;
        }
        Ok(z)
    }

    pub fn probability(&self, path: &Path, hidden_logit: f64) -> Result<f64> {
        Ok(sigmoid(self.logit(path, hidden_logit)?))
    }

    /// Single-touch removal credits: `p(full) − p(full without j)`, negatives
    /// clamped to zero, normalized; all zeros when no touch helps.
    pub fn credits(&self, path: &Path, hidden_logit: f64) -> Result<Vec<f64>> {
        let full = self.logit(path, hidden_logit)?;
        let contributions = path
            .touchpoints
            .iter()
            .map(|t| self.contribution(t, path.anchor_time))
            .collect::<Result<Vec<_>>>()?;
        Ok(removal_credits(full, &contributions))
    }
}

/// Removal credits from a full logit and each touch's additive share of it.
pub fn removal_credits(full_logit: f64, contributions: &[f64]) -> Vec<f64> {
    let p_full = sigmoid(full_logit);
    let mut raw: Vec<f64> = contributions
        .iter()
        .map(|c| (p_full - sigmoid(full_logit - c)).max(0.0))
        .collect();
    let s: f64 = raw.iter().sum();
    if s > 0.0 {
        raw.iter_mut().for_each(|r| *r /= s);
    }
    raw
}

/// Per-path ground truth record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathTruth {
    pub path_id: u64,
    /// Logit mass of touches removed from the observable path.
    pub hidden_logit: f64,
    pub probability: f64,
    /// Removal credits; only present for converting paths.
    pub credits: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub model: GroundTruthModel,
    pub paths: Vec<PathTruth>,
    /// True channel share of conversion credit over converting paths.
    pub channel_shares: BTreeMap<Channel, f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub paths: Vec<Path>,
    pub aggregates: ChannelAggregates,
    pub truth: GroundTruth,
    /// External impressions stripped from each path, aligned with `paths`.
    pub hidden: Vec<Vec<Touchpoint>>,
    pub campaigns: Vec<Campaign>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub campaign_id: u32,
    pub channel: Channel,
    pub emb: Vec<f64>,
}

/// Draws campaign embeddings: channel centroid plus noise.
pub fn campaigns(cfg: &GeneratorConfig) -> Vec<Campaign> {
    let mut rng = seeds::rng(cfg.seed, "campaigns");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let scale = 1.0 / (cfg.dim_campaign.max(1) as f64).sqrt();
    let mut out = Vec::new();
    for (spec, range) in cfg.channels.iter().zip(cfg.campaign_ranges()) {
        let centroid: Vec<f64> = (0..cfg.dim_campaign).map(|_| normal.sample(&mut rng) * scale).collect();
        for id in range {
            let emb = centroid
                .iter()
                .map(|c| c + cfg.campaign_noise * scale * normal.sample(&mut rng))
                .collect();
            out.push(Campaign {
                campaign_id: id,
                channel: spec.channel.clone(),
                emb,
            });
        }
    }
    out
}

struct Member {
    member_emb: Vec<f64>,
    company_emb: Vec<f64>,
    anchor_time: i64,
}

struct RawTouch {
    channel: usize,
    action: Action,
    ts: i64,
    campaign: u32,
}

fn entity_tables(cfg: &GeneratorConfig) -> Vec<Vec<f64>> {
    let mut rng = seeds::rng(cfg.seed, "companies");
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..cfg.n_companies)
        .map(|_| (0..cfg.dim_company).map(|_| normal.sample(&mut rng)).collect())
        .collect()
}

fn draw_member(cfg: &GeneratorConfig, companies: &[Vec<f64>], stream: &str, index: u64) -> Member {
    let mut rng = seeds::rng_indexed(cfg.seed, stream, index);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let member_emb = (0..cfg.dim_member).map(|_| normal.sample(&mut rng)).collect();
    let company_emb = companies[rng.random_range(0..companies.len())].clone();
    let anchor_day = cfg.start_day + i64::from(cfg.horizon_days) + rng.random_range(0..=i64::from(cfg.anchor_spread_days));
    let anchor_time = anchor_day * SECONDS_PER_DAY + rng.random_range(0..SECONDS_PER_DAY);
    Member {
        member_emb,
        company_emb,
        anchor_time,
    }
}

/// Touches on the `horizon_days` whole days before the anchor day. Each
/// channel uses its own sub-stream so adding a channel leaves the others
/// untouched.
fn draw_touches(cfg: &GeneratorConfig, stream: &str, index: u64, anchor_time: i64) -> Vec<RawTouch> {
    let anchor_day = anchor_time.div_euclid(SECONDS_PER_DAY);
    let ranges = cfg.campaign_ranges();
    let mut out = Vec::new();
    for (ci, spec) in cfg.channels.iter().enumerate() {
        if spec.rate == 0.0 {
            continue;
        }
        let mut rng = seeds::rng_indexed(
            seeds::derive(cfg.seed, &format!("{stream}/{}", spec.channel)),
            "member",
            index,
        );
        let pois = Poisson::new(spec.rate).expect("positive rate");
        for day in anchor_day - i64::from(cfg.horizon_days)..anchor_day {
            let n = pois.sample(&mut rng) as u64;
            for _ in 0..n {
                let ts = day * SECONDS_PER_DAY + rng.random_range(0..SECONDS_PER_DAY - 600);
                let campaign = rng.random_range(ranges[ci].clone());
                out.push(RawTouch {
                    channel: ci,
                    action: spec.exposure,
                    ts,
                    campaign,
                });
                if let Some(engage) = spec.engage {
                    if rng.random::<f64>() < spec.engage_prob {
                        out.push(RawTouch {
                            channel: ci,
                            action: engage,
                            ts: ts + rng.random_range(1..600),
                            campaign,
                        });
                    }
                }
            }
        }
    }
    out.sort_by_key(|t| (t.ts, t.channel, t.action));
    out
}

struct Materialized {
    path: Path,
    hidden: Vec<Touchpoint>,
}

fn materialize(
    cfg: &GeneratorConfig,
    camp: &[Campaign],
    raw: Vec<RawTouch>,
    member: Member,
    path_id: u64,
    next_id: &mut u64,
) -> Materialized {
    let mut touchpoints = Vec::new();
    let mut hidden = Vec::new();
    for r in raw {
        let spec = &cfg.channels[r.channel];
        let tp = Touchpoint {
            id: *next_id,
            channel: spec.channel.clone(),
            action: r.action,
            ts: r.ts,
            campaign_id: r.campaign,
            campaign_emb: camp[r.campaign as usize].emb.clone(),
            imputed: false,
            linkage: Vec::new(),
        };
        *next_id += 1;
        if spec.external && r.action == Action::Impression {
            hidden.push(tp);
        } else {
            touchpoints.push(tp);
        }
    }
    Materialized {
        path: Path {
            path_id,
            member_id: path_id,
            member_emb: member.member_emb,
            company_emb: member.company_emb,
            converted: false,
            anchor_time: member.anchor_time,
            touchpoints,
        },
        hidden,
    }
}

fn hidden_logit(model: &GroundTruthModel, hidden: &[Touchpoint], anchor: i64) -> Result<f64> {
    hidden.iter().map(|t| model.contribution(t, anchor)).sum()
}

/// Generates the observational dataset. Deterministic given `cfg.seed`.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let model = cfg.truth_model();
    let camp = campaigns(cfg);
    let companies = entity_tables(cfg);
    let mut conv_rng = seeds::rng(cfg.seed, "conversions");
    let mut next_id = 1u64;
    let mut paths = Vec::with_capacity(cfg.n_members);
    let mut hidden_all = Vec::with_capacity(cfg.n_members);
    let mut truths = Vec::with_capacity(cfg.n_members);
    let mut cells: BTreeMap<(Channel, i64), ExternalCell> = BTreeMap::new();

    for i in 0..cfg.n_members as u64 {
        let member = draw_member(cfg, &companies, "members", i);
        let raw = draw_touches(cfg, "touches", i, member.anchor_time);
        let Materialized { mut path, hidden } = materialize(cfg, &camp, raw, member, i, &mut next_id);
        let hid = hidden_logit(&model, &hidden, path.anchor_time)?;
        let p = model.probability(&path, hid)?;
        path.converted = conv_rng.random::<f64>() < p;

        for t in &hidden {
            cells.entry((t.channel.clone(), t.day())).or_default().i_ext += 1.0;
        }
        for t in path.touchpoints.iter().filter(|t| is_external(cfg, &t.channel)) {
            cells.entry((t.channel.clone(), t.day())).or_default().c_ext += 1.0;
        }
        let credits = if path.converted {
            Some(model.credits(&path, hid)?)
        } else {
            None
        };
        truths.push(PathTruth {
            path_id: path.path_id,
            hidden_logit: hid,
            probability: p,
            credits,
        });
        paths.push(path);
        hidden_all.push(hidden);
    }

    let channel_shares = channel_shares(&paths, &truths);
    Ok(Dataset {
        paths,
        aggregates: ChannelAggregates {
            cells,
            owned: Default::default(),
        },
        truth: GroundTruth {
            model,
            paths: truths,
            channel_shares,
        },
        hidden: hidden_all,
        campaigns: camp,
    })
}

fn is_external(cfg: &GeneratorConfig, c: &Channel) -> bool {
    cfg.channels.iter().any(|s| &s.channel == c && s.external)
}

fn channel_shares(paths: &[Path], truths: &[PathTruth]) -> BTreeMap<Channel, f64> {
    let mut acc: BTreeMap<Channel, f64> = BTreeMap::new();
    for (p, t) in paths.iter().zip(truths) {
        if let Some(cr) = &t.credits {
            for (tp, c) in p.touchpoints.iter().zip(cr) {
                *acc.entry(tp.channel.clone()).or_default() += c;
            }
        }
    }
    let total: f64 = acc.values().sum();
    if total > 0.0 {
        acc.values_mut().for_each(|v| *v /= total);
    }
    acc
}

/// Ground-truth credits for a path of this generator.
pub fn ground_truth_credits(path: &Path, model: &GroundTruthModel, hidden_logit: f64) -> Result<Vec<f64>> {
    model.credits(path, hidden_logit)
}

/// Holdout experiment unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub member_id: u64,
    pub z: u8,
    pub y: u8,
    pub member_emb: Vec<f64>,
    pub path_id: u64,
    pub holdout: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTruth {
    /// Removal attribution of the holdout set among treated members.
    pub attribution: f64,
    pub p_full: f64,
    pub p_removed: f64,
    pub reference_members: usize,
    /// True propensity per record, aligned with the records.
    pub propensities: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub records: Vec<ExperimentRecord>,
    pub paths: Vec<Path>,
    /// Hidden logit of each path (external impressions not on the path).
    pub hidden_logits: Vec<f64>,
    pub truth: ExperimentTruth,
}

fn remove_campaigns(path: &Path, holdout: &BTreeSet<u32>) -> Path {
    let mut p = path.clone();
    p.touchpoints.retain(|t| !holdout.contains(&t.campaign_id));
    p
}

/// Randomized holdout experiment: control members never receive holdout
/// campaign touches. Assignment follows the configured propensity.
pub fn generate_experiment(cfg: &GeneratorConfig, holdout: &[u32]) -> Result<Experiment> {
    cfg.validate()?;
    if holdout.is_empty() {
        return Err(Error::InvalidInput("holdout campaign set is empty".into()));
    }
    let total_campaigns: u32 = cfg.channels.iter().map(|c| c.campaigns).sum();
    if let Some(bad) = holdout.iter().find(|&&c| c >= total_campaigns) {
        return Err(Error::InvalidInput(format!("holdout campaign {bad} is not in the config")));
    }
    let hset: BTreeSet<u32> = holdout.iter().copied().collect();
    let model = cfg.truth_model();
    let camp = campaigns(cfg);
    let companies = entity_tables(cfg);
    let mut assign_rng = seeds::rng(cfg.seed, "experiment/assignment");
    let mut conv_rng = seeds::rng(cfg.seed, "experiment/conversions");
    let mut next_id = 1u64;
    let mut records = Vec::with_capacity(cfg.n_members);
    let mut paths = Vec::with_capacity(cfg.n_members);
    let mut hidden_logits = Vec::with_capacity(cfg.n_members);
    let mut propensities = Vec::with_capacity(cfg.n_members);

    for i in 0..cfg.n_members as u64 {
        let member = draw_member(cfg, &companies, "experiment/members", i);
        let e = cfg.propensity(&member.member_emb);
        let z = u8::from(assign_rng.random::<f64>() < e);
        let raw = draw_touches(cfg, "experiment/touches", i, member.anchor_time);
        let Materialized { mut path, mut hidden } = materialize(cfg, &camp, raw, member, i, &mut next_id);
        if z == 0 {
            path = remove_campaigns(&path, &hset);
            hidden.retain(|t| !hset.contains(&t.campaign_id));
        }
        let hid = hidden_logit(&model, &hidden, path.anchor_time)?;
        let p = model.probability(&path, hid)?;
        path.converted = conv_rng.random::<f64>() < p;
        records.push(ExperimentRecord {
            member_id: path.member_id,
            z,
            y: u8::from(path.converted),
            member_emb: path.member_emb.clone(),
            path_id: path.path_id,
            holdout: holdout.to_vec(),
        });
        propensities.push(e);
        hidden_logits.push(hid);
        paths.push(path);
    }

    let (p_full, p_removed) = reference_probabilities(cfg, &model, &camp, &companies, &hset)?;
    Ok(Experiment {
        records,
        paths,
        hidden_logits,
        truth: ExperimentTruth {
            attribution: (p_full - p_removed) / p_full,
            p_full,
            p_removed,
            reference_members: cfg.reference_members,
            propensities,
        },
    })
}

/// Exact per-member probabilities, averaged over a large reference
/// population weighted by the treatment propensity (so the averages are
/// over the treated population).
fn reference_probabilities(
    cfg: &GeneratorConfig,
    model: &GroundTruthModel,
    camp: &[Campaign],
    companies: &[Vec<f64>],
    hset: &BTreeSet<u32>,
) -> Result<(f64, f64)> {
    let mut num_full = 0.0;
    let mut num_removed = 0.0;
    let mut den = 0.0;
    let mut scratch_id = 1u64;
    for i in 0..cfg.reference_members as u64 {
        let member = draw_member(cfg, companies, "experiment/reference/members", i);
        let e = cfg.propensity(&member.member_emb);
        let raw = draw_touches(cfg, "experiment/reference/touches", i, member.anchor_time);
        let Materialized { path, hidden } = materialize(cfg, camp, raw, member, i, &mut scratch_id);
        let hid_full = hidden_logit(model, &hidden, path.anchor_time)?;
        let kept: Vec<Touchpoint> = hidden.into_iter().filter(|t| !hset.contains(&t.campaign_id)).collect();
        let hid_removed = hidden_logit(model, &kept, path.anchor_time)?;
        let removed = remove_campaigns(&path, hset);
        num_full += e * model.probability(&path, hid_full)?;
        num_removed += e * model.probability(&removed, hid_removed)?;
        den += e;
    }
    if den == 0.0 {
        return Err(Error::InvalidInput("reference population is empty".into()));
    }
    Ok((num_full / den, num_removed / den))
}

/// Simulates treated members with Bernoulli outcomes on the full and the
/// holdout-removed path, returning `(estimate, standard error)` of the
/// removal attribution. Independent of the closed-form reference average.
pub fn monte_carlo_attribution(cfg: &GeneratorConfig, holdout: &[u32], members: usize, seed: u64) -> Result<(f64, f64)> {
    let hset: BTreeSet<u32> = holdout.iter().copied().collect();
    let model = cfg.truth_model();
    let camp = campaigns(cfg);
    let companies = entity_tables(cfg);
    let mut rng: ChaCha8Rng = seeds::rng(seed, "monte-carlo");
    let (mut y_full, mut y_removed, mut n) = (0.0f64, 0.0f64, 0.0f64);
    let mut scratch_id = 1u64;
    let mut i = 0u64;
    while (n as usize) < members {
        let member = draw_member(cfg, &companies, "mc/members", seeds::mix64(seed ^ i));
        let raw = draw_touches(cfg, "mc/touches", seeds::mix64(seed ^ i), member.anchor_time);
        i += 1;
        let e = cfg.propensity(&member.member_emb);
        if rng.random::<f64>() >= e {
            continue;
        }
        let Materialized { path, hidden } = materialize(cfg, &camp, raw, member, i, &mut scratch_id);
        let hid_full = hidden_logit(&model, &hidden, path.anchor_time)?;
        let kept: Vec<Touchpoint> = hidden.into_iter().filter(|t| !hset.contains(&t.campaign_id)).collect();
        let hid_removed = hidden_logit(&model, &kept, path.anchor_time)?;
        let removed = remove_campaigns(&path, &hset);
        if rng.random::<f64>() < model.probability(&path, hid_full)? {
            y_full += 1.0;
        }
        if rng.random::<f64>() < model.probability(&removed, hid_removed)? {
            y_removed += 1.0;
        }
        n += 1.0;
    }
    let (p1, p0) = (y_full / n, y_removed / n);
    let a = (p1 - p0) / p1;
    // delta method for a = 1 − p0/p1 with independent draws
    let var = (p0 / p1).powi(2) * (p1 * (1.0 - p1) / (n * p1 * p1) + p0 * (1.0 - p0) / (n * p0 * p0));
    Ok((a, var.sqrt()))
}
