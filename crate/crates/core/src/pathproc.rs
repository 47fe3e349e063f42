//! Turning raw journeys into model input: sessionization of same-day
//! campaign impressions, per-kind downsampling, truncation to the latest
//! touches, and mapping model credits back onto the raw events.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path as FsPath;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::journey::{Action, AttributionResult, Channel, Path, TouchKey, Touchpoint};
use crate::kvconf::KvConfig;
use crate::seeds;

/// Retention ratio per (channel, action) and the channels whose impressions
/// are grouped into sessions. Kinds without an entry keep everything.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplingPolicy {
    ratios: BTreeMap<TouchKey, f64>,
    sessionizable: BTreeSet<Channel>,
}

impl SamplingPolicy {
    pub fn new(ratios: BTreeMap<TouchKey, f64>, sessionizable: BTreeSet<Channel>) -> Result<Self> {
        for (k, r) in &ratios {
            if !(*r > 0.0 && *r <= 1.0) {
                return Err(Error::Config(format!("retention ratio for {k} must be in (0,1], got {r}")));
            }
        }
        Ok(Self { ratios, sessionizable })
    }

    /// Reads `CHANNEL.ACTION.ratio = r` entries and a `sessionize` list.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut ratios = BTreeMap::new();
        for key in kv.keys() {
            let Some(stem) = key.strip_suffix(".ratio") else { continue };
            let Some((c, a)) = stem.rsplit_once('.') else {
                return Err(Error::Config(format!("expected CHANNEL.ACTION.ratio, got `{key}`")));
            };
            let action = Action::parse(a).ok_or_else(|| Error::Config(format!("unknown action in `{key}`")))?;
            ratios.insert(TouchKey::new(Channel::new(c), action), kv.require(key)?);
        }
        let sessionizable = kv
            .list::<String>("sessionize")?
            .unwrap_or_default()
            .iter()
            .map(|c| Channel::new(c))
            .collect();
        Self::new(ratios, sessionizable)
    }

    pub fn load(file: &FsPath) -> Result<Self> {
        Self::from_kv(&KvConfig::load(file)?)
    }

    pub fn ratio(&self, key: &TouchKey) -> f64 {
        self.ratios.get(key).copied().unwrap_or(1.0)
    }

    pub fn is_sessionizable(&self, c: &Channel) -> bool {
        self.sessionizable.contains(c)
    }
}

/// Keeps the `n` latest touchpoints. Returns the processed path and the
/// removed touchpoints.
pub fn truncate(path: &Path, n: usize) -> Result<(Path, Vec<Touchpoint>)> {
    if n == 0 {
        return Err(Error::InvalidInput("truncation length must be at least 1".into()));
    }
    let mut out = path.clone();
    let cut = out.touchpoints.len().saturating_sub(n);
    let removed: Vec<Touchpoint> = out.touchpoints.drain(..cut).collect();
    Ok((out, removed))
}

/// Collapses impressions of sessionizable channels that share campaign and
/// day into the most recent one, whose linkage lists the collapsed ids.
pub fn sessionize(path: &Path, policy: &SamplingPolicy) -> Path {
    let mut groups: BTreeMap<(Channel, u32, i64), Vec<usize>> = BTreeMap::new();
    for (i, t) in path.touchpoints.iter().enumerate() {
        if t.action == Action::Impression && policy.is_sessionizable(&t.channel) {
            groups.entry((t.channel.clone(), t.campaign_id, t.day())).or_default().push(i);
        }
    }
    let mut drop = vec![false; path.touchpoints.len()];
    let mut touches = path.touchpoints.clone();
    for members in groups.values().filter(|m| m.len() > 1) {
        // touches are time-sorted, so the last index is the most recent
        let (&survivor, siblings) = members.split_last().unwrap();
        let mut linkage: BTreeSet<u64> = touches[survivor].linkage.iter().copied().collect();
        for &s in siblings {
            linkage.insert(path.touchpoints[s].id);
            linkage.extend(&path.touchpoints[s].linkage);
            drop[s] = true;
        }
        touches[survivor].linkage = linkage.into_iter().collect();
    }
    let mut out = path.clone();
    out.touchpoints = touches
        .into_iter()
        .zip(drop)
        .filter_map(|(t, d)| (!d).then_some(t))
        .collect();
    out
}

/// Applied retention for one (channel, action) group that lost events.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retention {
    pub channel: Channel,
    pub action: Action,
    pub ratio: f64,
    pub kept: usize,
    pub dropped: usize,
}

/// Per (channel, action) group keeps the `ceil(count · ratio)` latest
/// touchpoints. Identical timestamps are ordered with `rng`.
pub fn downsample<R: Rng>(path: &Path, policy: &SamplingPolicy, rng: &mut R) -> (Path, Vec<Retention>, Vec<Touchpoint>) {
    let mut groups: BTreeMap<TouchKey, Vec<(i64, u64, usize)>> = BTreeMap::new();
    for (i, t) in path.touchpoints.iter().enumerate() {
        groups.entry(t.key()).or_default().push((t.ts, rng.random(), i));
    }
    let mut keep = vec![true; path.touchpoints.len()];
    let mut retention = Vec::new();
    for (key, mut members) in groups {
        let ratio = policy.ratio(&key);
        let n = members.len();
        let kept = keep_count(n, ratio);
        if kept == n {
            continue;
        }
        members.sort_unstable();
        for &(_, _, i) in &members[..n - kept] {
            keep[i] = false;
        }
        retention.push(Retention {
            channel: key.channel,
            action: key.action,
            ratio,
            kept,
            dropped: n - kept,
        });
    }
    let mut out = path.clone();
    let mut dropped = Vec::new();
    out.touchpoints.clear();
    for (t, k) in path.touchpoints.iter().zip(keep) {
        if k {
            out.touchpoints.push(t.clone());
        } else {
            dropped.push(t.clone());
        }
    }
    (out, retention, dropped)
}

/// `ceil(n · ratio)`, robust to representation error in the product and
/// never emptying a non-empty group.
pub fn keep_count(n: usize, ratio: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let x = n as f64 * ratio;
    let k = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (k as usize).clamp(1, n)
}

/// What processing removed from a path, needed to map credits back.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProcessTrace {
    pub path_id: u64,
    pub retention: Vec<Retention>,
    pub dropped: Vec<Touchpoint>,
    pub truncated: Vec<u64>,
}

/// sessionize → downsample → truncate, with the downsample rng derived from
/// `seed` and the path id.
pub fn process(path: &Path, policy: &SamplingPolicy, max_len: usize, seed: u64) -> Result<(Path, ProcessTrace)> {
    let s = sessionize(path, policy);
    let mut rng = seeds::rng_indexed(seed, "downsample", path.path_id);
    let (d, retention, dropped) = downsample(&s, policy, &mut rng);
    let (t, truncated) = truncate(&d, max_len)?;
    Ok((
        t,
        ProcessTrace {
            path_id: path.path_id,
            retention,
            dropped,
            truncated: truncated.iter().map(|t| t.id).collect(),
        },
    ))
}

/// Expands credits computed on a processed path onto the raw path.
///
/// Groups that lost events to downsampling have every event (kept or
/// dropped) set to the ratio times the group's mean surviving credit. Each
/// event then shares its credit evenly with its linkage set. Truncated
/// events get nothing. The result is renormalized.
pub fn redistribute_credit(
    result: &AttributionResult,
    processed: &Path,
    original: &Path,
    trace: &ProcessTrace,
) -> Result<AttributionResult> {
    if result.credits.len() != processed.len() {
        return Err(Error::InvalidInput(format!(
            "path {}: {} credits for {} touchpoints",
            processed.path_id,
            result.credits.len(),
            processed.len()
        )));
    }
    let mut event_credit: BTreeMap<u64, f64> = BTreeMap::new();
    let mut events: Vec<&Touchpoint> = Vec::new();
    for (t, c) in processed.touchpoints.iter().zip(&result.credits) {
        event_credit.insert(t.id, *c);
        events.push(t);
    }
    for r in &trace.retention {
        let key = TouchKey::new(r.channel.clone(), r.action);
        let survivors: Vec<u64> = processed
            .touchpoints
            .iter()
            .filter(|t| t.key() == key)
            .map(|t| t.id)
            .collect();
        let mean = if survivors.is_empty() {
            0.0
        } else {
            survivors.iter().map(|id| event_credit[id]).sum::<f64>() / survivors.len() as f64
        };
        for id in &survivors {
            *event_credit.get_mut(id).unwrap() *= r.ratio;
        }
        for t in trace.dropped.iter().filter(|t| t.key() == key) {
            event_credit.insert(t.id, r.ratio * mean);
            events.push(t);
        }
    }

    let positions: BTreeMap<u64, usize> = original.touchpoints.iter().enumerate().map(|(i, t)| (t.id, i)).collect();
    let mut credits = vec![0.0; original.len()];
    for t in events {
        let c = event_credit[&t.id];
        let share = c / (1 + t.linkage.len()) as f64;
        for id in std::iter::once(&t.id).chain(&t.linkage) {
            let &pos = positions.get(id).ok_or_else(|| Error::PathInvariant {
                path_id: original.path_id,
                msg: format!("linkage id {id} not found in the raw path"),
            })?;
            credits[pos] += share;
        }
    }
    let total: f64 = credits.iter().sum();
    if total > 0.0 {
        credits.iter_mut().for_each(|c| *c /= total);
    }
    Ok(AttributionResult {
        path_id: original.path_id,
        method: result.method,
        credits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::journey::{Method, SECONDS_PER_DAY};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tp(id: u64, channel: &str, action: Action, ts: i64, campaign: u32) -> Touchpoint {
        Touchpoint {
            id,
            channel: Channel::new(channel),
            action,
            ts,
            campaign_id: campaign,
            campaign_emb: vec![],
            imputed: false,
            linkage: vec![],
        }
    }

    fn path(touches: Vec<Touchpoint>) -> Path {
        Path {
            path_id: 9,
            member_id: 9,
            member_emb: vec![],
            company_emb: vec![],
            converted: true,
            anchor_time: 100 * SECONDS_PER_DAY,
            touchpoints: touches,
        }
    }

    fn feed_policy(ratio: Option<f64>) -> SamplingPolicy {
        let ratios = ratio
            .map(|r| [(TouchKey::new(Channel::new("FEED"), Action::Impression), r)].into_iter().collect())
            .unwrap_or_default();
        SamplingPolicy::new(ratios, [Channel::new("FEED")].into_iter().collect()).unwrap()
    }

    fn ids(p: &Path) -> Vec<u64> {
        p.touchpoints.iter().map(|t| t.id).collect()
    }

    #[test]
    fn truncate_keeps_latest() {
        let p = path((1..=3).map(|i| tp(i, "FEED", Action::Click, i as i64, 0)).collect());
        assert_eq!(ids(&truncate(&p, 5).unwrap().0), vec![1, 2, 3]);
        assert_eq!(ids(&truncate(&p, 2).unwrap().0), vec![2, 3]);
        assert_eq!(ids(&truncate(&p, 1).unwrap().0), vec![3]);
        assert!(truncate(&p, 0).is_err());
    }

    #[test]
    fn sessionize_collapses_same_day_campaign() {
        let p = path(vec![
            tp(1, "FEED", Action::Impression, 10, 4),
            tp(2, "FEED", Action::Impression, 20, 4),
            tp(3, "FEED", Action::Impression, 30, 4),
        ]);
        let s = sessionize(&p, &feed_policy(None));
        assert_eq!(ids(&s), vec![3]);
        assert_eq!(s.touchpoints[0].linkage, vec![1, 2]);
    }

    #[test]
    fn sessionize_respects_day_and_action() {
        let p = path(vec![
            tp(1, "FEED", Action::Impression, 10, 4),
            tp(2, "FEED", Action::Impression, SECONDS_PER_DAY + 10, 4),
        ]);
        assert_eq!(sessionize(&p, &feed_policy(None)), p);
        let p = path(vec![tp(1, "FEED", Action::Impression, 10, 4), tp(2, "FEED", Action::Click, 20, 4)]);
        assert_eq!(sessionize(&p, &feed_policy(None)), p);
    }

    #[test]
    fn downsample_keeps_ceiling_of_latest() {
        let p = path((1..=10).map(|i| tp(i, "FEED", Action::Impression, i as i64 * 100, i as u32)).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (d, ret, dropped) = downsample(&p, &feed_policy(Some(0.3)), &mut rng);
        assert_eq!(ids(&d), vec![8, 9, 10]);
        assert_eq!(dropped.len(), 7);
        assert_eq!(ret[0].kept, 3);
    }

    #[test]
    fn downsample_identity_and_floor() {
        let p = path((1..=4).map(|i| tp(i, "FEED", Action::Impression, i as i64, 0)).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(downsample(&p, &feed_policy(Some(1.0)), &mut rng).0, p);
        let one = path(vec![tp(1, "FEED", Action::Impression, 1, 0)]);
        assert_eq!(downsample(&one, &feed_policy(Some(0.01)), &mut rng).0, one);
    }

    #[test]
    fn linkage_split_evenly() {
        let raw = path(vec![
            tp(1, "FEED", Action::Impression, 10, 4),
            tp(2, "FEED", Action::Impression, 20, 4),
            tp(3, "FEED", Action::Impression, 30, 4),
            tp(4, "EMAIL", Action::Open, 40, 1),
        ]);
        let (processed, trace) = process(&raw, &feed_policy(None), 10, 1).unwrap();
        let res = AttributionResult {
            path_id: 9,
            method: Method::Attention,
            credits: vec![0.6, 0.4],
        };
        let out = redistribute_credit(&res, &processed, &raw, &trace).unwrap();
        for (got, want) in out.credits.iter().zip([0.2, 0.2, 0.2, 0.4]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn dropped_sibling_gets_scaled_credit() {
        let raw = path(vec![
            tp(1, "FEED", Action::Impression, 10, 1),
            tp(2, "FEED", Action::Impression, 20, 2),
            tp(3, "EMAIL", Action::Open, 40, 1),
        ]);
        let (processed, trace) = process(&raw, &feed_policy(Some(0.5)), 10, 1).unwrap();
        assert_eq!(ids(&processed), vec![2, 3]);
        let res = AttributionResult {
            path_id: 9,
            method: Method::Attention,
            credits: vec![0.5, 0.5],
        };
        let out = redistribute_credit(&res, &processed, &raw, &trace).unwrap();
        // 0.25, 0.25, 0.5 before normalization, which already sums to one
        for (got, want) in out.credits.iter().zip([0.25, 0.25, 0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn no_processing_is_identity() {
        let raw = path(vec![tp(1, "EMAIL", Action::Open, 1, 0), tp(2, "EMAIL", Action::Open, 2, 0)]);
        let (processed, trace) = process(&raw, &SamplingPolicy::default(), 10, 1).unwrap();
        let res = AttributionResult {
            path_id: 9,
            method: Method::Attention,
            credits: vec![0.3, 0.7],
        };
        assert_eq!(redistribute_credit(&res, &processed, &raw, &trace).unwrap(), res);
    }

    #[test]
    fn unknown_linkage_is_an_error() {
        let mut t = tp(2, "FEED", Action::Impression, 5, 0);
        t.linkage = vec![77];
        let raw = path(vec![t]);
        let res = AttributionResult {
            path_id: 9,
            method: Method::Attention,
            credits: vec![1.0],
        };
        assert!(redistribute_credit(&res, &raw, &raw, &ProcessTrace::default()).is_err());
    }

    #[test]
    fn policy_from_kv() {
        let kv = KvConfig::parse("FEED.IMPRESSION.ratio = 0.3\nsessionize = FEED, SEARCH\n").unwrap();
        let p = SamplingPolicy::from_kv(&kv).unwrap();
        assert_eq!(p.ratio(&TouchKey::new(Channel::new("FEED"), Action::Impression)), 0.3);
        assert_eq!(p.ratio(&TouchKey::new(Channel::new("FEED"), Action::Click)), 1.0);
        assert!(p.is_sessionizable(&Channel::new("SEARCH")));
        let bad = KvConfig::parse("FEED.IMPRESSION.ratio = 0\n").unwrap();
        assert!(SamplingPolicy::from_kv(&bad).is_err());
    }
}
