//! Reconstructs member-level impressions of external channels from daily
//! aggregates and the proxy clicks left on member paths.
//!
//! Per day the member budget `I_d` is split between click events `j` (each
//! stands for `x_j ≥ 1` impressions, weight `w_j = r_{c(j),d}`) and paths
//! without a click that day (`y_k ≥ 0`, weight `u_k`). Two allocators are
//! provided: the stochastic Geometric/Poisson draw and the joint solution of
//!
//! ```text
//! max Σ w_j ln x_j + Σ u_k ln y_k   s.t.  Σ x_j + Σ y_k = I_d,  x_j ≥ 1
//! ```
//!
//! whose optimum is `x_j = max(1, w_j/λ)`, `y_k = u_k/λ`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path as FsPath;

use rand::Rng;
use rand_distr::{Distribution, Geometric, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::journey::{Action, Channel, ChannelAggregates, ExternalCell, OwnedStats, Path, Touchpoint, SECONDS_PER_DAY};
use crate::seeds;
use crate::synthgen::Campaign;

/// Member share of the external impressions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemberBudget {
    pub i_mem: BTreeMap<(Channel, i64), f64>,
    pub per_day: BTreeMap<i64, f64>,
}

/// `I_mem = I_ext · member_clicks / C_ext` per cell and `I_d = Σ_c I_mem`.
pub fn member_budget(agg: &ChannelAggregates, member_clicks: &BTreeMap<(Channel, i64), f64>) -> Result<MemberBudget> {
    let mut out = MemberBudget::default();
    for (key, cell) in &agg.cells {
        let clicks = member_clicks.get(key).copied().unwrap_or(0.0);
        let v = cell_budget(key, cell, clicks)?;
        out.i_mem.insert(key.clone(), v);
        *out.per_day.entry(key.1).or_default() += v;
    }
    if let Some(((c, d), _)) = member_clicks.iter().find(|(k, v)| **v > 0.0 && !agg.cells.contains_key(*k)) {
        return Err(Error::InvalidInput(format!("member clicks on ({c}, {d}) but no external aggregate")));
    }
    Ok(out)
}

fn cell_budget((c, d): &(Channel, i64), cell: &ExternalCell, clicks: f64) -> Result<f64> {
    if clicks == 0.0 {
        return Ok(0.0);
    }
    if cell.c_ext == 0.0 {
        return Err(Error::InvalidInput(format!("member clicks on ({c}, {d}) but C_ext = 0")));
    }
    if clicks > cell.c_ext {
        return Err(Error::InvalidInput(format!(
            "member clicks {clicks} exceed external clicks {} on ({c}, {d})",
            cell.c_ext
        )));
    }
    Ok(cell.i_ext * clicks / cell.c_ext)
}

/// Down-weight of the impressions-per-click rate for members who click:
/// `(I_own_clickers / C_own_clickers) / (I_own_total / C_own_total)`.
pub fn owned_alpha(owned: &OwnedStats) -> Result<f64> {
    let OwnedStats {
        i_own_total,
        c_own_total,
        i_own_clickers,
        c_own_clickers,
    } = *owned;
    if [i_own_total, c_own_total, i_own_clickers, c_own_clickers].iter().any(|v| *v <= 0.0) {
        return Err(Error::InvalidInput(format!("owned-channel counts must be positive, got {owned:?}")));
    }
    Ok((i_own_clickers / c_own_clickers) / (i_own_total / c_own_total))
}

/// `r_{c,d} = max(1, α · I_ext / C_ext)`.
pub fn clicker_rate(owned: &OwnedStats, agg: &ChannelAggregates, channel: &Channel, day: i64) -> Result<f64> {
    let alpha = owned_alpha(owned)?;
    let cell = agg
        .cells
        .get(&(channel.clone(), day))
        .ok_or_else(|| Error::InvalidInput(format!("no aggregate for ({channel}, {day})")))?;
    rate_from_alpha(alpha, cell)
}

fn rate_from_alpha(alpha: f64, cell: &ExternalCell) -> Result<f64> {
    if cell.c_ext <= 0.0 {
        return Err(Error::InvalidInput("C_ext must be positive to derive a click rate".into()));
    }
    Ok((alpha * cell.i_ext / cell.c_ext).max(1.0))
}

/// One day's allocation instance.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocationProblem {
    pub day: i64,
    /// Click weights `w_j > 0`.
    pub w: Vec<f64>,
    /// No-click path weights `u_k ≥ 0`.
    pub u: Vec<f64>,
    pub budget: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocationResult {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lambda: f64,
    /// Number of clicks held at the lower bound `x_j = 1`.
    pub clamped: usize,
}

impl AllocationProblem {
    pub fn new(day: i64, w: Vec<f64>, u: Vec<f64>, budget: f64) -> Result<Self> {
        if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput("click weights must be positive".into()));
        }
        if u.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput("path weights must be non-negative".into()));
        }
        if !(budget >= 0.0 && budget.is_finite()) {
            return Err(Error::InvalidInput("budget must be non-negative".into()));
        }
        Ok(Self { day, w, u, budget })
    }

    fn u_sum(&self) -> f64 {
        self.u.iter().sum()
    }

    /// Σ max(1, w_j/λ) + Σ u_k/λ − I_d, decreasing in λ.
    pub fn budget_gap(&self, lambda: f64) -> f64 {
        self.w.iter().map(|w| (w / lambda).max(1.0)).sum::<f64>() + self.u_sum() / lambda - self.budget
    }

    pub fn objective(&self, x: &[f64], y: &[f64]) -> f64 {
        let term = |wt: f64, v: f64| if wt == 0.0 { 0.0 } else { wt * v.ln() };
        self.w.iter().zip(x).map(|(w, v)| term(*w, *v)).sum::<f64>()
            + self.u.iter().zip(y).map(|(u, v)| term(*u, *v)).sum::<f64>()
    }

    fn allocation(&self, lambda: f64) -> AllocationResult {
        let x: Vec<f64> = self.w.iter().map(|w| (w / lambda).max(1.0)).collect();
        AllocationResult {
            clamped: self.w.iter().filter(|w| **w <= lambda).count(),
            y: self.u.iter().map(|u| u / lambda).collect(),
            x,
            lambda,
        }
    }

    /// Instances where every click sits at its bound and no path can absorb
    /// budget: returns λ directly, or an error when the budget is not met.
    fn degenerate_lambda(&self) -> Result<Option<f64>> {
        let j = self.w.len() as f64;
        if self.budget < j {
            return Err(Error::Infeasible(format!(
                "day {}: budget {} cannot cover {} clicks",
                self.day, self.budget, self.w.len()
            )));
        }
        if self.u_sum() > 0.0 {
            if self.budget == j {
                return Err(Error::Infeasible(format!(
                    "day {}: budget equals the click count, leaving nothing for weighted paths",
                    self.day
                )));
            }
            return Ok(None);
        }
        if self.budget == j {
            let w_max = self.w.iter().copied().fold(0.0, f64::max);
            return Ok(Some(if w_max > 0.0 { w_max } else { 1.0 }));
        }
        if self.w.is_empty() {
            return Err(Error::Infeasible(format!(
                "day {}: budget {} with nothing to allocate to",
                self.day, self.budget
            )));
        }
        Ok(None)
    }
}

/// Exact λ by scanning how many of the smallest click weights are clamped.
pub fn solve_joint(p: &AllocationProblem) -> Result<AllocationResult> {
    if let Some(l) = p.degenerate_lambda()? {
        return Ok(p.allocation(l));
    }
    let mut w = p.w.clone();
    w.sort_by(f64::total_cmp);
    let u = p.u_sum();
    // suffix[m] = Σ_{j ≥ m} w_j
    let mut suffix = vec![0.0; w.len() + 1];
    for m in (0..w.len()).rev() {
        suffix[m] = suffix[m + 1] + w[m];
    }
    for m in 0..=w.len() {
        let free = p.budget - m as f64;
        if free <= 0.0 {
            break;
        }
        let lambda = (suffix[m] + u) / free;
        let lower_ok = m == 0 || w[m - 1] <= lambda;
        let upper_ok = m == w.len() || lambda < w[m];
        if lower_ok && upper_ok && lambda > 0.0 {
            return Ok(p.allocation(lambda));
        }
    }
    Err(Error::Infeasible(format!("day {}: no multiplier satisfies the budget", p.day)))
}

/// Reference λ by bisection on the budget gap.
pub fn solve_lambda_bisection(p: &AllocationProblem) -> Result<f64> {
    if let Some(l) = p.degenerate_lambda()? {
        return Ok(l);
    }
    let u = p.u_sum();
    let w_sum: f64 = p.w.iter().sum();
    let w_min = p.w.iter().copied().fold(f64::INFINITY, f64::min);
    let w_max = p.w.iter().copied().fold(0.0, f64::max);
    let mut lo = w_min.min((w_sum + u) / p.budget) * 0.5;
    let mut hi = w_max.max(u / (p.budget - p.w.len() as f64)) * 2.0 + 1.0;
    let tol = 1e-10 * p.budget.max(1.0);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        let g = p.budget_gap(mid);
        if g.abs() < tol || hi - lo <= f64::EPSILON * hi {
            return Ok(mid);
        }
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Integer draws from the stochastic allocator.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticDraws {
    /// Impressions represented by each click, the click included.
    pub m: Vec<u64>,
    /// Impressions per no-click path.
    pub counts: Vec<u64>,
    /// `max(0, I_d − Σ m_j)`.
    pub leftover: f64,
    /// `Σ m_j − I_d` when the clicks overdraw the budget, else 0.
    pub overdraw: f64,
    /// Leftover impressions with no path to receive them.
    pub unallocated: u64,
}

/// `m_j = 1 + Geometric(1/r_j)` failures, then Poisson draws for the
/// leftover rescaled to exhaust `round(L_d)` with largest remainders.
pub fn allocate_stochastic<R: Rng>(p: &AllocationProblem, rng: &mut R) -> Result<StochasticDraws> {
    let mut m = Vec::with_capacity(p.w.len());
    for &r in &p.w {
        if r < 1.0 {
            return Err(Error::InvalidInput(format!("click rate {r} below 1")));
        }
        let g = Geometric::new(1.0 / r).map_err(|e| Error::InvalidInput(e.to_string()))?;
        m.push(1 + g.sample(rng));
    }
    let drawn: f64 = m.iter().map(|v| *v as f64).sum();
    let raw_left = p.budget - drawn;
    let (leftover, overdraw) = if raw_left < 0.0 {
        log::warn!("day {}: clicks overdraw the budget by {:.1}", p.day, -raw_left);
        (0.0, -raw_left)
    } else {
        (raw_left, 0.0)
    };
    let target = leftover.round() as u64;
    if p.u.is_empty() {
        return Ok(StochasticDraws {
            m,
            counts: Vec::new(),
            leftover,
            overdraw,
            unallocated: target,
        });
    }
    let u_sum = p.u_sum();
    let shares: Vec<f64> = if u_sum > 0.0 {
        p.u.iter().map(|u| u / u_sum).collect()
    } else {
        vec![1.0 / p.u.len() as f64; p.u.len()]
    };
    let mut draws = Vec::with_capacity(shares.len());
    for s in &shares {
        let mean = leftover * s;
        draws.push(if mean > 0.0 {
            Poisson::new(mean).map_err(|e| Error::InvalidInput(e.to_string()))?.sample(rng)
        } else {
            0.0
        });
    }
    let basis = if draws.iter().sum::<f64>() > 0.0 { draws } else { shares };
    Ok(StochasticDraws {
        m,
        counts: largest_remainder(&basis, target),
        leftover,
        overdraw,
        unallocated: 0,
    })
}

/// Integers proportional to `weights` that sum to exactly `total`; ties in
/// the fractional part go to the lower index.
pub fn largest_remainder(weights: &[f64], total: u64) -> Vec<u64> {
    let s: f64 = weights.iter().sum();
    if weights.is_empty() || s <= 0.0 {
        return vec![0; weights.len()];
    }
    let scaled: Vec<f64> = weights.iter().map(|w| total as f64 * w / s).collect();
    let mut out: Vec<u64> = scaled.iter().map(|v| v.floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned) as usize) {
        out[i] += 1;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeMode {
    Stochastic,
    Convex,
}

impl ImputeMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stochastic" => Some(Self::Stochastic),
            "convex" => Some(Self::Convex),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImputeConfig {
    pub mode: ImputeMode,
    pub seed: u64,
    pub preclick_window_days: f64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self {
            mode: ImputeMode::Stochastic,
            seed: 0,
            preclick_window_days: 3.0,
        }
    }
}

/// Row of the allocation audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub day: i64,
    pub channel: String,
    pub event_type: String,
    pub event_id: u64,
    pub amount: f64,
}

pub fn write_audit(rows: &[AuditRow], file: &FsPath) -> Result<()> {
    let mut w = csv::Writer::from_path(file)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(file, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DaySummary {
    pub day: i64,
    pub budget: f64,
    pub clicks: usize,
    pub paths: usize,
    pub allocated: f64,
    pub overdraw: f64,
    pub unallocated: f64,
}

#[derive(Clone, Debug)]
pub struct ImputeOutcome {
    pub paths: Vec<Path>,
    pub audit: Vec<AuditRow>,
    pub days: Vec<DaySummary>,
    pub alpha: f64,
}

struct DayPlan {
    problem: AllocationProblem,
    clicks: Vec<(usize, usize)>,
    no_click_paths: Vec<usize>,
    channel_mix: Vec<(Channel, f64)>,
}

/// Integer allocation for one day, ready to be written onto paths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DayAllocation {
    pub day: i64,
    /// `(path index, touch index, m_j)` per click event.
    pub clicks: Vec<(usize, usize, u64)>,
    /// `(path index, impressions)` per no-click path.
    pub paths: Vec<(usize, u64)>,
    /// External channel weights used to label no-click impressions.
    pub channel_mix: Vec<(Channel, f64)>,
}

/// Full imputation over a dataset. External channels are those present in
/// the aggregates; every other channel counts as owned.
pub fn impute(paths: &[Path], agg: &ChannelAggregates, catalog: &[Campaign], cfg: &ImputeConfig) -> Result<ImputeOutcome> {
    agg.validate()?;
    let external = agg.channels();
    let owned_channels: BTreeSet<Channel> = paths
        .iter()
        .flat_map(|p| p.touchpoints.iter().map(|t| t.channel.clone()))
        .filter(|c| !external.contains(c))
        .collect();
    let owned = OwnedStats::from_paths(paths, &owned_channels);
    let alpha = owned_alpha(&owned)?;

    let mut member_clicks: BTreeMap<(Channel, i64), f64> = BTreeMap::new();
    let mut ext_clicks_per_path = vec![0usize; paths.len()];
    for (pi, p) in paths.iter().enumerate() {
        for t in p.touchpoints.iter().filter(|t| is_ext_click(t, &external)) {
            *member_clicks.entry((t.channel.clone(), t.day())).or_default() += 1.0;
            ext_clicks_per_path[pi] += 1;
        }
    }
    let budget = member_budget(agg, &member_clicks)?;

    let mut plans = Vec::new();
    for (&day, &i_d) in &budget.per_day {
        let mut clicks = Vec::new();
        let mut w = Vec::new();
        let mut no_click = Vec::new();
        let mut u = Vec::new();
        for (pi, p) in paths.iter().enumerate() {
            let mut active = false;
            let mut clicked = false;
            for (ti, t) in p.touchpoints.iter().enumerate().filter(|(_, t)| t.day() == day) {
                active = true;
                if is_ext_click(t, &external) {
                    clicked = true;
                    let cell = &agg.cells[&(t.channel.clone(), day)];
                    w.push(rate_from_alpha(alpha, cell)?);
                    clicks.push((pi, ti));
                }
            }
            if active && !clicked {
                no_click.push(pi);
                u.push(ext_clicks_per_path[pi] as f64 + 1.0);
            }
        }
        let channel_mix = budget
            .i_mem
            .iter()
            .filter(|((_, d), v)| *d == day && **v > 0.0)
            .map(|((c, _), v)| (c.clone(), *v))
            .collect();
        plans.push(DayPlan {
            problem: AllocationProblem::new(day, w, u, i_d)?,
            clicks,
            no_click_paths: no_click,
            channel_mix,
        });
    }

    let results: Vec<(DayAllocation, DaySummary)> = plans
        .par_iter()
        .map(|plan| allocate_day(plan, cfg))
        .collect::<Result<_>>()?;
    let (allocations, days): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let (out_paths, mut audit) = materialize(paths, &allocations, catalog, cfg)?;
    for d in &days {
        for (kind, amount) in [("unallocated", d.unallocated), ("overdraw", d.overdraw)] {
            if amount > 0.0 {
                audit.push(AuditRow {
                    day: d.day,
                    channel: String::new(),
                    event_type: kind.into(),
                    event_id: 0,
                    amount,
                });
            }
        }
    }
    Ok(ImputeOutcome {
        paths: out_paths,
        audit,
        days,
        alpha,
    })
}

/// Writes allocations onto copies of `paths`: `m_j − 1` impressions of the
/// click's channel and campaign in the window before each click, and the
/// per-path counts spread uniformly over the day with channels drawn from
/// the day's mix and campaigns from the catalog. Returns the audit rows.
pub fn materialize(
    paths: &[Path],
    allocations: &[DayAllocation],
    catalog: &[Campaign],
    cfg: &ImputeConfig,
) -> Result<(Vec<Path>, Vec<AuditRow>)> {
    if !(cfg.preclick_window_days > 0.0) {
        return Err(Error::Config("impute.preclick_window_days must be positive".into()));
    }
    let window = ((cfg.preclick_window_days * SECONDS_PER_DAY as f64) as i64).max(1);
    let mut out = paths.to_vec();
    let mut next_id = paths.iter().filter_map(Path::max_touch_id).max().unwrap_or(0) + 1;
    let mut audit = Vec::new();
    let mut by_channel: BTreeMap<&Channel, Vec<&Campaign>> = BTreeMap::new();
    for c in catalog {
        by_channel.entry(&c.channel).or_default().push(c);
    }
    let mut touched = BTreeSet::new();
    for alloc in allocations {
        let mut rng = seeds::rng_indexed(cfg.seed, "impute/materialize", alloc.day as u64);
        for &(pi, ti, m) in &alloc.clicks {
            let src = paths
                .get(pi)
                .and_then(|p| p.touchpoints.get(ti))
                .ok_or_else(|| Error::InvalidInput(format!("allocation references missing click ({pi}, {ti})")))?;
            audit.push(AuditRow {
                day: alloc.day,
                channel: src.channel.to_string(),
                event_type: "click".into(),
                event_id: src.id,
                amount: m as f64,
            });
            for _ in 1..m {
                let ts = rng.random_range(src.ts - window..src.ts);
                out[pi].touchpoints.push(imputed(next_id, &src.channel, ts, src.campaign_id, &src.campaign_emb));
                next_id += 1;
                touched.insert(pi);
            }
        }
        for &(pi, count) in &alloc.paths {
            let path = paths
                .get(pi)
                .ok_or_else(|| Error::InvalidInput(format!("allocation references missing path {pi}")))?;
            if count == 0 {
                continue;
            }
            let start = alloc.day * SECONDS_PER_DAY;
            let end = (start + SECONDS_PER_DAY).min(path.anchor_time + 1);
            let mut per_channel: BTreeMap<Channel, u64> = BTreeMap::new();
            for _ in 0..count {
                let channel = pick_weighted(&alloc.channel_mix, &mut rng)?;
                let options = by_channel
                    .get(&channel)
                    .ok_or_else(|| Error::InvalidInput(format!("no catalog campaigns for channel {channel}")))?;
                let camp = options[rng.random_range(0..options.len())];
                let ts = if end > start { rng.random_range(start..end) } else { start };
                out[pi].touchpoints.push(imputed(next_id, &channel, ts, camp.campaign_id, &camp.emb));
                next_id += 1;
                *per_channel.entry(channel).or_default() += 1;
            }
            touched.insert(pi);
            for (c, n) in per_channel {
                audit.push(AuditRow {
                    day: alloc.day,
                    channel: c.to_string(),
                    event_type: "path".into(),
                    event_id: path.path_id,
                    amount: n as f64,
                });
            }
        }
    }
    for pi in touched {
        out[pi].touchpoints.sort_by_key(|t| t.ts);
    }
    Ok((out, audit))
}

fn is_ext_click(t: &Touchpoint, external: &BTreeSet<Channel>) -> bool {
    t.action == Action::Click && !t.imputed && external.contains(&t.channel)
}

fn imputed(id: u64, channel: &Channel, ts: i64, campaign_id: u32, emb: &[f64]) -> Touchpoint {
    Touchpoint {
        id,
        channel: channel.clone(),
        action: Action::Impression,
        ts,
        campaign_id,
        campaign_emb: emb.to_vec(),
        imputed: true,
        linkage: Vec::new(),
    }
}

fn pick_weighted<R: Rng>(mix: &[(Channel, f64)], rng: &mut R) -> Result<Channel> {
    let last = mix
        .last()
        .ok_or_else(|| Error::InvalidInput("no external channel to label imputed impressions".into()))?;
    let total: f64 = mix.iter().map(|(_, w)| w).sum();
    let mut r = rng.random::<f64>() * total;
    for (c, w) in mix {
        if r < *w {
            return Ok(c.clone());
        }
        r -= w;
    }
    Ok(last.0.clone())
}

fn allocate_day(plan: &DayPlan, cfg: &ImputeConfig) -> Result<(DayAllocation, DaySummary)> {
    let p = &plan.problem;
    let (m, counts, overdraw, unallocated) = match cfg.mode {
        ImputeMode::Stochastic => {
            let mut rng = seeds::rng_indexed(cfg.seed, "impute/allocate", p.day as u64);
            let d = allocate_stochastic(p, &mut rng)?;
            (d.m, d.counts, d.overdraw, d.unallocated as f64)
        }
        ImputeMode::Convex => convex_counts(p),
    };
    let allocated = m.iter().chain(&counts).map(|v| *v as f64).sum();
    let summary = DaySummary {
        day: p.day,
        budget: p.budget,
        clicks: p.w.len(),
        paths: p.u.len(),
        allocated,
        overdraw,
        unallocated,
    };
    let alloc = DayAllocation {
        day: p.day,
        clicks: plan.clicks.iter().zip(m).map(|(&(pi, ti), m)| (pi, ti, m)).collect(),
        paths: plan.no_click_paths.iter().copied().zip(counts).collect(),
        channel_mix: plan.channel_mix.clone(),
    };
    Ok((alloc, summary))
}

/// Rounds the joint solution to whole impressions. When the budget cannot
/// cover one impression per click, every click keeps its own and the excess
/// is reported as overdraw.
fn convex_counts(p: &AllocationProblem) -> (Vec<u64>, Vec<u64>, f64, f64) {
    let j = p.w.len() as f64;
    if p.budget < j || (p.u.iter().sum::<f64>() > 0.0 && p.budget == j) {
        if p.budget < j {
            log::warn!("day {}: clicks overdraw the budget by {:.1}", p.day, j - p.budget);
        }
        return (vec![1; p.w.len()], vec![0; p.u.len()], (j - p.budget).max(0.0), 0.0);
    }
    if p.w.is_empty() && p.u.is_empty() {
        return (Vec::new(), Vec::new(), 0.0, p.budget.round());
    }
    match solve_joint(p) {
        Ok(sol) => {
            let m: Vec<u64> = sol.x.iter().map(|x| x.round().max(1.0) as u64).collect();
            let used: u64 = m.iter().sum();
            let rest = (p.budget.round() as u64).saturating_sub(used);
            (m, largest_remainder(&sol.y, rest), 0.0, 0.0)
        }
        Err(_) => (vec![1; p.w.len()], vec![0; p.u.len()], 0.0, (p.budget - j).max(0.0).round()),
    }
}
