use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bootstrap;
use crate::error::{Error, Result};
use crate::journey::{AttributionResult, Path, Vocab};
use crate::metrics::{pr_auc, quantile, roc_auc};
use crate::model::{fit, AttentionModel, Encoded, ModelConfig};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStability {
    pub n: usize,
    pub mean: f64,
    /// Bootstrap mean minus sample mean, one per replicate.
    pub biases: Vec<f64>,
    pub mean_bias: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Credits of converting paths grouped by touch kind.
pub fn weights_by_kind(results: &[AttributionResult], paths: &[Path]) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (r, p) in results.iter().zip(paths) {
        if !p.converted || r.credits.len() != p.len() {
            continue;
        }
        for (t, c) in p.touchpoints.iter().zip(&r.credits) {
            out.entry(t.key().to_string()).or_default().push(*c);
        }
    }
    out
}

/// Resamples each action's weights with replacement `reps` times and
/// reports the distribution of bootstrap-mean bias.
pub fn bootstrap_weight_stability(
    samples: &BTreeMap<String, Vec<f64>>,
    reps: usize,
    seed: u64,
) -> Result<BTreeMap<String, WeightStability>> {
    let mut out = BTreeMap::new();
    for (kind, w) in samples {
        if w.is_empty() {
            return Err(Error::InvalidInput(format!("no weights for {kind}")));
        }
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let label = format!("bootstrap/weights/{kind}");
        let biases: Vec<f64> = bootstrap(w.len(), reps, seed, &label, |idx| {
            Some(idx.iter().map(|&i| w[i]).sum::<f64>() / idx.len() as f64 - mean)
        });
        let mut sorted = biases.clone();
        sorted.sort_by(f64::total_cmp);
        out.insert(
            kind.clone(),
            WeightStability {
                n: w.len(),
                mean,
                mean_bias: biases.iter().sum::<f64>() / biases.len().max(1) as f64,
                ci_low: if sorted.is_empty() { 0.0 } else { quantile(&sorted, 0.025) },
                ci_high: if sorted.is_empty() { 0.0 } else { quantile(&sorted, 0.975) },
                biases,
            },
        );
    }
    Ok(out)
}

/// Critical value of the standardized two-sample statistic at the 5% level.
pub const AD_CRITICAL_05: f64 = 1.961;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdTest {
    /// Midrank k-sample statistic for k = 2.
    pub statistic: f64,
    /// `(A² − 1) / σ`.
    pub standardized: f64,
    pub critical: f64,
    pub flagged: bool,
}

/// Two-sample Anderson–Darling test, rank form with midranks for ties.
pub fn anderson_darling(a: &[f64], b: &[f64]) -> Result<AdTest> {
    if a.len() < 5 || b.len() < 5 {
        return Err(Error::InvalidInput("each sample needs at least 5 observations".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("samples must be finite".into()));
    }
    let samples = [a, b];
    let mut z: Vec<f64> = a.iter().chain(b).copied().collect();
    z.sort_by(f64::total_cmp);
    let n_tot = z.len() as f64;
    let mut distinct: Vec<(f64, f64, f64)> = Vec::new(); // (value, l_j, count below)
    let mut i = 0;
    while i < z.len() {
        let mut j = i;
        while j < z.len() && z[j] == z[i] {
            j += 1;
        }
        distinct.push((z[i], (j - i) as f64, i as f64));
        i = j;
    }
    let mut a2 = 0.0;
    for s in samples {
        let mut s = s.to_vec();
        s.sort_by(f64::total_cmp);
        let ni = s.len() as f64;
        let mut inner = 0.0;
        let mut below = 0usize;
        for &(v, lj, left) in &distinct {
            while below < s.len() && s[below] < v {
                below += 1;
            }
            let mut at = below;
            while at < s.len() && s[at] == v {
                at += 1;
            }
            let fij = (at - below) as f64;
            let mij = at as f64 - fij / 2.0;
            let bj = left + lj / 2.0;
            inner += lj / n_tot * (n_tot * mij - bj * ni).powi(2) / (bj * (n_tot - bj) - n_tot * lj / 4.0);
        }
        a2 += inner / ni;
    }
    a2 *= (n_tot - 1.0) / n_tot;

    let k = 2.0;
    let hh: f64 = samples.iter().map(|s| 1.0 / s.len() as f64).sum();
    let n = z.len();
    let (mut cum, mut g) = (0.0, 0.0);
    for t in 0..n - 2 {
        cum += 1.0 / (n - 1 - t) as f64;
        g += cum / (t + 2) as f64;
    }
    let h = cum + 1.0;
    let ca = (4.0 * g - 6.0) * (k - 1.0) + (10.0 - 6.0 * g) * hh;
    let cb = (2.0 * g - 4.0) * k * k + 8.0 * h * k + (2.0 * g - 14.0 * h - 4.0) * hh - 8.0 * h + 4.0 * g - 6.0;
    let cc = (6.0 * h + 2.0 * g - 2.0) * k * k + (4.0 * h - 4.0 * g + 6.0) * k + (2.0 * h - 6.0) * hh + 4.0 * h;
    let cd = (2.0 * h + 6.0) * k * k - 4.0 * h * k;
    let var = (ca * n_tot.powi(3) + cb * n_tot.powi(2) + cc * n_tot + cd) / ((n_tot - 1.0) * (n_tot - 2.0) * (n_tot - 3.0));
    let standardized = (a2 - (k - 1.0)) / var.sqrt();
    Ok(AdTest {
        statistic: a2,
        standardized,
        critical: AD_CRITICAL_05,
        flagged: standardized > AD_CRITICAL_05,
    })
}

/// Shuffles `0..n`, holds out a fraction, and deals the rest round-robin
/// into `subsets` disjoint training sets.
pub fn partition(n: usize, subsets: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeds::rng(seed, "retrain/partition"));
    let n_hold = (n as f64 * holdout_fraction).round() as usize;
    let holdout = idx[..n_hold].to_vec();
    let mut sets = vec![Vec::new(); subsets];
    for (k, &i) in idx[n_hold..].iter().enumerate() {
        sets[k % subsets].push(i);
    }
    (holdout, sets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainRun {
    pub subset: usize,
    pub n_train: usize,
    pub roc_auc: f64,
    pub pr_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub runs: Vec<RetrainRun>,
    pub roc_range: f64,
    pub pr_range: f64,
}

fn has_both(items: &[Encoded]) -> bool {
    items.iter().any(|e| e.label > 0.5) && items.iter().any(|e| e.label < 0.5)
}

/// Trains one model per training set and scores each on `holdout`.
pub fn retrain_runs(vocab: &Vocab, config: &ModelConfig, sets: &[Vec<Encoded>], holdout: &[Encoded]) -> Result<RetrainReport> {
    if !has_both(holdout) || sets.iter().any(|s| !has_both(s)) {
        return Err(Error::InvalidInput(
            "insufficient data: every subset and the holdout need both outcomes".into(),
        ));
    }
    let y: Vec<bool> = holdout.iter().map(|e| e.label > 0.5).collect();
    let runs = sets
        .par_iter()
        .enumerate()
        .map(|(k, set)| {
            let mut m = AttentionModel::new(config.clone(), vocab.clone())?;
            fit(&mut m, set, &[], None)?;
            let p = m.predict_encoded(holdout)?;
            Ok(RetrainRun {
                subset: k,
                n_train: set.len(),
                roc_auc: roc_auc(&p, &y).expect("both classes"),
                pr_auc: pr_auc(&p, &y).expect("positives present"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let range = |f: fn(&RetrainRun) -> f64| {
        let v: Vec<f64> = runs.iter().map(f).collect();
        v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
    };
    Ok(RetrainReport {
        roc_range: range(|r| r.roc_auc),
        pr_range: range(|r| r.pr_auc),
        runs,
    })
}

/// Retrains on `subsets` disjoint slices of `items` and evaluates on a
/// shared holdout of `holdout_fraction`.
pub fn retrain_stability(
    items: &[Encoded],
    vocab: &Vocab,
    config: &ModelConfig,
    subsets: usize,
    holdout_fraction: f64,
    seed: u64,
) -> Result<RetrainReport> {
    if subsets == 0 || items.len() < 2 * (subsets + 1) {
        return Err(Error::InvalidInput("insufficient data for retrain stability".into()));
    }
    let (hold, sets) = partition(items.len(), subsets, holdout_fraction, seed);
    let holdout: Vec<Encoded> = hold.iter().map(|&i| items[i].clone()).collect();
    let sets: Vec<Vec<Encoded>> = sets
        .iter()
        .map(|s| s.iter().map(|&i| items[i].clone()).collect())
        .collect();
    retrain_runs(vocab, config, &sets, &holdout)
}
