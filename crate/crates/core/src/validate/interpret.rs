use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crediting::pooled_channel_mix;
use crate::error::{Error, Result};
use crate::journey::Vocab;
use crate::metrics::{median, quantile, roc_auc};
use crate::model::{fit, Ablation, AttentionModel, Encoded, ModelConfig};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    /// One single-pass AUC per trial.
    pub baseline: Vec<f64>,
    /// `passes` AUCs per trial with permuted attention.
    pub permuted: Vec<Vec<f64>>,
    pub baseline_median: f64,
    pub permuted_median: f64,
    /// Fraction of trials whose permuted median falls below the baseline
    /// 20th percentile.
    pub fraction_below_p20: f64,
    pub baseline_variance: f64,
    pub permuted_variance: f64,
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len().max(2) - 1) as f64
}

/// Trains one model per trial (trial-specific seed) and scores the shared
/// holdout once as is and `passes` times with attention weights shuffled
/// among each path's real touches.
#[allow(clippy::too_many_arguments)]
pub fn permutation_test(
    train: &[Encoded],
    holdout: &[Encoded],
    vocab: &Vocab,
    config: &ModelConfig,
    trials: usize,
    passes: usize,
    permute: bool,
    seed: u64,
) -> Result<PermutationReport> {
    if trials == 0 || passes == 0 {
        return Err(Error::InvalidInput("permutation test needs at least one trial and pass".into()));
    }
    let y: Vec<bool> = holdout.iter().map(|e| e.label > 0.5).collect();
    let auc = |p: &[f64]| roc_auc(p, &y).ok_or_else(|| Error::InvalidInput("holdout needs both outcomes".into()));
    let runs = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut cfg = config.clone();
            cfg.seed = seeds::derive_indexed(seed, "permutation/trial", t as u64);
            let mut m = AttentionModel::new(cfg, vocab.clone())?;
            fit(&mut m, train, &[], None)?;
            let base_p = m.predict_encoded(holdout)?;
            let base = auc(&base_p)?;
            let perm = (0..passes)
                .map(|k| {
                    if permute {
                        let s = seeds::derive_indexed(seed, &format!("permutation/pass/{t}"), k as u64);
                        auc(&m.predict_permuted(holdout, s)?)
                    } else {
                        Ok(base)
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((base, perm))
        })
        .collect::<Result<Vec<_>>>()?;
    let baseline: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let permuted: Vec<Vec<f64>> = runs.into_iter().map(|r| r.1).collect();
    let mut sorted = baseline.clone();
    sorted.sort_by(f64::total_cmp);
    let p20 = quantile(&sorted, 0.2);
    let below = permuted.iter().filter(|p| median(p) < p20).count();
    let flat: Vec<f64> = permuted.iter().flatten().copied().collect();
    Ok(PermutationReport {
        baseline_median: median(&baseline),
        permuted_median: median(&flat),
        fraction_below_p20: below as f64 / trials as f64,
        baseline_variance: variance(&baseline),
        permuted_variance: variance(&flat),
        baseline,
        permuted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub roc_auc: f64,
    /// Percent change in AUC relative to the baseline.
    pub auc_change_pct: f64,
    /// Mean over channels of the squared share difference from the
    /// baseline, in percentage points squared.
    pub msd: f64,
    pub channel_mix: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub channels: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v.name())
    }
}

pub fn parse_variants(names: &[&str]) -> Result<Vec<Ablation>> {
    names
        .iter()
        .map(|n| Ablation::parse(n).ok_or_else(|| Error::InvalidInput(format!("unknown ablation variant `{n}`"))))
        .collect()
}

/// Trains every variant on the same split with the same seed, evaluates AUC
/// on `validation` and the channel mix on `inference`.
pub fn ablation_run(
    train: &[Encoded],
    validation: &[Encoded],
    inference: &[Encoded],
    vocab: &Vocab,
    config: &ModelConfig,
    variants: &[Ablation],
) -> Result<AblationReport> {
    let y: Vec<bool> = validation.iter().map(|e| e.label > 0.5).collect();
    let mut all = vec![Ablation::Baseline];
    all.extend(variants.iter().filter(|v| **v != Ablation::Baseline));
    let results = all
        .par_iter()
        .map(|&v| {
            let mut cfg = config.clone();
            cfg.ablation = v;
            let mut m = AttentionModel::new(cfg, vocab.clone())?;
            fit(&mut m, train, &[], None)?;
            let auc = roc_auc(&m.predict_encoded(validation)?, &y)
                .ok_or_else(|| Error::InvalidInput("validation set needs both outcomes".into()))?;
            let mix = pooled_channel_mix(&m, inference)?;
            Ok((v, auc, mix, m.channels.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (_, base_auc, base_mix, channels) = results[0].clone();
    let rows = results
        .into_iter()
        .filter(|(v, ..)| variants.contains(v))
        .map(|(v, auc, mix, _)| AblationRow {
            variant: v.name().to_string(),
            roc_auc: auc,
            auc_change_pct: 100.0 * (auc - base_auc) / base_auc,
            msd: mix
                .iter()
                .zip(&base_mix)
                .map(|(a, b)| (100.0 * (a - b)).powi(2))
                .sum::<f64>()
                / mix.len().max(1) as f64,
            channel_mix: mix,
        })
        .collect();
    Ok(AblationReport {
        channels: channels.iter().map(|c| c.to_string()).collect(),
        rows,
    })
}
