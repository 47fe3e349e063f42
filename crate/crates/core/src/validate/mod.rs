//! Offline and experiment-style validation.

pub mod experiment;
pub mod interpret;
pub mod stability;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::quantile;
use crate::seeds;

pub use experiment::{
    dda_attribution_estimates, fit_propensity, ipw_attribution, raw_attribution, DdaEstimates, PropensityModel,
};
pub use interpret::{ablation_run, parse_variants, permutation_test, AblationReport, AblationRow, PermutationReport};
pub use stability::{
    anderson_darling, bootstrap_weight_stability, partition, retrain_runs, retrain_stability, weights_by_kind, AdTest, RetrainReport,
    RetrainRun, WeightStability,
};

pub const DEFAULT_BOOTSTRAP_REPS: usize = 1000;

/// Point estimate with a percentile bootstrap interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Estimate {
    pub fn covers(&self, x: f64) -> bool {
        self.ci_low <= x && x <= self.ci_high
    }

    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.ci_low <= other.ci_high && other.ci_low <= self.ci_high
    }

    /// Interval excludes zero.
    pub fn significant(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }
}

/// Statistic over `reps` resamples of `0..n`, each replicate with its own
/// indexed rng. Replicates where `stat` is undefined are dropped.
pub(crate) fn bootstrap<T, F>(n: usize, reps: usize, seed: u64, label: &str, stat: F) -> Vec<T>
where
    T: Send,
    F: Fn(&[usize]) -> Option<T> + Sync,
{
    use rand::Rng;
    (0..reps)
        .into_par_iter()
        .filter_map(|b| {
            let mut rng = seeds::rng_indexed(seed, label, b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            stat(&idx)
        })
        .collect()
}

/// Central 95% percentile interval.
pub(crate) fn percentile_ci(estimate: f64, mut reps: Vec<f64>) -> Estimate {
    if reps.is_empty() {
        return Estimate {
            estimate,
            ci_low: estimate,
            ci_high: estimate,
        };
    }
    reps.sort_by(f64::total_cmp);
    Estimate {
        estimate,
        ci_low: quantile(&reps, 0.025),
        ci_high: quantile(&reps, 0.975),
    }
}
