use std::collections::BTreeSet;

use gradkernel::{Adam, ParamStore, Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::{bootstrap, percentile_ci, Estimate};
use crate::error::{Error, Result};
use crate::journey::{AttributionResult, Method, Path};
use crate::model::AttentionModel;
use crate::pathproc::{process, redistribute_credit, SamplingPolicy};
use crate::synthgen::ExperimentRecord;

pub const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);
const PROPENSITY_ITERS: usize = 2000;
const PROPENSITY_LR: f64 = 0.05;

/// Logistic regression of treatment on the member embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl PropensityModel {
    pub fn predict(&self, emb: &[f64]) -> f64 {
        let z: f64 = self.bias + self.weights.iter().zip(emb).map(|(w, x)| w * x).sum::<f64>();
        gradkernel::sigmoid(z).clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1)
    }

    pub fn predict_all(&self, records: &[ExperimentRecord]) -> Vec<f64> {
        records.iter().map(|r| self.predict(&r.member_emb)).collect()
    }
}

/// Full-batch Adam on the logistic loss until the gradient vanishes.
pub fn fit_propensity(records: &[ExperimentRecord]) -> Result<PropensityModel> {
    let treated = records.iter().filter(|r| r.z == 1).count();
    if treated == 0 || treated == records.len() {
        return Err(Error::InvalidInput("propensity fit needs both treated and control members".into()));
    }
    let d = records[0].member_emb.len();
    if records.iter().any(|r| r.member_emb.len() != d) {
        return Err(Error::InvalidInput("member embeddings differ in width".into()));
    }
    let n = records.len();
    let x = Tensor::new(vec![n, d], records.iter().flat_map(|r| r.member_emb.iter().copied()).collect())?;
    let z: Vec<f64> = records.iter().map(|r| f64::from(r.z)).collect();
    let mut store = ParamStore::new();
    let w_id = store.add("w", Tensor::zeros(&[d, 1]))?;
    let b_id = store.add("b", Tensor::zeros(&[1]))?;
    let mut adam = Adam::new(PROPENSITY_LR);
    for _ in 0..PROPENSITY_ITERS {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let w = tape.param(&store, w_id)?;
        let b = tape.param(&store, b_id)?;
        let logits = tape.matmul(xv, w)?;
        let logits = tape.add_bias(logits, b)?;
        let logits = tape.reshape(logits, &[n])?;
        let loss = tape.bce_with_logits(logits, &z)?;
        let grads = tape.backward(loss, &store)?;
        let gmax = grads.params().iter().flat_map(|g| g.data()).fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < 1e-7 {
            break;
        }
        adam.step(&mut store, grads.params());
    }
    Ok(PropensityModel {
        weights: store.get(w_id).data().to_vec(),
        bias: store.get(b_id).item(),
    })
}

/// `(P̂_1 − P̂_1^cf) / P̂_1` on the members in `idx`. Controls are weighted by
/// `e/(1−e)` when `e` is given, else 1.
fn attribution_point(records: &[ExperimentRecord], e: Option<&[f64]>, idx: &[usize]) -> Option<f64> {
    let (mut tn, mut ty, mut cw, mut cwy) = (0.0, 0.0, 0.0, 0.0);
    for &i in idx {
        let r = &records[i];
        let y = f64::from(r.y);
        if r.z == 1 {
            tn += 1.0;
            ty += y;
        } else {
            let w = e.map_or(1.0, |e| e[i] / (1.0 - e[i]));
            cw += w;
            cwy += w * y;
        }
    }
    if ty == 0.0 || cw == 0.0 {
        return None;
    }
    let p1 = ty / tn;
    Some((p1 - cwy / cw) / p1)
}

fn check_groups(records: &[ExperimentRecord]) -> Result<()> {
    if !records.iter().any(|r| r.z == 1 && r.y == 1) {
        return Err(Error::InvalidInput("no conversions in the treatment group".into()));
    }
    if !records.iter().any(|r| r.z == 0) {
        return Err(Error::InvalidInput("control group is empty".into()));
    }
    Ok(())
}

fn attribution(records: &[ExperimentRecord], e: Option<&[f64]>, reps: usize, seed: u64, label: &str) -> Result<Estimate> {
    check_groups(records)?;
    if let Some(e) = e {
        if e.len() != records.len() {
            return Err(Error::InvalidInput("one propensity per record is required".into()));
        }
    }
    let all: Vec<usize> = (0..records.len()).collect();
    let point = attribution_point(records, e, &all).expect("groups checked");
    let reps = bootstrap(records.len(), reps, seed, label, |idx| attribution_point(records, e, idx));
    Ok(percentile_ci(point, reps))
}

/// IPW experimental attribution of the holdout set with a bootstrap CI.
pub fn ipw_attribution(records: &[ExperimentRecord], e: &[f64], reps: usize, seed: u64) -> Result<Estimate> {
    attribution(records, Some(e), reps, seed, "bootstrap/ipw")
}

/// Unweighted control mean; biased under confounding.
pub fn raw_attribution(records: &[ExperimentRecord], reps: usize, seed: u64) -> Result<Estimate> {
    attribution(records, None, reps, seed, "bootstrap/raw")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdaEstimates {
    /// Mean summed attention credit on holdout touches over converting
    /// treated members.
    pub a_dda: Estimate,
    /// Plug-in from predicted conversion with and without holdout touches.
    pub a_tilde: Estimate,
    /// `â^DDA − â^exp`, when propensities are supplied.
    pub d_dda: Option<Estimate>,
    pub treated_converters: usize,
}

struct MemberTerms {
    holdout_credit: f64,
    p_full: f64,
    p_removed: f64,
}

fn dda_point(records: &[ExperimentRecord], terms: &[Option<MemberTerms>], idx: &[usize]) -> Option<(f64, f64)> {
    let (mut s, mut k, mut pf, mut pr) = (0.0, 0.0, 0.0, 0.0);
    for &i in idx {
        let Some(t) = &terms[i] else { continue };
        pf += t.p_full;
        pr += t.p_removed;
        if records[i].y == 1 {
            s += t.holdout_credit;
            k += 1.0;
        }
    }
    if k == 0.0 || pf == 0.0 {
        return None;
    }
    Some((s / k, (pf - pr) / pf))
}

/// Model-side estimates of the holdout attribution on the treatment group.
/// Paths are processed with `policy` before scoring and credits are mapped
/// back to the raw touches.
#[allow(clippy::too_many_arguments)]
pub fn dda_attribution_estimates(
    model: &AttentionModel,
    records: &[ExperimentRecord],
    paths: &[Path],
    e: Option<&[f64]>,
    policy: &SamplingPolicy,
    process_seed: u64,
    reps: usize,
    seed: u64,
) -> Result<DdaEstimates> {
    if records.len() != paths.len() {
        return Err(Error::InvalidInput("records and paths differ in length".into()));
    }
    let treated: Vec<usize> = (0..records.len()).filter(|&i| records[i].z == 1).collect();
    if treated.is_empty() {
        return Err(Error::InvalidInput("treatment group is empty".into()));
    }
    let holdout: BTreeSet<u32> = records[treated[0]].holdout.iter().copied().collect();
    let n_max = model.config.max_len;

    let mut full = Vec::with_capacity(treated.len());
    let mut removed = Vec::with_capacity(treated.len());
    for &i in &treated {
        full.push(process(&paths[i], policy, n_max, process_seed)?);
        let mut r = paths[i].clone();
        r.touchpoints.retain(|t| !holdout.contains(&t.campaign_id));
        removed.push(process(&r, policy, n_max, process_seed)?.0);
    }
    let full_paths: Vec<Path> = full.iter().map(|(p, _)| p.clone()).collect();
    let enc_full = model.encode_all(&full_paths)?;
    let enc_removed = model.encode_all(&removed)?;
    let p_full = model.predict_encoded(&enc_full)?;
    let p_removed = model.predict_encoded(&enc_removed)?;
    let credits = model.attention_credits(&enc_full)?;

    let mut terms: Vec<Option<MemberTerms>> = (0..records.len()).map(|_| None).collect();
    for (k, &i) in treated.iter().enumerate() {
        let (proc, trace) = &full[k];
        let result = AttributionResult {
            path_id: proc.path_id,
            method: Method::Attention,
            credits: credits[k].clone(),
        };
        let raw = redistribute_credit(&result, proc, &paths[i], trace)?;
        let holdout_credit = paths[i]
            .touchpoints
            .iter()
            .zip(&raw.credits)
            .filter(|(t, _)| holdout.contains(&t.campaign_id))
            .map(|(_, c)| c)
            .sum();
        terms[i] = Some(MemberTerms {
            holdout_credit,
            p_full: p_full[k],
            p_removed: p_removed[k],
        });
    }

    let all: Vec<usize> = (0..records.len()).collect();
    let (a, at) = dda_point(records, &terms, &all)
        .ok_or_else(|| Error::InvalidInput("no converting treated members to attribute".into()))?;
    let triples: Vec<(f64, f64, f64)> = bootstrap(records.len(), reps, seed, "bootstrap/dda", |idx| {
        let (a, at) = dda_point(records, &terms, idx)?;
        let d = match e {
            Some(e) => a - attribution_point(records, Some(e), idx)?,
            None => 0.0,
        };
        Some((a, at, d))
    });
    let d_point = match e {
        Some(e) => Some(a - attribution_point(records, Some(e), &all).ok_or_else(|| {
            Error::InvalidInput("experimental attribution is undefined on this sample".into())
        })?),
        None => None,
    };
    Ok(DdaEstimates {
        a_dda: percentile_ci(a, triples.iter().map(|t| t.0).collect()),
        a_tilde: percentile_ci(at, triples.iter().map(|t| t.1).collect()),
        d_dda: d_point.map(|d| percentile_ci(d, triples.iter().map(|t| t.2).collect())),
        treated_converters: treated.iter().filter(|&&i| records[i].y == 1).count(),
    })
}
