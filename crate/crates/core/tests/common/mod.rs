#![allow(dead_code)]

use lidda::journey::{Action, Channel, Path, TouchKey, Touchpoint, Vocab};
use lidda::model::ModelConfig;
use rand::Rng;

pub const DAY: i64 = 86_400;
pub const ANCHOR: i64 = 1_700_000_000;

pub fn keys() -> Vec<TouchKey> {
    vec![
        TouchKey::new(Channel::new("EMAIL"), Action::Open),
        TouchKey::new(Channel::new("EMAIL"), Action::Send),
        TouchKey::new(Channel::new("FEED"), Action::Click),
        TouchKey::new(Channel::new("FEED"), Action::Impression),
        TouchKey::new(Channel::new("SEARCH"), Action::Click),
    ]
}

pub fn vocab() -> Vocab {
    Vocab::build(&keys()).unwrap()
}

pub fn touch(id: u64, key: &TouchKey, ts: i64, campaign: u32, emb: Vec<f64>) -> Touchpoint {
    Touchpoint {
        id,
        channel: key.channel.clone(),
        action: key.action,
        ts,
        campaign_id: campaign,
        campaign_emb: emb,
        imputed: false,
        linkage: Vec::new(),
    }
}

/// Small model: N=4, d_model=8, H=2.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        max_len: 4,
        d_kind: 4,
        d_campaign: 4,
        n_heads: 2,
        day_buckets: 10,
        d_member: 2,
        d_company: 2,
        hidden: 6,
        seed: 3,
        ..ModelConfig::default()
    }
}

/// Random path with `len` touches fitting `cfg`.
pub fn random_path<R: Rng>(rng: &mut R, id: u64, len: usize, cfg: &ModelConfig, converted: bool) -> Path {
    let ks = keys();
    let mut ts: Vec<i64> = (0..len).map(|_| ANCHOR - rng.random_range(0..20 * DAY)).collect();
    ts.sort_unstable();
    let touchpoints = ts
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let k = &ks[rng.random_range(0..ks.len())];
            let emb = (0..cfg.d_campaign).map(|_| rng.random_range(-1.0..1.0)).collect();
            touch(id * 100 + i as u64, k, t, rng.random_range(0..5), emb)
        })
        .collect();
    Path {
        path_id: id,
        member_id: id,
        member_emb: (0..cfg.d_member).map(|_| rng.random_range(-1.0..1.0)).collect(),
        company_emb: (0..cfg.d_company).map(|_| rng.random_range(-1.0..1.0)).collect(),
        converted,
        anchor_time: ANCHOR,
        touchpoints,
    }
}

use lidda::model::{batch_loss, AttentionModel, CalibrationMode, Encoded};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Model with every parameter jittered away from its initial value so no
/// gradient is trivially zero.
pub fn jittered_model(cfg: ModelConfig, seed: u64) -> AttentionModel {
    let mut m = AttentionModel::new(cfg, vocab()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        for x in m.params.get_mut(id).data_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
    }
    m
}

/// Mixed batch at the model's length: full, partial and single-touch paths.
pub fn gradcheck_batch(m: &AttentionModel, seed: u64) -> Vec<Encoded> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = m.config.max_len;
    [(n, true), (2, true), (1, false), (n, false), (3.min(n), true)]
        .iter()
        .enumerate()
        .map(|(i, &(len, conv))| m.encode(&random_path(&mut rng, i as u64, len, &m.config, conv)).unwrap())
        .collect()
}

/// Norm-relative error between analytic and central-difference gradients,
/// one entry per parameter.
pub fn model_gradcheck(
    m: &mut AttentionModel,
    batch: &[Encoded],
    calib: Option<(CalibrationMode, &[f64], &[f64])>,
    beta: f64,
    step: f64,
) -> Vec<(String, f64)> {
    let refs: Vec<&Encoded> = batch.iter().collect();
    let eval = |m: &AttentionModel| -> f64 {
        let mut tape = gradkernel::Tape::new();
        let l = batch_loss(m, &mut tape, &refs, calib, beta).unwrap();
        tape.value(l.total).item()
    };
    let mut tape = gradkernel::Tape::new();
    let l = batch_loss(m, &mut tape, &refs, calib, beta).unwrap();
    let grads = tape.backward(l.total, &m.params).unwrap();
    let ids: Vec<_> = m.params.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        let analytic = grads.param(id).data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for k in 0..analytic.len() {
            let orig = m.params.get(id).data()[k];
            m.params.get_mut(id).data_mut()[k] = orig + step;
            let up = eval(m);
            m.params.get_mut(id).data_mut()[k] = orig - step;
            let down = eval(m);
            m.params.get_mut(id).data_mut()[k] = orig;
            numeric[k] = (up - down) / (2.0 * step);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        out.push((m.params.name(id).to_string(), rel));
    }
    out
}

use lidda::imputation::AllocationProblem;

/// Random feasible allocation instance with `J, K ≤ max`.
pub fn random_problem<R: Rng>(rng: &mut R, max: usize) -> AllocationProblem {
    let j = rng.random_range(0..=max);
    let k = rng.random_range(if j == 0 { 1 } else { 0 }..=max);
    let w: Vec<f64> = (0..j).map(|_| rng.random_range(0.05..20.0)).collect();
    let u: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..5.0)).collect();
    let u_pos = u.iter().sum::<f64>() > 0.0;
    let mut extra = rng.random_range(0.5..(3.0 * (j + k) as f64 + 2.0));
    if !u_pos && j == 0 {
        // nothing can absorb the budget: fall back to one positive path
        return AllocationProblem::new(0, w, vec![1.0], extra).unwrap();
    }
    if !u_pos {
        extra = extra.max(0.1);
    }
    AllocationProblem::new(0, w, u, j as f64 + extra).unwrap()
}
