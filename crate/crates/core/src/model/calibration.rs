use std::collections::BTreeMap;
use std::path::Path as FsPath;

use gradkernel::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::config::CalibrationMode;
use crate::error::{Error, Result};
use crate::journey::Channel;

const LN_FLOOR: f64 = 1e-12;

/// Channel-level targets from a media-mix model: attribution share `a` and
/// the share `π` of touches falling in each channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MmmTargets {
    pub a: BTreeMap<Channel, f64>,
    pub pi: BTreeMap<Channel, f64>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    channel: Channel,
    a_mmm: f64,
    pi_mmm: f64,
}

impl MmmTargets {
    pub fn new(rows: impl IntoIterator<Item = (Channel, f64, f64)>) -> Result<Self> {
        let mut a = BTreeMap::new();
        let mut pi = BTreeMap::new();
        for (c, x, p) in rows {
            if a.insert(c.clone(), x).is_some() {
                return Err(Error::InvalidInput(format!("duplicate channel {c} in targets")));
            }
            pi.insert(c, p);
        }
        let t = Self { a, pi };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("a_mmm", &self.a), ("pi_mmm", &self.pi)] {
            if m.values().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidInput(format!("{name} must be non-negative")));
            }
            let s: f64 = m.values().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!("{name} sums to {s}, expected 1")));
            }
        }
        Ok(())
    }

    pub fn read_csv(file: &FsPath) -> Result<Self> {
        let mut r = csv::Reader::from_path(file)?;
        let mut rows = Vec::new();
        for row in r.deserialize() {
            let row: Row = row?;
            rows.push((row.channel, row.a_mmm, row.pi_mmm));
        }
        Self::new(rows)
    }

    pub fn write_csv(&self, file: &FsPath) -> Result<()> {
        let mut w = csv::Writer::from_path(file)?;
        for (c, a) in &self.a {
            w.serialize(Row {
                channel: c.clone(),
                a_mmm: *a,
                pi_mmm: self.pi[c],
            })?;
        }
        w.flush().map_err(|e| Error::io(file, e))
    }

    /// `(a, π)` aligned with `channels`; channels without a target get 0.
    pub fn aligned(&self, channels: &[Channel]) -> (Vec<f64>, Vec<f64>) {
        let missing: Vec<&Channel> = channels.iter().filter(|c| !self.a.contains_key(*c)).collect();
        if !missing.is_empty() {
            log::warn!("no media-mix target for channels {missing:?}; treated as zero");
        }
        let zero_pi: Vec<&Channel> = channels.iter().filter(|c| self.pi.get(*c) == Some(&0.0)).collect();
        if !zero_pi.is_empty() {
            log::warn!("zero touch share in the media-mix targets for {zero_pi:?}; excluded from path weights");
        }
        (
            channels.iter().map(|c| self.a.get(c).copied().unwrap_or(0.0)).collect(),
            channels.iter().map(|c| self.pi.get(c).copied().unwrap_or(0.0)).collect(),
        )
    }
}

/// Path-level target: `w_c = π_c / π_c^MMM`, `t̃ = w · a^MMM`, normalized.
/// Channels with `π_c^MMM = 0` get weight 0. `None` when nothing remains.
pub fn path_targets(pi_path: &[f64], pi_mmm: &[f64], a_mmm: &[f64]) -> Option<Vec<f64>> {
    let mut t: Vec<f64> = pi_path
        .iter()
        .zip(pi_mmm)
        .zip(a_mmm)
        .map(|((p, q), a)| if *q > 0.0 { p / q * a } else { 0.0 })
        .collect();
    let s: f64 = t.iter().sum();
    if s <= 0.0 {
        return None;
    }
    t.iter_mut().for_each(|v| *v /= s);
    Some(t)
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `Σ_c t_c ln(t_c / q_c)`, zero terms where `t_c = 0`.
pub fn kl(t: &[f64], q: &[f64]) -> f64 {
    t.iter()
        .zip(q)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, q)| t * (t.ln() - q.max(LN_FLOOR).ln()))
        .sum()
}

/// Calibration loss on plain per-path channel shares (rows of `shares`,
/// one per converting path) and the per-path touch mix.
pub fn calibration_loss(
    shares: &[Vec<f64>],
    path_mix: &[Vec<f64>],
    a_mmm: &[f64],
    pi_mmm: &[f64],
    mode: CalibrationMode,
) -> f64 {
    if shares.is_empty() {
        return 0.0;
    }
    match mode {
        CalibrationMode::None => 0.0,
        CalibrationMode::BatchMse | CalibrationMode::BatchKl => {
            let mut mean = vec![0.0; a_mmm.len()];
            for s in shares {
                for (m, v) in mean.iter_mut().zip(s) {
                    *m += v / shares.len() as f64;
                }
            }
            if mode == CalibrationMode::BatchMse {
                mse(&mean, a_mmm)
            } else {
                kl(a_mmm, &mean)
            }
        }
        CalibrationMode::PathMse | CalibrationMode::PathKl => {
            let mut total = 0.0;
            let mut n = 0.0;
            for (s, mix) in shares.iter().zip(path_mix) {
                let Some(t) = path_targets(mix, pi_mmm, a_mmm) else { continue };
                total += if mode == CalibrationMode::PathMse { mse(s, &t) } else { kl(&t, s) };
                n += 1.0;
            }
            if n > 0.0 {
                total / n
            } else {
                0.0
            }
        }
    }
}

/// Differentiable calibration loss on a batch.
///
/// `shares` is `[B, C]`; `selected` flags the rows that take part (converting
/// paths with at least one touch); `path_mix` holds each row's touch mix.
pub fn calibration_loss_tape(
    tape: &mut Tape,
    shares: Var,
    selected: &[bool],
    path_mix: &[Vec<f64>],
    a_mmm: &[f64],
    pi_mmm: &[f64],
    mode: CalibrationMode,
) -> Result<Option<Var>> {
    let c = a_mmm.len();
    let b = selected.len();
    match mode {
        CalibrationMode::None => Ok(None),
        CalibrationMode::BatchMse | CalibrationMode::BatchKl => {
            let n = selected.iter().filter(|s| **s).count();
            if n == 0 {
                return Ok(None);
            }
            let mut w = Tensor::zeros(&[b, c]);
            for (i, s) in selected.iter().enumerate() {
                if *s {
                    w.data_mut()[i * c..(i + 1) * c].fill(1.0 / n as f64);
                }
            }
            let wv = tape.constant(w)?;
            let weighted = tape.mul(shares, wv)?;
            let mean = tape.sum_axis(weighted, 0)?;
            let target = tape.constant(Tensor::vector(a_mmm.to_vec()))?;
            if mode == CalibrationMode::BatchMse {
                let d = tape.sub(mean, target)?;
                let sq = tape.mul(d, d)?;
                Ok(Some(tape.sum(sq)?))
            } else {
                let ln_a = tape.ln(mean, LN_FLOOR)?;
                let cross = tape.mul(target, ln_a)?;
                let cross = tape.sum(cross)?;
                let entropy: f64 = a_mmm.iter().filter(|a| **a > 0.0).map(|a| a * a.ln()).sum();
                let neg = tape.scale(cross, -1.0)?;
                let k = tape.constant(Tensor::scalar(entropy))?;
                Ok(Some(tape.add(neg, k)?))
            }
        }
        CalibrationMode::PathMse | CalibrationMode::PathKl => {
            let mut targets = Tensor::zeros(&[b, c]);
            let mut rows = Tensor::zeros(&[b, c]);
            let mut n = 0usize;
            let mut entropy = 0.0;
            for (i, s) in selected.iter().enumerate() {
                if !*s {
                    continue;
                }
                let Some(t) = path_targets(&path_mix[i], pi_mmm, a_mmm) else { continue };
                entropy += t.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
                targets.data_mut()[i * c..(i + 1) * c].copy_from_slice(&t);
                rows.data_mut()[i * c..(i + 1) * c].fill(1.0);
                n += 1;
            }
            if n == 0 {
                return Ok(None);
            }
            let inv = 1.0 / n as f64;
            let tv = tape.constant(targets)?;
            if mode == CalibrationMode::PathMse {
                let rv = tape.constant(rows)?;
                let kept = tape.mul(shares, rv)?;
                let d = tape.sub(kept, tv)?;
                let sq = tape.mul(d, d)?;
                let s = tape.sum(sq)?;
                Ok(Some(tape.scale(s, inv)?))
            } else {
                let ln_s = tape.ln(shares, LN_FLOOR)?;
                let cross = tape.mul(tv, ln_s)?;
                let cross = tape.sum(cross)?;
                let neg = tape.scale(cross, -inv)?;
                let k = tape.constant(Tensor::scalar(entropy * inv))?;
                Ok(Some(tape.add(neg, k)?))
            }
        }
    }
}
