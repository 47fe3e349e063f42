//! Per-touch credit from a trained model and simple baselines, plus rollups.

use std::collections::BTreeMap;
use std::path::Path as FsPath;

use gradkernel::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::journey::{AttributionResult, Method, Path, SECONDS_PER_DAY};
use crate::model::{AttentionModel, Encoded};

fn normalize_or_uniform(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 && s.is_finite() {
        v.iter_mut().for_each(|x| *x /= s);
    } else if !v.is_empty() {
        let u = 1.0 / v.len() as f64;
        v.iter_mut().for_each(|x| *x = u);
    }
    v
}

/// Key-column attention mass summed over heads and the first `len` queries,
/// normalized over the first `len` keys. Positions past `len` get nothing.
pub fn attention_credits(attn: &Tensor, len: usize) -> Vec<f64> {
    let s = attn.shape();
    assert_eq!(s.len(), 3, "attention must be [H, N, N]");
    let (h, n) = (s[0], s[1]);
    let len = len.min(n);
    let mut mass = vec![0.0; len];
    let d = attn.data();
    for hh in 0..h {
        for q in 0..len {
            let row = &d[(hh * n + q) * s[2]..];
            for (j, m) in mass.iter_mut().enumerate() {
                *m += row[j];
            }
        }
    }
    normalize_or_uniform(mass)
}

/// Credits from the prefix probabilities `p_0..p_L`: positive increments,
/// normalized; uniform when no prefix raises the probability.
pub fn incremental_from_probs(p: &[f64]) -> Vec<f64> {
    if p.len() < 2 {
        return Vec::new();
    }
    let raw = p.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
    normalize_or_uniform(raw)
}

pub fn last_touch_credits(len: usize) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::InvalidInput("last touch needs a non-empty path".into()));
    }
    let mut v = vec![0.0; len];
    v[len - 1] = 1.0;
    Ok(v)
}

/// Prefix-delta credits from the model for each path.
pub fn incremental_credits(model: &AttentionModel, items: &[Encoded]) -> Result<Vec<Vec<f64>>> {
    let dc = model.config.d_campaign;
    let mut prefixes = Vec::new();
    let mut spans = Vec::with_capacity(items.len());
    for e in items {
        let start = prefixes.len();
        for k in 0..=e.len {
            prefixes.push(e.prefix(k, dc));
        }
        spans.push(start..prefixes.len());
    }
    let p = model.predict_encoded(&prefixes)?;
    Ok(spans.into_iter().map(|r| incremental_from_probs(&p[r])).collect())
}

/// Attributes every non-empty path with `method`. Empty paths get an empty
/// credit vector.
pub fn attribute(model: Option<&AttentionModel>, paths: &[Path], method: Method) -> Result<Vec<AttributionResult>> {
    let credits: Vec<Vec<f64>> = match method {
        Method::LastTouch => paths
            .iter()
            .map(|p| if p.is_empty() { Ok(Vec::new()) } else { last_touch_credits(p.len()) })
            .collect::<Result<_>>()?,
        Method::Attention | Method::Incremental => {
            let model = model.ok_or_else(|| Error::InvalidInput("model-based crediting needs a trained model".into()))?;
            let enc = model.encode_all(paths)?;
            if method == Method::Attention {
                model.attention_credits(&enc)?
            } else {
                incremental_credits(model, &enc)?
            }
        }
        Method::GroundTruth => {
            return Err(Error::InvalidInput("ground-truth credits come from the generator".into()));
        }
    };
    Ok(paths
        .iter()
        .zip(credits)
        .map(|(p, credits)| AttributionResult {
            path_id: p.path_id,
            method,
            credits,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Channel,
    Campaign,
    Kind,
    DayGap,
}

impl Level {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "channel" => Self::Channel,
            "campaign" => Self::Campaign,
            "kind" => Self::Kind,
            "day_gap" => Self::DayGap,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollupRow {
    pub key: String,
    pub share: f64,
}

/// Credit shares by key over a path set.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollup {
    pub level: Level,
    pub rows: Vec<RollupRow>,
}

impl Rollup {
    pub fn share(&self, key: &str) -> f64 {
        self.rows.iter().find(|r| r.key == key).map_or(0.0, |r| r.share)
    }

    pub fn write_csv(&self, file: &FsPath) -> Result<()> {
        let mut w = csv::Writer::from_path(file)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(file, e))
    }
}

fn aligned<'a>(results: &'a [AttributionResult], paths: &'a [Path]) -> Result<impl Iterator<Item = (&'a AttributionResult, &'a Path)>> {
    if results.len() != paths.len() {
        return Err(Error::InvalidInput(format!("{} results for {} paths", results.len(), paths.len())));
    }
    for (r, p) in results.iter().zip(paths) {
        if r.path_id != p.path_id || r.credits.len() != p.len() {
            return Err(Error::PathInvariant {
                path_id: p.path_id,
                msg: "attribution result does not line up with its path".into(),
            });
        }
    }
    Ok(results.iter().zip(paths))
}

fn gap_days(ts: i64, anchor: i64) -> i64 {
    (anchor - ts).div_euclid(SECONDS_PER_DAY).max(0)
}

pub fn rollup(results: &[AttributionResult], paths: &[Path], level: Level) -> Result<Rollup> {
    // (numeric sort key, label) so day gaps order numerically
    let mut acc: BTreeMap<(i64, String), f64> = BTreeMap::new();
    for (r, p) in aligned(results, paths)? {
        for (t, c) in p.touchpoints.iter().zip(&r.credits) {
            let k = match level {
                Level::Channel => (0, t.channel.to_string()),
                Level::Campaign => (t.campaign_id as i64, t.campaign_id.to_string()),
                Level::Kind => (0, t.key().to_string()),
                Level::DayGap => {
                    let g = gap_days(t.ts, p.anchor_time);
                    (g, g.to_string())
                }
            };
            *acc.entry(k).or_default() += c;
        }
    }
    let total: f64 = acc.values().sum();
    let rows = acc
        .into_iter()
        .map(|((_, key), v)| RollupRow {
            key,
            share: if total > 0.0 { v / total } else { 0.0 },
        })
        .collect();
    Ok(Rollup { level, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub days_before: i64,
    pub touches: usize,
    pub mean_credit: f64,
}

/// Mean per-touch credit against whole days before the anchor.
pub fn day_gap_decay(results: &[AttributionResult], paths: &[Path]) -> Result<Vec<DecayRow>> {
    let mut acc: BTreeMap<i64, (usize, f64)> = BTreeMap::new();
    for (r, p) in aligned(results, paths)? {
        for (t, c) in p.touchpoints.iter().zip(&r.credits) {
            let e = acc.entry(gap_days(t.ts, p.anchor_time)).or_default();
            e.0 += 1;
            e.1 += c;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(days_before, (touches, s))| DecayRow {
            days_before,
            touches,
            mean_credit: s / touches as f64,
        })
        .collect())
}

/// Channel share vector per path, aligned with `channels`.
pub fn path_channel_shares(results: &[AttributionResult], paths: &[Path], channels: &[crate::journey::Channel]) -> Result<Vec<Vec<f64>>> {
    Ok(aligned(results, paths)?
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(r, p)| {
            let mut s = vec![0.0; channels.len()];
            for (t, c) in p.touchpoints.iter().zip(&r.credits) {
                if let Some(i) = channels.iter().position(|x| *x == t.channel) {
                    s[i] += c;
                }
            }
            s
        })
        .collect())
}

/// Channel mix of attention credit pooled over converting items, aligned
/// with the model's channel list.
pub fn pooled_channel_mix(model: &AttentionModel, items: &[Encoded]) -> Result<Vec<f64>> {
    let conv: Vec<Encoded> = items.iter().filter(|e| e.label > 0.5).cloned().collect();
    let credits = model.attention_credits(&conv)?;
    let mut mix = vec![0.0; model.channels.len()];
    for (e, c) in conv.iter().zip(&credits) {
        for (&ch, v) in e.channels.iter().zip(c) {
            if ch < mix.len() {
                mix[ch] += v;
            }
        }
    }
    let s: f64 = mix.iter().sum();
    if s > 0.0 {
        mix.iter_mut().for_each(|m| *m /= s);
    }
    Ok(mix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_mass_normalization() {
        // one head, 3 queries; column sums 2, 1, 1 (after dropping nothing)
        let attn = Tensor::new(vec![1, 3, 3], vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.5, 0.5, 1.0]).unwrap();
        let c = attention_credits(&attn, 3);
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[1] - 0.25).abs() < 1e-15 && (c[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn uniform_and_singleton() {
        let attn = Tensor::full(&[2, 4, 4], 0.25);
        assert_eq!(attention_credits(&attn, 4), vec![0.25; 4]);
        let attn = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(attention_credits(&attn, 1), vec![1.0]);
        assert!(attention_credits(&attn, 0).is_empty());
    }

    #[test]
    fn prefix_deltas() {
        assert_eq!(incremental_from_probs(&[0.2, 0.6]), vec![1.0]);
        assert_eq!(incremental_from_probs(&[0.1, 0.4, 0.4]), vec![1.0, 0.0]);
        assert_eq!(incremental_from_probs(&[0.5, 0.4, 0.3]), vec![0.5, 0.5]);
        let c = incremental_from_probs(&[0.1, 0.5, 0.7, 0.8, 0.85]);
        assert!(c[0] >= c[3]);
    }

    #[test]
    fn last_touch() {
        assert_eq!(last_touch_credits(3).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(last_touch_credits(1).unwrap(), vec![1.0]);
        assert!(last_touch_credits(0).is_err());
    }
}
