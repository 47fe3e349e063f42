use gradkernel::Tensor;

use crate::error::{Error, Result};
use crate::journey::{day_of_week, Channel, Path, Vocab, SECONDS_PER_DAY};

/// Sinusoidal position table with frequencies rescaled by `d_model / L`:
/// `PE(p, 2k) = sin(p·ω'_k)`, `PE(p, 2k+1) = cos(p·ω'_k)` with
/// `ω_k = 10000^(−2k/d_model)` and `ω'_k = ω_k · d_model / L`.
pub fn tape_encoding(n: usize, d_model: usize, l: f64) -> Result<Tensor> {
    if !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding needs an even width, got {d_model}")));
    }
    if !(l > 0.0) {
        return Err(Error::Config("positional encoding length must be positive".into()));
    }
    let mut t = Tensor::zeros(&[n, d_model]);
    let data = t.data_mut();
    for pos in 0..n {
        for k in 0..d_model / 2 {
            let w = 10000f64.powf(-2.0 * k as f64 / d_model as f64) * d_model as f64 / l;
            let a = pos as f64 * w;
            data[pos * d_model + 2 * k] = a.sin();
            data[pos * d_model + 2 * k + 1] = a.cos();
        }
    }
    Ok(t)
}

/// Day-gap bucket: whole days before the anchor, clipped to `[0, buckets−1]`.
pub fn gap_bucket(ts: i64, anchor: i64, buckets: usize) -> usize {
    let gap = (anchor - ts).div_euclid(SECONDS_PER_DAY).max(0) as usize;
    gap.min(buckets - 1)
}

/// A path reduced to the indices and vectors the network consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub path_id: u64,
    pub len: usize,
    /// Vocabulary indices in `1..=K`.
    pub kinds: Vec<usize>,
    pub gaps: Vec<usize>,
    pub dows: Vec<usize>,
    /// `len × d_campaign`, row-major.
    pub campaign: Vec<f64>,
    /// Index into the model's channel list per touch.
    pub channels: Vec<usize>,
    pub member: Vec<f64>,
    pub company: Vec<f64>,
    pub advertiser: Vec<f64>,
    pub label: f64,
}

pub struct EncodeSpec<'a> {
    pub vocab: &'a Vocab,
    pub channels: &'a [Channel],
    pub max_len: usize,
    pub day_buckets: usize,
    pub d_campaign: usize,
    pub d_member: usize,
    pub d_company: usize,
    pub advertiser_dim: usize,
}

impl EncodeSpec<'_> {
    pub fn encode(&self, path: &Path) -> Result<Encoded> {
        let fail = |msg: String| Error::PathInvariant {
            path_id: path.path_id,
            msg,
        };
        if path.len() > self.max_len {
            return Err(fail(format!("{} touchpoints exceed the model length {}", path.len(), self.max_len)));
        }
        if path.member_emb.len() != self.d_member || path.company_emb.len() != self.d_company {
            return Err(fail("entity embedding width does not match the model".into()));
        }
        let mut e = Encoded {
            path_id: path.path_id,
            len: path.len(),
            kinds: Vec::with_capacity(path.len()),
            gaps: Vec::with_capacity(path.len()),
            dows: Vec::with_capacity(path.len()),
            campaign: Vec::with_capacity(path.len() * self.d_campaign),
            channels: Vec::with_capacity(path.len()),
            member: path.member_emb.clone(),
            company: path.company_emb.clone(),
            advertiser: vec![0.0; self.advertiser_dim],
            label: if path.converted { 1.0 } else { 0.0 },
        };
        for t in &path.touchpoints {
            let k = self
                .vocab
                .index(&t.key())
                .ok_or_else(|| fail(format!("touch kind {} is not in the vocabulary", t.key())))?;
            if t.campaign_emb.len() != self.d_campaign {
                return Err(fail(format!(
                    "campaign embedding of width {} where the model expects {}",
                    t.campaign_emb.len(),
                    self.d_campaign
                )));
            }
            e.kinds.push(k);
            e.gaps.push(gap_bucket(t.ts, path.anchor_time, self.day_buckets));
            e.dows.push(day_of_week(t.ts));
            e.campaign.extend_from_slice(&t.campaign_emb);
            e.channels.push(self.channels.iter().position(|c| *c == t.channel).unwrap_or(usize::MAX));
        }
        Ok(e)
    }
}

impl Encoded {
    /// The first `k` touches, same anchor and entities.
    pub fn prefix(&self, k: usize, d_campaign: usize) -> Encoded {
        let k = k.min(self.len);
        Encoded {
            path_id: self.path_id,
            len: k,
            kinds: self.kinds[..k].to_vec(),
            gaps: self.gaps[..k].to_vec(),
            dows: self.dows[..k].to_vec(),
            campaign: self.campaign[..k * d_campaign].to_vec(),
            channels: self.channels[..k].to_vec(),
            member: self.member.clone(),
            company: self.company.clone(),
            advertiser: self.advertiser.clone(),
            label: self.label,
        }
    }

    /// Fraction of touches per channel.
    pub fn channel_mix(&self, n_channels: usize) -> Vec<f64> {
        let mut mix = vec![0.0; n_channels];
        let mut n = 0.0;
        for &c in &self.channels {
            if c < n_channels {
                mix[c] += 1.0;
                n += 1.0;
            }
        }
        if n > 0.0 {
            mix.iter_mut().for_each(|m| *m /= n);
        }
        mix
    }
}
