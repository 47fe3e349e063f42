//! Single-layer multi-head self-attention conversion model.
//!
//! Each touch enters as
//! `concat(campaign, E_T[kind]) + E_D[gap] + E_DOW[dow] + tAPE[pos]`. Per-head attention outputs are averaged into `E'_S`, which
//! is flattened and joined with the member and company vectors before one
//! ReLU layer and a sigmoid output.

pub mod calibration;
pub mod config;
pub mod encode;
mod train;

use std::path::Path as FsPath;

use gradkernel::{checkpoint, init, ParamStore, Tape, Tensor, Var, MASK_VALUE};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use calibration::{calibration_loss, path_targets, MmmTargets};
pub use config::{Ablation, CalibrationMode, ModelConfig};
pub use encode::{gap_bucket, tape_encoding, EncodeSpec, Encoded};
pub use train::{batch_loss, fit, split_indices, train, BatchLoss, EpochLog, TrainLog};

use crate::error::{Error, Result};
use crate::journey::{Channel, Path, TouchKey, Vocab};
use crate::seeds;

const INFER_CHUNK: usize = 256;

#[derive(Clone, Debug)]
pub struct AttentionModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    /// Channel order used for calibration and shares.
    pub channels: Vec<Channel>,
    pub params: ParamStore,
    tape_pe: Tensor,
}

/// Tape handles produced by one batched forward pass.
pub struct Forward {
    /// Assembled inputs `[B, N, d_model]`.
    pub inputs: Var,
    /// Head-averaged attention output `[B, N, d_model]`, padded rows zero.
    pub es: Var,
    /// Attention weights `[B·H, N, N]`.
    pub attn: Var,
    /// Output logits `[B]`.
    pub logits: Var,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    vocab: Vec<(Channel, crate::journey::Action)>,
    channels: Vec<Channel>,
}

impl AttentionModel {
    /// Fresh parameters: Xavier weights, small normal embedding tables,
    /// zero biases and a zero output layer.
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut channels: Vec<Channel> = vocab.kinds().map(|k| k.key.channel).collect();
        channels.dedup();
        let d = config.d_model();
        let h = config.n_heads;
        let mut rng = seeds::rng(config.seed, "model/init");
        let mut p = ParamStore::new();
        let std = config.embed_std;
        p.add("E_T", init::normal_table(vocab.len() + 1, config.d_kind, std, &mut rng))?;
        p.add("E_D", init::normal_table(config.day_buckets, d, std, &mut rng))?;
        p.add("E_DOW", init::normal_table(7, d, std, &mut rng))?;
        p.add("W_Q", init::xavier_uniform(d, d, &mut rng))?;
        p.add("W_K", init::xavier_uniform(d, d, &mut rng))?;
        p.add("W_V", init::xavier_uniform(d, h * d, &mut rng))?;
        let hidden = config.hidden_width();
        let head_in = Self::head_width(&config);
        p.add("W_1", init::xavier_uniform(head_in, hidden, &mut rng))?;
        p.add("b_1", Tensor::zeros(&[hidden]))?;
        p.add("w_2", Tensor::zeros(&[hidden, 1]))?;
        p.add("b_2", Tensor::zeros(&[1]))?;
        let tape_pe = tape_encoding(config.max_len, d, config.max_len as f64)?;
        Ok(Self {
            config,
            vocab,
            channels,
            params: p,
            tape_pe,
        })
    }

    fn head_width(c: &ModelConfig) -> usize {
        let entity = if c.ablation.uses_entity() { c.d_member + c.d_company } else { 0 };
        c.max_len * c.d_model() + entity + c.advertiser_dim
    }

    pub fn encode_spec(&self) -> EncodeSpec<'_> {
        EncodeSpec {
            vocab: &self.vocab,
            channels: &self.channels,
            max_len: self.config.max_len,
            day_buckets: self.config.day_buckets,
            d_campaign: self.config.d_campaign,
            d_member: self.config.d_member,
            d_company: self.config.d_company,
            advertiser_dim: self.config.advertiser_dim,
        }
    }

    pub fn encode(&self, path: &Path) -> Result<Encoded> {
        self.encode_spec().encode(path)
    }

    pub fn encode_all(&self, paths: &[Path]) -> Result<Vec<Encoded>> {
        paths.iter().map(|p| self.encode(p)).collect()
    }

    fn param(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::InvalidInput(format!("model has no parameter {name}")))?;
        Ok(tape.param(&self.params, id)?)
    }

    /// Batched forward pass. `perms`, when given, holds one permutation of
    /// the unmasked key positions per path, applied to the attention weights
    /// of every head and query before they weight the values.
    pub fn forward(&self, tape: &mut Tape, batch: &[&Encoded], perms: Option<&[Vec<usize>]>) -> Result<Forward> {
        let cfg = &self.config;
        let (b, n, d, h) = (batch.len(), cfg.max_len, cfg.d_model(), cfg.n_heads);
        let dk = d / h;
        let dc = cfg.d_campaign;
        let ab = cfg.ablation;
        if b == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }

        let mut camp = Tensor::zeros(&[b * n, dc]);
        let mut pe = Tensor::zeros(&[b * n, d]);
        let mut kinds = vec![None; b * n];
        let mut gaps = vec![None; b * n];
        let mut dows = vec![None; b * n];
        let mut key_mask = Tensor::zeros(&[b * h, n, n]);
        let mut query_rows = Tensor::zeros(&[b, n, d]);
        for (i, e) in batch.iter().enumerate() {
            if e.len > n {
                return Err(Error::PathInvariant {
                    path_id: e.path_id,
                    msg: format!("{} touches exceed the model length {n}", e.len),
                });
            }
            for j in 0..e.len {
                let r = i * n + j;
                if e.kinds[j] == 0 || e.kinds[j] > self.vocab.len() {
                    return Err(Error::InvalidInput(format!("vocab index {} out of range", e.kinds[j])));
                }
                kinds[r] = Some(e.kinds[j]);
                if ab.uses_date() {
                    gaps[r] = Some(e.gaps[j]);
                    dows[r] = Some(e.dows[j]);
                }
                if ab.uses_campaign() {
                    camp.data_mut()[r * dc..(r + 1) * dc].copy_from_slice(&e.campaign[j * dc..(j + 1) * dc]);
                }
                pe.data_mut()[r * d..(r + 1) * d].copy_from_slice(self.tape_pe.row(j));
                query_rows.data_mut()[r * d..(r + 1) * d].fill(1.0);
            }
            for hh in 0..h {
                let base = (i * h + hh) * n * n;
                for q in 0..n {
                    key_mask.data_mut()[base + q * n + e.len..base + (q + 1) * n].fill(MASK_VALUE);
                }
            }
        }

        let e_t = self.param(tape, "E_T")?;
        let kind_rows = tape.gather(e_t, &kinds)?;
        let camp = tape.constant(camp)?;
        let mut tok = tape.concat(&[camp, kind_rows])?;
        if ab.uses_date() {
            let e_d = self.param(tape, "E_D")?;
            let e_dow = self.param(tape, "E_DOW")?;
            let gd = tape.gather(e_d, &gaps)?;
            let gw = tape.gather(e_dow, &dows)?;
            tok = tape.add(tok, gd)?;
            tok = tape.add(tok, gw)?;
        }
        let pe = tape.constant(pe)?;
        tok = tape.add(tok, pe)?;
        let x = tape.reshape(tok, &[b, n, d])?;

        let heads = |tape: &mut Tape, w: Var, width: usize| -> Result<Var> {
            let y = tape.matmul(x, w)?;
            let y = tape.reshape(y, &[b, n, h, width])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            Ok(tape.reshape(y, &[b * h, n, width])?)
        };
        let w_q = self.param(tape, "W_Q")?;
        let w_k = self.param(tape, "W_K")?;
        let w_v = self.param(tape, "W_V")?;
        let q = heads(tape, w_q, dk)?;
        let k = heads(tape, w_k, dk)?;
        let v = heads(tape, w_v, d)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let attn = tape.softmax(scores, Some(&key_mask))?;

        let weights = match perms {
            None => attn,
            Some(perms) => {
                let mut pm = Tensor::zeros(&[b * h, n, n]);
                for (i, (e, perm)) in batch.iter().zip(perms).enumerate() {
                    if perm.len() != e.len {
                        return Err(Error::InvalidInput("permutation length differs from the path".into()));
                    }
                    for hh in 0..h {
                        let base = (i * h + hh) * n * n;
                        // column j of the result takes column perm[j] of the weights
                        for (j, &src) in perm.iter().enumerate() {
                            pm.data_mut()[base + src * n + j] = 1.0;
                        }
                        for j in e.len..n {
                            pm.data_mut()[base + j * n + j] = 1.0;
                        }
                    }
                }
                let pm = tape.constant(pm)?;
                tape.bmm(attn, pm, false)?
            }
        };

        let o = tape.bmm(weights, v, false)?;
        let o = tape.reshape(o, &[b, h, n, d])?;
        let o = tape.sum_axis(o, 1)?;
        let o = tape.scale(o, 1.0 / h as f64)?;
        let rows = tape.constant(query_rows)?;
        let es = tape.mul(o, rows)?;

        let flat = tape.reshape(es, &[b, n * d])?;
        let mut parts = vec![flat];
        if ab.uses_entity() {
            let mut ent = Tensor::zeros(&[b, cfg.d_member + cfg.d_company]);
            let w = cfg.d_member + cfg.d_company;
            for (i, e) in batch.iter().enumerate() {
                ent.data_mut()[i * w..i * w + cfg.d_member].copy_from_slice(&e.member);
                ent.data_mut()[i * w + cfg.d_member..(i + 1) * w].copy_from_slice(&e.company);
            }
            parts.push(tape.constant(ent)?);
        }
        if cfg.advertiser_dim > 0 {
            let a = cfg.advertiser_dim;
            let mut adv = Tensor::zeros(&[b, a]);
            for (i, e) in batch.iter().enumerate() {
                adv.data_mut()[i * a..(i + 1) * a].copy_from_slice(&e.advertiser);
            }
            parts.push(tape.constant(adv)?);
        }
        let head_in = if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? };
        let w1 = self.param(tape, "W_1")?;
        let b1 = self.param(tape, "b_1")?;
        let w2 = self.param(tape, "w_2")?;
        let b2 = self.param(tape, "b_2")?;
        let hdn = tape.matmul(head_in, w1)?;
        let hdn = tape.add_bias(hdn, b1)?;
        let hdn = tape.relu(hdn)?;
        let out = tape.matmul(hdn, w2)?;
        let out = tape.add_bias(out, b2)?;
        let logits = tape.reshape(out, &[b])?;
        Ok(Forward {
            inputs: x,
            es,
            attn,
            logits,
        })
    }

    /// Per-path credit `[B, N]` from attention: key-column mass over heads
    /// and unmasked queries, normalized per path.
    pub fn credits_var(&self, tape: &mut Tape, attn: Var, batch: &[&Encoded]) -> Result<Var> {
        let (b, n, h) = (batch.len(), self.config.max_len, self.config.n_heads);
        let mut qm = Tensor::zeros(&[b * h, n, n]);
        for (i, e) in batch.iter().enumerate() {
            for hh in 0..h {
                let base = (i * h + hh) * n * n;
                qm.data_mut()[base..base + e.len * n].fill(1.0);
            }
        }
        let qm = tape.constant(qm)?;
        let kept = tape.mul(attn, qm)?;
        let kept = tape.reshape(kept, &[b, h * n, n])?;
        let mass = tape.sum_axis(kept, 1)?;
        Ok(tape.normalize_last(mass)?)
    }

    /// Channel shares `[B, C]` from credits `[B, N]`.
    pub fn channel_shares_var(&self, tape: &mut Tape, credits: Var, batch: &[&Encoded]) -> Result<Var> {
        let (b, n, c) = (batch.len(), self.config.max_len, self.channels.len());
        let mut onehot = Tensor::zeros(&[b, n, c]);
        for (i, e) in batch.iter().enumerate() {
            for (j, &ch) in e.channels.iter().enumerate() {
                if ch < c {
                    onehot.data_mut()[(i * n + j) * c + ch] = 1.0;
                }
            }
        }
        let oh = tape.constant(onehot)?;
        let cr = tape.reshape(credits, &[b, 1, n])?;
        let s = tape.bmm(cr, oh, false)?;
        Ok(tape.reshape(s, &[b, c])?)
    }

    fn run_chunks<T: Send>(
        &self,
        items: &[Encoded],
        f: impl Fn(&Self, &[&Encoded], usize) -> Result<Vec<T>> + Sync,
    ) -> Result<Vec<T>> {
        let chunks: Vec<Vec<T>> = items
            .par_chunks(INFER_CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let refs: Vec<&Encoded> = chunk.iter().collect();
                f(self, &refs, ci * INFER_CHUNK)
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    pub fn predict_encoded(&self, items: &[Encoded]) -> Result<Vec<f64>> {
        self.run_chunks(items, |m, batch, _| {
            let mut tape = Tape::new();
            let f = m.forward(&mut tape, batch, None)?;
            Ok(tape.value(f.logits).data().iter().map(|z| gradkernel::sigmoid(*z)).collect())
        })
    }

    /// Conversion probabilities.
    pub fn predict(&self, paths: &[Path]) -> Result<Vec<f64>> {
        self.predict_encoded(&self.encode_all(paths)?)
    }

    /// Probabilities with attention weights shuffled among each path's
    /// unmasked keys; one permutation per path from `seed`.
    pub fn predict_permuted(&self, items: &[Encoded], seed: u64) -> Result<Vec<f64>> {
        self.run_chunks(items, |m, batch, offset| {
            let perms: Vec<Vec<usize>> = batch
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let mut rng = seeds::rng_indexed(seed, "permute", (offset + i) as u64);
                    let mut p: Vec<usize> = (0..e.len).collect();
                    p.shuffle(&mut rng);
                    p
                })
                .collect();
            let mut tape = Tape::new();
            let f = m.forward(&mut tape, batch, Some(&perms))?;
            Ok(tape.value(f.logits).data().iter().map(|z| gradkernel::sigmoid(*z)).collect())
        })
    }

    /// Attention weights `[H, N, N]` for one path.
    pub fn attention(&self, e: &Encoded) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, &[e], None)?;
        let n = self.config.max_len;
        Ok(tape.value(f.attn).reshaped(&[self.config.n_heads, n, n])?)
    }

    /// Assembled inputs `[N, d_model]` and the additive key mask `[N]`.
    pub fn assemble_inputs(&self, e: &Encoded) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, &[e], None)?;
        let n = self.config.max_len;
        let x = tape.value(f.inputs).reshaped(&[n, self.config.d_model()])?;
        let mask = (0..n).map(|j| if j < e.len { 0.0 } else { MASK_VALUE }).collect();
        Ok((x, mask))
    }

    /// `E'_S` `[N, d_model]` and attention `[H, N, N]` for one path.
    pub fn attention_forward(&self, e: &Encoded) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, &[e], None)?;
        let n = self.config.max_len;
        Ok((
            tape.value(f.es).reshaped(&[n, self.config.d_model()])?,
            tape.value(f.attn).reshaped(&[self.config.n_heads, n, n])?,
        ))
    }

    /// Attention credits for many paths, each truncated to its length.
    pub fn attention_credits(&self, items: &[Encoded]) -> Result<Vec<Vec<f64>>> {
        self.run_chunks(items, |m, batch, _| {
            let mut tape = Tape::new();
            let f = m.forward(&mut tape, batch, None)?;
            let n = m.config.max_len;
            let h = m.config.n_heads;
            let attn = tape.value(f.attn);
            Ok(batch
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let t = Tensor::new(vec![h, n, n], attn.data()[i * h * n * n..(i + 1) * h * n * n].to_vec())
                        .expect("attention slice");
                    crate::crediting::attention_credits(&t, e.len)
                })
                .collect())
        })
    }

    pub fn save(&self, stem: &FsPath) -> Result<()> {
        let meta = Metadata {
            config: self.config.clone(),
            vocab: self.vocab.kinds().map(|k| (k.key.channel, k.key.action)).collect(),
            channels: self.channels.clone(),
        };
        checkpoint::save(&self.params, stem, serde_json::to_value(meta)?)?;
        Ok(())
    }

    pub fn load(stem: &FsPath) -> Result<Self> {
        let (params, meta) = checkpoint::load(stem)?;
        let meta: Metadata = serde_json::from_value(meta)?;
        let keys: Vec<TouchKey> = meta.vocab.into_iter().map(|(c, a)| TouchKey::new(c, a)).collect();
        let mut m = Self::new(meta.config, Vocab::build(&keys)?)?;
        for (id, name, t) in m.params.clone().iter() {
            let src = params
                .id(name)
                .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks parameter {name}")))?;
            if params.get(src).shape() != t.shape() {
                return Err(Error::InvalidInput(format!("checkpoint parameter {name} has the wrong shape")));
            }
            *m.params.get_mut(id) = params.get(src).clone();
        }
        m.channels = meta.channels;
        Ok(m)
    }
}

