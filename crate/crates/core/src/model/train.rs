use std::path::Path as FsPath;

use gradkernel::{Adam, Tape, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::calibration::calibration_loss_tape;
use super::{AttentionModel, CalibrationMode, Encoded, MmmTargets, ModelConfig};
use crate::error::{Error, Result};
use crate::journey::{Path, Vocab};
use crate::metrics::{log_loss, roc_auc};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training BCE over the epoch's batches.
    pub bce: f64,
    pub calibration: f64,
    pub total: f64,
    pub val_bce: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Training-set BCE before the first update.
    pub initial_bce: f64,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn write_csv(&self, file: &FsPath) -> Result<()> {
        let mut w = csv::Writer::from_path(file)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(file, e))
    }
}

fn labels(items: &[&Encoded]) -> Vec<f64> {
    items.iter().map(|e| e.label).collect()
}

/// Handles of one batch's loss terms.
pub struct BatchLoss {
    pub bce: Var,
    /// Unweighted calibration term, when calibration applies to the batch.
    pub calibration: Option<Var>,
    /// `bce + β·calibration` (just `bce` when β is zero).
    pub total: Var,
}

/// Records the training objective for `batch` on `tape`. `calib` carries the
/// mode and the MMM shares and touch mix aligned with the model's channels.
pub fn batch_loss(
    model: &AttentionModel,
    tape: &mut Tape,
    batch: &[&Encoded],
    calib: Option<(CalibrationMode, &[f64], &[f64])>,
    beta: f64,
) -> Result<BatchLoss> {
    let f = model.forward(tape, batch, None)?;
    let bce = tape.bce_with_logits(f.logits, &labels(batch))?;
    let mut out = BatchLoss {
        bce,
        calibration: None,
        total: bce,
    };
    if let Some((mode, a, pi)) = calib {
        let credits = model.credits_var(tape, f.attn, batch)?;
        let shares = model.channel_shares_var(tape, credits, batch)?;
        let selected: Vec<bool> = batch.iter().map(|e| e.label > 0.5 && e.len > 0).collect();
        let mix: Vec<Vec<f64>> = batch.iter().map(|e| e.channel_mix(model.channels.len())).collect();
        out.calibration = calibration_loss_tape(tape, shares, &selected, &mix, a, pi, mode)?;
        if let (Some(c), true) = (out.calibration, beta > 0.0) {
            let weighted = tape.scale(c, beta)?;
            out.total = tape.add(bce, weighted)?;
        }
    }
    Ok(out)
}

/// Mini-batch training with Adam on `bce + β·calibration`. Deterministic
/// given the model seed.
pub fn fit(model: &mut AttentionModel, train: &[Encoded], val: &[Encoded], targets: Option<&MmmTargets>) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let pos = train.iter().filter(|e| e.label > 0.5).count();
    if pos == 0 || pos == train.len() {
        return Err(Error::InvalidInput("training set needs both converting and non-converting paths".into()));
    }
    let cfg = model.config.clone();
    let calib = match (cfg.calibration, targets) {
        (CalibrationMode::None, _) | (_, None) => None,
        (mode, Some(t)) => {
            let (a, pi) = t.aligned(&model.channels);
            Some((mode, a, pi))
        }
    };

    let train_labels: Vec<bool> = train.iter().map(|e| e.label > 0.5).collect();
    let mut log = TrainLog {
        initial_bce: log_loss(&model.predict_encoded(train)?, &train_labels),
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut adam = Adam::new(cfg.lr);
    let mut rng = seeds::rng(cfg.seed, "model/shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut bce_sum, mut cal_sum, mut tot_sum) = (0.0, 0.0, 0.0);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Encoded> = idx.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let cal = calib.as_ref().map(|(m, a, pi)| (*m, a.as_slice(), pi.as_slice()));
            let l = batch_loss(model, &mut tape, &batch, cal, cfg.beta)?;
            let (bce, loss) = (l.bce, l.total);
            let cal_value = l.calibration.map_or(0.0, |c| tape.value(c).item());
            let bce_value = tape.value(bce).item();
            let total = tape.value(loss).item();
            if !total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    msg: format!("loss is {total}"),
                });
            }
            let grads = tape.backward(loss, &model.params)?;
            if grads.params().iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    msg: "non-finite gradient".into(),
                });
            }
            adam.step(&mut model.params, grads.params());
            let w = batch.len() as f64;
            bce_sum += bce_value * w;
            cal_sum += cal_value * w;
            tot_sum += total * w;
        }
        let n = train.len() as f64;
        let (val_bce, val_auc) = if val.is_empty() {
            (None, None)
        } else {
            let p = model.predict_encoded(val)?;
            let y: Vec<bool> = val.iter().map(|e| e.label > 0.5).collect();
            (Some(log_loss(&p, &y)), roc_auc(&p, &y))
        };
        let entry = EpochLog {
            epoch,
            bce: bce_sum / n,
            calibration: cal_sum / n,
            total: tot_sum / n,
            val_bce,
            val_auc,
        };
        log::info!(
            "epoch {epoch}: bce {:.5} calibration {:.5} val auc {}",
            entry.bce,
            entry.calibration,
            entry.val_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
        );
        log.epochs.push(entry);
    }
    Ok(log)
}

/// Seeded train/validation split of indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeds::rng(seed, "model/split"));
    let n_val = (n as f64 * val_fraction).round() as usize;
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    (train, val)
}

/// Builds the vocabulary from `paths`, holds out `val_fraction` of them and
/// trains a fresh model.
pub fn train(paths: &[Path], config: ModelConfig, targets: Option<&MmmTargets>) -> Result<(AttentionModel, TrainLog)> {
    let vocab = Vocab::from_paths(paths)?;
    let mut model = AttentionModel::new(config, vocab)?;
    let enc = model.encode_all(paths)?;
    let (tr, va) = split_indices(enc.len(), model.config.val_fraction, model.config.seed);
    let tr: Vec<Encoded> = tr.into_iter().map(|i| enc[i].clone()).collect();
    let va: Vec<Encoded> = va.into_iter().map(|i| enc[i].clone()).collect();
    let log = fit(&mut model, &tr, &va, targets)?;
    Ok((model, log))
}
