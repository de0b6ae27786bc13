//! Loss assembly, Adam with decoupled weight decay, the LR schedule, the
//! epoch loop, and checkpoint I/O.

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use crate::data::augment::augment_random;
use crate::data::{normalize_landmarks, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::model::{ForwardOutputs, Mode, Model, ModelParams};
use crate::tensor::{Tape, Tensor, TensorId};
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Weight w of the KL term.
    pub kl_weight: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    pub ds_weight: f64,
}

impl TrainConfig {
    /// Defaults; skip-connected models decay the LR every 100 epochs,
    /// the rest every 50.
    pub fn desk(igsc: bool) -> Self {
        TrainConfig {
            epochs: 500,
            lr: 1e-4,
            batch_size: 4,
            weight_decay: 1e-5,
            kl_weight: 1e-5,
            lr_decay_factor: 0.9,
            lr_decay_every: if igsc { 100 } else { 50 },
            seed: 0,
            ds_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::invalid("train config: zero epochs/batch/decay interval"));
        }
        if self.lr <= 0.0 || self.weight_decay < 0.0 || self.kl_weight < 0.0 || self.ds_weight < 0.0
        {
            return Err(Error::invalid("train config: negative rate or weight"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::invalid(format!(
                "train config: decay factor {} outside (0, 1]",
                self.lr_decay_factor
            )));
        }
        Ok(())
    }
}

pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Tape nodes of the assembled loss; values are read off after the forward.
pub struct LossIds {
    pub total: TensorId,
    pub mse: TensorId,
    pub ds: Option<TensorId>,
    pub kl: Option<TensorId>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub ds: f64,
    pub kl: f64,
}

impl LossIds {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |id: TensorId| tape.value(id).data[0];
        LossBreakdown {
            total: v(self.total),
            mse: v(self.mse),
            ds: self.ds.map(&v).unwrap_or(0.0),
            kl: self.kl.map(&v).unwrap_or(0.0),
        }
    }
}

/// total = mse_px(final) + ds_weight * [mse_px(coarse head, pooled target)
/// + mse_px(fine head, target)] + w * KL. Coordinate MSEs are in pixel
/// units: targets are normalized, so each term is scaled by image_size^2.
pub fn loss_total(
    tape: &mut Tape,
    model: &Model,
    outputs: &ForwardOutputs,
    target_norm: &[f64],
    cfg: &TrainConfig,
) -> Result<LossIds> {
    let m = model.topology().total_nodes();
    if target_norm.len() != 2 * m {
        return Err(Error::invalid(format!(
            "loss: target has {} coordinates, topology wants {}",
            target_norm.len(),
            2 * m
        )));
    }
    let px2 = (model.config.image_size * model.config.image_size) as f64;
    let t_fine = tape.constant(Tensor::new(vec![m, 2], target_norm.to_vec())?);

    let mse_norm = tape.mse(outputs.pos_final, t_fine)?;
    let mse = tape.scale(mse_norm, px2);
    let mut total = mse;

    let ds = match (model.config.ds_enabled, outputs.pos_ds_coarse, outputs.pos_ds_fine) {
        (true, Some(coarse), Some(fine)) => {
            let pooled = model.hierarchy.plans[0].pool_features(target_norm, 2)?;
            let mc = pooled.len() / 2;
            let t_coarse = tape.constant(Tensor::new(vec![mc, 2], pooled)?);
            let c_norm = tape.mse(coarse, t_coarse)?;
            let f_norm = tape.mse(fine, t_fine)?;
            let both = tape.add(c_norm, f_norm)?;
            let ds = tape.scale(both, px2);
            let weighted = tape.scale(ds, cfg.ds_weight);
            total = tape.add(total, weighted)?;
            Some(ds)
        }
        _ => None,
    };

    let kl = match (outputs.mu, outputs.logvar) {
        (Some(mu), Some(logvar)) => {
            let kl = tape.kl_unit_gaussian(mu, logvar)?;
            let weighted = tape.scale(kl, cfg.kl_weight);
            total = tape.add(total, weighted)?;
            Some(kl)
        }
        _ => None,
    };

    Ok(LossIds { total, mse, ds, kl })
}

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter
/// name and created lazily on the first step.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "gradient for parameter {name:?} is not finite"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, param) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if !param.trainable {
                continue;
            }
            if g.len() != param.value.numel() {
                return Err(Error::invalid(format!(
                    "gradient for {name:?} has {} values, parameter has {}",
                    g.len(),
                    param.value.numel()
                )));
            }
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((p, gi), (mi, vi)) in param
                .value
                .data
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS) + lr * weight_decay * *p;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_mse: f64,
    pub loss_ds: f64,
    pub loss_kl: f64,
    pub val_loss: f64,
}

pub const LOG_CSV_HEADER: &str = "epoch,lr,loss_total,loss_mse,loss_ds,loss_kl,val_loss";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.loss_total, self.loss_mse, self.loss_ds, self.loss_kl,
            self.val_loss
        )
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
    /// True when a non-finite loss stopped training early; `best` then holds
    /// the last good state.
    pub diverged: bool,
}

/// Per-sample work item: forward on an augmented copy, loss, backward.
/// Returns the loss values and gradients keyed by parameter name.
fn train_sample_pass(
    model: &Model,
    sample: &Sample,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, BTreeMap<String, Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = model.config.image_size;
    let augmented = augment_random(sample, &mut rng, size);
    let target = normalize_landmarks(&augmented.landmarks, size);

    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &augmented.image, Mode::Train, &mut rng)?;
    let loss = loss_total(&mut tape, model, &pass.outputs, &target, cfg)?;
    let breakdown = loss.breakdown(&tape);
    if !breakdown.total.is_finite() {
        // Divergence is reported by the caller; no gradients to return.
        return Ok((breakdown, BTreeMap::new()));
    }
    let grads = tape.backward(loss.total)?;
    let mut by_name = BTreeMap::new();
    for (name, id) in pass.bound.iter() {
        if let Some(g) = grads.get(id) {
            by_name.insert(name.to_string(), g.to_vec());
        }
    }
    Ok((breakdown, by_name))
}

fn val_loss_of(model: &Model, samples: &[&Sample], cfg: &TrainConfig) -> Result<f64> {
    let size = model.config.image_size;
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|sample| -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in infer mode
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &sample.image, Mode::Infer, &mut rng)?;
            let target = normalize_landmarks(&sample.landmarks, size);
            let loss = loss_total(&mut tape, model, &pass.outputs, &target, cfg)?;
            Ok(loss.breakdown(&tape).total)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// RMSE in pixels of infer-mode predictions over the given samples.
pub fn landmark_rmse_px(model: &Model, samples: &[&Sample]) -> Result<f64> {
    let size = model.config.image_size;
    let sums: Vec<(f64, usize)> = samples
        .par_iter()
        .map(|sample| -> Result<(f64, usize)> {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &sample.image, Mode::Infer, &mut rng)?;
            let pred = tape.value(pass.outputs.pos_final).data.clone();
            let target = normalize_landmarks(&sample.landmarks, size);
            let sq: f64 = pred
                .iter()
                .zip(&target)
                .map(|(p, t)| {
                    let d = (p - t) * size as f64;
                    d * d
                })
                .sum();
            Ok((sq, pred.len()))
        })
        .collect::<Result<_>>()?;
    let (total, count) = sums
        .iter()
        .fold((0.0, 0), |(s, c), (sq, n)| (s + sq, c + n));
    Ok((total / count as f64).sqrt())
}

/// Mix an epoch/sample pair into the master seed for independent RNG
/// streams that don't depend on scheduling order.
fn stream_seed(master: u64, epoch: usize, sample: usize) -> u64 {
    let mut h = master
        ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15)
        ^ (sample as u64).wrapping_mul(0xD1B54A32D192ED03);
    h ^= h >> 32;
    h = h.wrapping_mul(0xFF51AFD7ED558CCD);
    h ^= h >> 32;
    h
}

/// The epoch loop: augmented batch steps, infer-mode validation, best-by-
/// validation checkpointing. `on_epoch` fires after every epoch with the
/// fresh log row.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_samples = dataset.split(Split::Train);
    let val_samples = dataset.split(Split::Val);
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::invalid(format!(
            "training needs nonempty train and val splits (got {} / {})",
            train_samples.len(),
            val_samples.len()
        )));
    }

    let mut adam = Adam::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut diverged = false;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        // Seeded Fisher-Yates reshuffle each epoch.
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch, usize::MAX));
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(LossBreakdown, BTreeMap<String, Vec<f64>>)> = batch
                .par_iter()
                .map(|&idx| {
                    train_sample_pass(
                        model,
                        train_samples[idx],
                        stream_seed(cfg.seed, epoch, idx),
                        cfg,
                    )
                })
                .collect::<Result<_>>()?;

            if results.iter().any(|(b, _)| !b.total.is_finite()) {
                diverged = true;
                break 'epochs;
            }

            let scale = 1.0 / batch.len() as f64;
            let mut avg: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (breakdown, grads) in &results {
                epoch_loss.total += breakdown.total / train_samples.len() as f64;
                epoch_loss.mse += breakdown.mse / train_samples.len() as f64;
                epoch_loss.ds += breakdown.ds / train_samples.len() as f64;
                epoch_loss.kl += breakdown.kl / train_samples.len() as f64;
                for (name, g) in grads {
                    match avg.get_mut(name) {
                        Some(acc) => {
                            for (a, gi) in acc.iter_mut().zip(g) {
                                *a += gi * scale;
                            }
                        }
                        None => {
                            avg.insert(name.clone(), g.iter().map(|gi| gi * scale).collect());
                        }
                    }
                }
            }
            adam.step(&mut model.params, &avg, lr, cfg.weight_decay)?;
        }

        let val = val_loss_of(model, &val_samples, cfg)?;
        if !val.is_finite() {
            diverged = true;
            break 'epochs;
        }
        let row = EpochLog {
            epoch,
            lr,
            loss_total: epoch_loss.total,
            loss_mse: epoch_loss.mse,
            loss_ds: epoch_loss.ds,
            loss_kl: epoch_loss.kl,
            val_loss: val,
        };
        on_epoch(&row);
        log.push(row);

        if best.as_ref().is_none_or(|b| val < b.val_loss) {
            best = Some(Checkpoint::snapshot(model, cfg, epoch, val));
        }
    }

    let best = best.unwrap_or_else(|| Checkpoint::snapshot(model, cfg, 0, f64::INFINITY));
    Ok(TrainOutcome { best, log, diverged })
}
