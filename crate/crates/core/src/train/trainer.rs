//! The training loop: shuffled mini-batch Adam on reconstruction MSE with
//! best-validation weight selection.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::Dataset;
use crate::codec::{batch_from_samples, count_complexity, Model, Provenance};
use crate::eval::NmseAccumulator;
use crate::util::derive_rng;
use crate::{Error, Result};

use super::adam::Adam;
use super::config::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_nmse_db: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Estimated training cost: 3x inference FLOPs per training sample
    /// (forward plus roughly double for backward) plus 1x per validation
    /// sample.
    pub cumulative_flops: u64,
    /// Epoch whose weights were selected (lowest validation MSE).
    pub best_epoch: usize,
}

impl TrainHistory {
    /// Loss trajectory without wall-clock noise; used by determinism checks.
    pub fn loss_trace(&self) -> Vec<(f64, f64)> {
        self.epochs.iter().map(|e| (e.train_mse, e.val_mse)).collect()
    }
}

/// Train from scratch on the dataset's training split. Returns the weights of
/// the best-validation epoch (early selection, not early stopping) and the
/// per-epoch history.
pub fn train(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    train_logged(model, data, cfg, |_| {})
}

pub fn train_logged(
    model: &Model,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Scratch {
        return Err(Error::InvalidArg(
            "train requires a scratch-mode config; use finetune for finetune mode".into(),
        ));
    }
    let (mut trained, history) = run_loop(
        model.clone(),
        data,
        &data.train_idx,
        cfg.learning_rate,
        cfg,
        on_epoch,
    )?;
    if cfg.epochs > 0 {
        trained.provenance = Provenance::Pretrained {
            source: data.name().to_string(),
        };
    }
    Ok((trained, history))
}

/// Continue training a pretrained model on a target dataset at
/// `learning_rate * finetune_lr_scale`, all layers trainable.
pub fn finetune(model: &Model, target: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Finetune {
        return Err(Error::InvalidArg("finetune requires a finetune-mode config".into()));
    }
    let prior = match &model.provenance {
        Provenance::Scratch => {
            return Err(Error::InvalidArg(
                "finetune requires a pretrained or finetuned model, got scratch provenance".into(),
            ))
        }
        Provenance::Pretrained { source } => vec![source.clone()],
        Provenance::Finetuned { sources } => sources.clone(),
    };
    let n_used = ((target.train_idx.len() as f64) * cfg.finetune_fraction).ceil() as usize;
    let subset: Vec<u32> = target.train_idx.iter().take(n_used.max(1)).cloned().collect();
    let lr = cfg.learning_rate * cfg.finetune_lr_scale;
    let (mut tuned, history) = run_loop(model.clone(), target, &subset, lr, cfg, |_| {})?;
    if cfg.epochs > 0 {
        let mut sources = prior;
        sources.push(target.name().to_string());
        tuned.provenance = Provenance::Finetuned { sources };
    }
    Ok((tuned, history))
}

fn run_loop(
    mut model: Model,
    data: &Dataset,
    train_idx: &[u32],
    lr: f64,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory)> {
    if data.n_delay != model.spec.n_delay || data.n_angle != model.spec.n_angle {
        return Err(Error::shape(
            "train",
            format!(
                "dataset geometry {}x{} does not match model {}x{}",
                data.n_delay, data.n_angle, model.spec.n_delay, model.spec.n_angle
            ),
        ));
    }
    if cfg.epochs == 0 {
        return Ok((model, TrainHistory::default()));
    }
    if train_idx.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }

    let per_sample_flops = count_complexity(&model.spec)?.flops;
    let mut sizes = Vec::new();
    model.visit_params(|_, t| sizes.push(t.numel()));
    let mut adam = Adam::new(&sizes, lr, cfg.beta1, cfg.beta2, cfg.eps);

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Vec<Vec<f64>>, usize)> = None;
    let mut samples_trained = 0u64;
    let mut samples_evaluated = 0u64;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let order = shuffled(train_idx, cfg.seed, epoch as u64);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue; // batch statistics undefined
            }
            let batch = batch_from_samples(chunk.iter().map(|&i| &data.samples[i as usize]))?;
            let mut pass = model.forward_loss(&batch)?;
            pass.graph.backward(pass.loss)?;
            loss_sum += pass.graph.value(pass.loss).data()[0] * chunk.len() as f64;
            loss_n += chunk.len();
            samples_trained += chunk.len() as u64;
            adam.begin_step();
            let mut slot = 0usize;
            let mut bad_layer: Option<String> = None;
            model.visit_params_mut(|name, t| {
                if bad_layer.is_some() {
                    return;
                }
                let (bound_name, node) = &pass.bindings[slot];
                debug_assert_eq!(bound_name, name);
                let grad = pass.graph.grad(*node).expect("parameter gradient");
                if grad.iter().any(|g| !g.is_finite()) {
                    bad_layer = Some(name.to_string());
                    return;
                }
                adam.update(slot, t.data_mut(), grad);
                slot += 1;
            });
            if let Some(layer) = bad_layer {
                return Err(Error::NonFiniteGrad {
                    layer,
                    epoch,
                    batch: batch_no,
                });
            }
        }

        let (val_mse, val_nmse_db) = validate(&model, data, &data.val_idx, cfg.batch_size)?;
        samples_evaluated += data.val_idx.len() as u64;
        let record = EpochRecord {
            epoch,
            train_mse: if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN },
            val_mse,
            val_nmse_db,
            wall_secs: t0.elapsed().as_secs_f64(),
        };
        if best.as_ref().map_or(true, |(b, _, _)| val_mse < *b) {
            let arrays = model.state_arrays().into_iter().map(|(_, a)| a).collect();
            best = Some((val_mse, arrays, epoch));
        }
        on_epoch(&record);
        history.epochs.push(record);
    }

    if let Some((_, arrays, epoch)) = best {
        model.load_state_arrays(arrays)?;
        history.best_epoch = epoch;
    }
    history.cumulative_flops = per_sample_flops * (3 * samples_trained + samples_evaluated);
    model.train_epochs_applied += cfg.epochs as u32;
    Ok((model, history))
}

fn shuffled(indices: &[u32], seed: u64, epoch: u64) -> Vec<u32> {
    use rand::Rng;
    let mut order = indices.to_vec();
    let mut rng = derive_rng(seed, 0x7368_7566 ^ epoch);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Inference-mode validation: MSE over normalized planes and dataset NMSE
/// (mean of per-sample ratios, in dB) over de-normalized matrices.
fn validate(model: &Model, data: &Dataset, indices: &[u32], batch_size: usize) -> Result<(f64, f64)> {
    let mut mse_sum = 0.0;
    let mut n = 0usize;
    let mut nmse = NmseAccumulator::new();
    for chunk in indices.chunks(batch_size.max(1)) {
        if chunk.is_empty() {
            continue;
        }
        let batch = batch_from_samples(chunk.iter().map(|&i| &data.samples[i as usize]))?;
        let out = model.reconstruct_batch(&batch)?;
        let plane = data.n_delay * data.n_angle;
        let bd = batch.data();
        let od = out.data();
        for (k, &idx) in chunk.iter().enumerate() {
            let s = &data.samples[idx as usize];
            let base = k * 2 * plane;
            let mut err = 0.0;
            for i in 0..2 * plane {
                let d = od[base + i] - bd[base + i];
                err += d * d;
            }
            mse_sum += err / (2 * plane) as f64;
            n += 1;
            // de-normalized NMSE ratio; scale cancels the shared affine map
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..plane {
                let hre = (s.real_plane[i] - 0.5) * s.norm_scale + s.norm_offset;
                let him = (s.imag_plane[i] - 0.5) * s.norm_scale + s.norm_offset;
                let rre = (od[base + i] - 0.5) * s.norm_scale + s.norm_offset;
                let rim = (od[base + plane + i] - 0.5) * s.norm_scale + s.norm_offset;
                num += (hre - rre) * (hre - rre) + (him - rim) * (him - rim);
                den += hre * hre + him * him;
            }
            nmse.push(if den == 0.0 { None } else { Some(num / den) });
        }
    }
    Ok((mse_sum / n.max(1) as f64, nmse.db()))
}
