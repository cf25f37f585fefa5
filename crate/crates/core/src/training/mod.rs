//! Losses, optimisation, the training loop, checkpoints and transfer.

mod adam;
mod checkpoint;
mod loss;
mod transfer;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{check_compatible, evaluate};
use crate::layers::ForwardCtx;
use crate::models::{MacroModel, ModelConfig};
use crate::params::ParamId;
use crate::tensor::{Tape, Tensor};

pub use adam::{lr_at_epoch, AdamConfig, AdamState};
pub use checkpoint::{has_prefix, Checkpoint, CheckpointMeta, TensorEntry, CHECKPOINT_VERSION};
pub use loss::{loss_build, loss_global, loss_total, PROB_CLAMP};
pub use transfer::{transfer, TransferConfig, TransferOutcome, FROZEN_SET, REINIT_SET};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Halve the rate after every second epoch.
    HalveEveryTwo,
    Constant,
}

impl LrSchedule {
    pub fn lr(self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::HalveEveryTwo => lr_at_epoch(base, epoch),
            LrSchedule::Constant => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_replays: usize,
    pub base_lr: f64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Weights of the outcome and build-order losses.
    pub loss_weights: [f64; 2],
    /// Train the outcome and build-order heads as two separate models.
    pub separate_heads: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_replays: 20,
            base_lr: 1e-3,
            schedule: LrSchedule::HalveEveryTwo,
            adam: AdamConfig::default(),
            seed: 0,
            loss_weights: [1.0, 1.0],
            separate_heads: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_replays == 0 {
            return Err(Error::config("batch_replays", "must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", format!("must be positive, got {}", self.base_lr)));
        }
        if self.loss_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("loss_weights", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    /// Zero-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_gsp: f64,
    pub val_bop: f64,
}

impl EpochRecord {
    /// Model-selection score: mean of the two validation accuracies.
    pub fn score(&self) -> f64 {
        (self.val_gsp + self.val_bop) / 2.0
    }
}

/// Renders records as JSON lines.
pub fn metrics_jsonl(log: &[EpochRecord]) -> Result<String> {
    let mut s = String::new();
    for r in log {
        s += &serde_json::to_string(r)?;
        s.push('\n');
    }
    Ok(s)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Seed of the dropout stream for one batch item.
fn item_seed(seed: u64, epoch: usize, batch: usize, item: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [epoch as u64, batch as u64, item as u64] {
        h = (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(17);
    }
    h
}

/// Gradient of the loss with respect to each parameter that received one.
pub type Gradients = Vec<(ParamId, Tensor<f32>)>;

/// Loss and parameter gradients of one batch, reduced in item order.
pub fn batch_gradients(
    model: &MacroModel<f32>,
    batch: &Batch,
    loss_weights: [f64; 2],
    dropout_seed: Option<u64>,
) -> Result<(f64, Gradients)> {
    let n = batch.unmasked();
    if n == 0 {
        return Err(Error::Data("batch has no real steps".into()));
    }
    let w = 1.0 / n as f32;
    let clamp = PROB_CLAMP as f32;
    let items: Vec<(f64, Gradients)> = (0..batch.len())
        .into_par_iter()
        .map(|b| {
            let input = batch.input(b);
            let len = input.len();
            let mut tape = Tape::with_params(model.params());
            let mut ctx = match dropout_seed {
                Some(s) => ForwardCtx::train(item_seed(s, 0, batch.window_index, b)),
                None => ForwardCtx::eval(),
            };
            let tr = model.forward(&mut tape, &input, &mut ctx)?;
            let target = batch.results[b] as f32;
            let lg = tape.binary_cross_entropy(tr.win_prob, vec![target; len], vec![w; len], clamp)?;
            let lb = tape.neg_log_likelihood(tr.action_dist, batch.item_actions(b).to_vec(), vec![w; len], clamp)?;
            let lg = tape.scale(lg, loss_weights[0] as f32);
            let lb = tape.scale(lb, loss_weights[1] as f32);
            let total = tape.add(lg, lb)?;
            tape.backward(total)?;
            let loss = tape.value(total).item() as f64;
            let grads = tape.param_grads().into_iter().map(|(id, g)| (id, g.clone())).collect();
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;

    let mut sum: Vec<Option<Tensor<f32>>> = vec![None; model.params().len()];
    let mut loss = 0.0;
    for (l, grads) in items {
        loss += l;
        for (id, g) in grads {
            match &mut sum[id.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
    }
    let grads = sum.into_iter().enumerate().filter_map(|(i, g)| g.map(|g| (ParamId(i), g))).collect();
    Ok((loss, grads))
}

/// Trains a fresh model built from `model_cfg` and `cfg.seed`.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let model = MacroModel::new(model_cfg, cfg.seed)?;
    train_model(model, cfg, data, &mut |_| {})
}

/// Trains `model` in place of a fresh one; `observer` sees every epoch record
/// as soon as it is produced.
pub fn train_model(
    mut model: MacroModel<f32>,
    cfg: &TrainConfig,
    data: &Dataset,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(&model, data)?;
    let window_len = model.config().window_len;
    let mut adam = AdamState::new(cfg.base_lr, cfg.adam);
    let mut last_good = Checkpoint::from_model(&model, 0, None);
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(cfg.base_lr, epoch);
        adam.lr = lr;
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for (bi, batch) in make_batches(data, Split::Train, cfg.batch_replays, window_len, cfg.seed, epoch)?.enumerate()
        {
            let seed = item_seed(cfg.seed, epoch, bi, usize::MAX);
            let diverged = |detail: String, last_good: &Checkpoint| Error::Divergence {
                epoch,
                detail,
                last_good: Box::new(last_good.clone()),
            };
            let (loss, grads) = match batch_gradients(&model, &batch, cfg.loss_weights, Some(seed)) {
                Err(Error::Numeric(m)) => return Err(diverged(m, &last_good)),
                other => other?,
            };
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss} in batch {bi}"), &last_good));
            }
            adam.update(model.params_mut(), &grads)?;
            if !model.params().all_finite() {
                return Err(diverged(format!("non-finite parameters after batch {bi}"), &last_good));
            }
            let n = batch.unmasked();
            loss_sum += loss * n as f64;
            steps += n;
        }
        let val = evaluate(&model, data, Split::Val)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / steps as f64,
            val_gsp: val.gsp_mean_acc,
            val_bop: val.bop_mean_acc,
        };
        observer(&record);
        let ckpt = Checkpoint::from_model(&model, epoch + 1, Some(record.clone()));
        if best.as_ref().is_none_or(|b| record.score() > b.metrics.as_ref().map_or(f64::MIN, EpochRecord::score)) {
            best = Some(ckpt.clone());
        }
        last_good = ckpt;
        log.push(record);
    }
    let matchup = Some(data.manifest.matchup.to_string());
    let mut final_checkpoint = last_good;
    final_checkpoint.matchup = matchup.clone();
    let mut best_checkpoint = best.expect("at least one epoch");
    best_checkpoint.matchup = matchup;
    Ok(TrainOutcome { final_checkpoint, best_checkpoint, log })
}

/// Outcome-only and build-only models trained independently, as the
/// recurrent baseline is usually reported.
pub fn train_separate_heads(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<(TrainOutcome, TrainOutcome)> {
    let gsp = TrainConfig { loss_weights: [1.0, 0.0], ..cfg.clone() };
    let bop = TrainConfig { loss_weights: [0.0, 1.0], ..cfg.clone() };
    Ok((train(model_cfg, &gsp, data)?, train(model_cfg, &bop, data)?))
}
