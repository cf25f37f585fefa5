use serde::{Deserialize, Serialize};

use super::{has_prefix, train_model, Checkpoint, LrSchedule, TrainConfig, TrainOutcome};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{MacroModel, Variant};

/// Parameter groups kept fixed during fine-tuning.
pub const FROZEN_SET: [&str; 4] = ["mlp_encoder", "cnn_encoder", "encoder_stack", "decoder_stack"];
/// Parameter groups drawn afresh before fine-tuning.
pub const REINIT_SET: [&str; 2] = ["head_win", "head_build"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub epochs: usize,
    pub lr: f64,
    pub frozen: Vec<String>,
    pub reinit: Vec<String>,
    pub batch_replays: usize,
    /// Seeds the fresh heads, batch order and dropout.
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            epochs: 3,
            lr: 1e-5,
            frozen: FROZEN_SET.map(String::from).to_vec(),
            reinit: REINIT_SET.map(String::from).to_vec(),
            batch_replays: 20,
            seed: 0,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(3..=5).contains(&self.epochs) {
            return Err(Error::config("epochs", format!("transfer runs 3 to 5 epochs, got {}", self.epochs)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        for f in &self.frozen {
            if self.reinit.iter().any(|r| has_prefix(f, r) || has_prefix(r, f)) {
                return Err(Error::config("frozen", format!("{f} is also in the reinitialized set")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub outcome: TrainOutcome,
    /// Digest of the frozen tensors in the source checkpoint.
    pub source_frozen_digest: String,
    /// Digest of the same tensors after fine-tuning.
    pub final_frozen_digest: String,
    /// Parameters whose value or shape differs from the source.
    pub changed: Vec<String>,
}

impl TransferOutcome {
    pub fn frozen_intact(&self) -> bool {
        self.source_frozen_digest == self.final_frozen_digest
    }
}

/// Fine-tunes fresh heads on `target` on top of the frozen trunk of `source`.
pub fn transfer(source: &Checkpoint, tc: &TransferConfig, target: &Dataset) -> Result<TransferOutcome> {
    tc.validate()?;
    if source.model.variant != Variant::Full {
        return Err(Error::config(
            "variant",
            format!("transfer needs a full-variant source, got {}", source.model.variant),
        ));
    }
    let mut cfg = source.model.clone();
    cfg.action_count = target.manifest.action_count;
    let mut model = MacroModel::<f32>::new(&cfg, tc.seed)?;

    for prefix in &tc.frozen {
        if !source.params.names().any(|n| has_prefix(n, prefix)) {
            return Err(Error::config("frozen", format!("no tensor under {prefix:?} in the source checkpoint")));
        }
    }
    for prefix in &tc.reinit {
        if !model.params().names().any(|n| has_prefix(n, prefix)) {
            return Err(Error::config("reinit", format!("no tensor under {prefix:?} in the model")));
        }
    }
    let in_set = |set: &[String], name: &str| set.iter().any(|p| has_prefix(name, p));
    let names: Vec<String> = model.params().names().map(String::from).collect();
    for name in &names {
        if in_set(&tc.reinit, name) {
            continue;
        }
        let src = source
            .params
            .by_name(name)
            .ok_or_else(|| Error::config("frozen", format!("{name} missing from the source checkpoint")))?;
        let store = model.params_mut();
        store.set(name, src.value.clone())?;
        let id = store.id(name).expect("present");
        store.get_mut(id).frozen = in_set(&tc.frozen, name);
    }

    let train_cfg = TrainConfig {
        epochs: tc.epochs,
        batch_replays: tc.batch_replays,
        base_lr: tc.lr,
        schedule: LrSchedule::Constant,
        seed: tc.seed,
        ..TrainConfig::default()
    };
    let outcome = train_model(model, &train_cfg, target, &mut |_| {})?;
    let frozen: Vec<&str> = tc.frozen.iter().map(String::as_str).collect();
    let fin = &outcome.final_checkpoint;
    let changed = fin
        .params
        .iter()
        .filter(|(_, p)| source.params.by_name(&p.name).is_none_or(|s| s.value != p.value))
        .map(|(_, p)| p.name.clone())
        .collect();
    Ok(TransferOutcome {
        source_frozen_digest: source.digest(&frozen),
        final_frozen_digest: fin.digest(&frozen),
        changed,
        outcome,
    })
}
