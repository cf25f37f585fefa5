//! Run configuration and the command implementations behind the command
//! line tool.
//!
//! A run is described by one JSON document holding the model, training and
//! transfer settings plus data and output paths. The document is resolved in
//! three layers: a named preset, then the user's config file deep-merged over
//! it, then individual `key.path = value` overrides from flags. Unknown keys
//! are rejected at every layer, and the effective result is echoed into the
//! output directory so any run can be reproduced from its `config.json`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{compare, evaluate, ComparisonTable, EvalReport};
use crate::models::{ModelConfig, Variant};
use crate::training::{
    metrics_jsonl, train, train_separate_heads, transfer, Checkpoint, EpochRecord, TrainConfig, TrainOutcome,
    TransferConfig, TransferOutcome,
};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "MACRO_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Tiny network for smoke runs and gradient checks.
    Toy,
    /// Small network that learns the planted-signal corpus in minutes.
    #[default]
    Desk,
    /// Full-size architecture and protocol.
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Preset::Toy, Preset::Desk, Preset::Paper]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("preset", format!("unknown preset {s:?}; expected toy, desk or paper")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub transfer: TransferConfig,
    /// Corpus directory or manifest file.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::default())
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, train) = match preset {
            Preset::Toy => (ModelConfig::toy(Variant::Full), TrainConfig { epochs: 2, ..TrainConfig::default() }),
            Preset::Desk => (ModelConfig::desk(Variant::Full, 75), TrainConfig::default()),
            Preset::Paper => (ModelConfig::default(), TrainConfig::default()),
        };
        RunConfig { preset, model, train, transfer: TransferConfig::default(), data: None, out: PathBuf::from("out") }
    }

    /// Resolves preset, config document and overrides into one config.
    ///
    /// The preset is taken from an explicit `preset` override, else from the
    /// document's `preset` key, else the default.
    pub fn resolve(document: Option<&str>, overrides: &[(String, Value)]) -> Result<Self> {
        let patch: Value = match document {
            Some(text) => serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?,
            None => Value::Object(Default::default()),
        };
        if !patch.is_object() {
            return Err(Error::config("config", "the config document must be a JSON object"));
        }
        let preset_value = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.clone())
            .or_else(|| patch.get("preset").cloned());
        let preset = match preset_value {
            Some(Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::config("preset", format!("expected a string, got {other}"))),
            None => Preset::default(),
        };
        let mut merged = serde_json::to_value(RunConfig::preset(preset))?;
        merge(&mut merged, patch);
        for (key, value) in overrides {
            set_path(&mut merged, key, value.clone())?;
        }
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let text = path.map(|p| fs::read_to_string(p).map_err(|e| Error::io_at(p, e))).transpose()?;
        Self::resolve(text.as_deref(), overrides)
    }

    /// Sets the training and transfer seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.transfer.seed = seed;
    }

    /// Adopts the input shapes and action vocabulary of a corpus.
    pub fn fit_to(&mut self, data: &Dataset) -> Result<()> {
        let m = &data.manifest;
        self.model.global_dim = m.global_dim;
        self.model.spatial_shape = m.spatial_shape;
        self.model.action_count = m.action_count;
        self.model.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn dataset(&self) -> Result<Dataset> {
        let path = self.data.as_ref().ok_or_else(|| Error::config("data", "no corpus given (--data)"))?;
        Dataset::load(path)
    }
}

/// Seed from a flag, else from [`SEED_ENV`], else none.
pub fn effective_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(s) => {
            s.trim().parse().map(Some).map_err(|_| Error::config(SEED_ENV, format!("{s:?} is not an unsigned integer")))
        }
        Err(_) => Ok(None),
    }
}

/// Parses `key.path=json`; a value that is not valid JSON is taken as a string.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (key, raw) =
        arg.split_once('=').ok_or_else(|| Error::config("set", format!("{arg:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .get_mut(*part)
            .filter(|n| n.is_object())
            .ok_or_else(|| Error::config(key, "no such config section"))?;
    }
    let obj = node.as_object_mut().expect("walked to an object");
    let last = parts[parts.len() - 1];
    if !obj.contains_key(last) {
        return Err(Error::config(key, "no such config key"));
    }
    obj.insert(last.to_string(), value);
    Ok(())
}

/// Fixed layout of a command's output directory.
#[derive(Clone, Debug)]
pub struct OutDir {
    pub root: PathBuf,
}

impl OutDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OutDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints().join(format!("{name}.ckpt"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    /// Creates the directories and echoes the effective config.
    pub fn prepare(&self, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(self.checkpoints())?;
        fs::write(self.config(), cfg.to_json()? + "\n")?;
        Ok(())
    }
}

/// Trains one model; writes `best`/`final` checkpoints, the epoch log and a
/// test-split report of the best checkpoint.
pub fn cmd_train(mut cfg: RunConfig) -> Result<(TrainOutcome, EvalReport)> {
    let data = cfg.dataset()?;
    cfg.fit_to(&data)?;
    let out = OutDir::new(&cfg.out);
    out.prepare(&cfg)?;
    let outcome = train(&cfg.model, &cfg.train, &data)?;
    outcome.best_checkpoint.save(out.checkpoint("best"))?;
    outcome.final_checkpoint.save(out.checkpoint("final"))?;
    fs::write(out.metrics(), metrics_jsonl(&outcome.log)?)?;
    let report = evaluate(&outcome.best_checkpoint.to_model()?, &data, Split::Test)?;
    fs::write(out.report_csv(), report.to_csv())?;
    fs::write(out.report_json(), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok((outcome, report))
}

/// Evaluates a saved checkpoint on one split; writes the report when `out`
/// is given.
pub fn cmd_eval(checkpoint: &Path, data: &Path, split: Split, out: Option<&Path>) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = Dataset::load(data)?;
    let report = evaluate(&ckpt.to_model()?, &data, split)?;
    if let Some(dir) = out {
        let out = OutDir::new(dir);
        fs::create_dir_all(&out.root)?;
        fs::write(out.report_csv(), report.to_csv())?;
        fs::write(out.report_json(), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

/// Digest summary written next to a transfer run's checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferSummary {
    pub source_frozen_digest: String,
    pub final_frozen_digest: String,
    pub frozen_intact: bool,
    pub changed: Vec<String>,
}

/// Fine-tunes the heads of `source` on the configured corpus.
pub fn cmd_transfer(mut cfg: RunConfig, source: &Path) -> Result<(TransferOutcome, EvalReport)> {
    let data = cfg.dataset()?;
    let ckpt = Checkpoint::load(source)?;
    cfg.model = ckpt.model.clone();
    cfg.model.action_count = data.manifest.action_count;
    cfg.transfer.validate()?;
    let out = OutDir::new(&cfg.out);
    out.prepare(&cfg)?;
    let result = transfer(&ckpt, &cfg.transfer, &data)?;
    let o = &result.outcome;
    o.best_checkpoint.save(out.checkpoint("best"))?;
    o.final_checkpoint.save(out.checkpoint("final"))?;
    fs::write(out.metrics(), metrics_jsonl(&o.log)?)?;
    let summary = TransferSummary {
        source_frozen_digest: result.source_frozen_digest.clone(),
        final_frozen_digest: result.final_frozen_digest.clone(),
        frozen_intact: result.frozen_intact(),
        changed: result.changed.clone(),
    };
    fs::write(out.root.join("transfer.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let report = evaluate(&o.final_checkpoint.to_model()?, &data, Split::Test)?;
    fs::write(out.report_csv(), report.to_csv())?;
    fs::write(out.report_json(), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok((result, report))
}

#[derive(Serialize)]
struct VariantRecord<'a> {
    variant: Variant,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

/// Trains every variant with one seed on one corpus and tabulates their
/// test-split accuracy (final checkpoints).
///
/// With `train.separate_heads`, the recurrent baseline is trained as two
/// single-task models and its row combines their accuracies.
pub fn cmd_ablate(mut cfg: RunConfig, observer: &mut dyn FnMut(Variant, &EvalReport)) -> Result<ComparisonTable> {
    let data = cfg.dataset()?;
    cfg.fit_to(&data)?;
    let out = OutDir::new(&cfg.out);
    out.prepare(&cfg)?;
    let mut metrics = String::new();
    let mut reports = Vec::new();
    for variant in Variant::ALL {
        let model_cfg = ModelConfig { variant, ..cfg.model.clone() };
        let report = if variant == Variant::GruBaseline && cfg.train.separate_heads {
            let (g, b) = train_separate_heads(&model_cfg, &cfg.train, &data)?;
            let rg = evaluate(&g.final_checkpoint.to_model()?, &data, Split::Test)?;
            let rb = evaluate(&b.final_checkpoint.to_model()?, &data, Split::Test)?;
            g.final_checkpoint.save(out.checkpoint(&format!("{variant}_gsp")))?;
            b.final_checkpoint.save(out.checkpoint(&format!("{variant}_bop")))?;
            for record in g.log.iter().chain(&b.log) {
                metrics += &serde_json::to_string(&VariantRecord { variant, record })?;
                metrics.push('\n');
            }
            EvalReport { bop_mean_acc: rb.bop_mean_acc, ..rg }
        } else {
            let o = train(&model_cfg, &cfg.train, &data)?;
            o.final_checkpoint.save(out.checkpoint(variant.name()))?;
            for record in &o.log {
                metrics += &serde_json::to_string(&VariantRecord { variant, record })?;
                metrics.push('\n');
            }
            evaluate(&o.final_checkpoint.to_model()?, &data, Split::Test)?
        };
        observer(variant, &report);
        reports.push(report);
    }
    fs::write(out.metrics(), metrics)?;
    let table = compare(&reports)?;
    fs::write(out.report_csv(), table.to_csv())?;
    fs::write(out.report_json(), table.to_json()? + "\n")?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn preset_then_document_then_overrides() {
        let doc = r#"{"preset": "toy", "train": {"epochs": 4}, "model": {"dropout": 0.25}}"#;
        let cfg = RunConfig::resolve(Some(doc), &[("train.epochs".into(), json!(6))]).unwrap();
        assert_eq!(cfg.preset, Preset::Toy);
        assert_eq!(cfg.model.d_model, ModelConfig::toy(Variant::Full).d_model);
        assert_eq!(cfg.model.dropout, 0.25);
        assert_eq!(cfg.train.epochs, 6);
        let paper = RunConfig::resolve(None, &[("preset".into(), json!("paper"))]).unwrap();
        assert_eq!(paper.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [r#"{"trian": {}}"#, r#"{"model": {"d_modle": 8}}"#, r#"{"train": {"epochs": 2, "lr": 1}}"#] {
            let e = RunConfig::resolve(Some(doc), &[]).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{doc}: {e}");
        }
        let e = RunConfig::resolve(None, &[("model.nope".into(), json!(1))]).unwrap_err();
        assert!(e.to_string().contains("model.nope"), "{e}");
    }

    #[test]
    fn invalid_values_name_their_key() {
        let e = RunConfig::resolve(None, &[("train.epochs".into(), json!(0))]).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "epochs"), "{e}");
    }

    #[test]
    fn overrides_parse_json_or_fall_back_to_strings() {
        assert_eq!(parse_override("train.epochs=3").unwrap(), ("train.epochs".into(), json!(3)));
        assert_eq!(parse_override("model.variant=no_skip").unwrap().1, json!("no_skip"));
        assert!(parse_override("epochs").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(RunConfig::resolve(Some(&cfg.to_json().unwrap()), &[]).unwrap(), cfg);
    }
}
