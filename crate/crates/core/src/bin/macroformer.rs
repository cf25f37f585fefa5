//! Command line front end: corpus generation, training, evaluation, transfer,
//! ablation sweeps and gradient checks.
//!
//! Exit codes: 0 ok, 1 check failure, 2 config error, 3 I/O or format error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use macroformer::data::{generate_synthetic_corpus, GeneratorSpec, Matchup, Split};
use macroformer::gradcheck::{run_suite, GradcheckOptions};
use macroformer::models::Variant;
use macroformer::run::{
    cmd_ablate, cmd_eval, cmd_train, cmd_transfer, effective_seed, parse_override, Preset, RunConfig,
};
use macroformer::tensor::{OpKind, ALL_OPS};
use macroformer::{Error, Result};

#[derive(Parser)]
#[command(name = "macroformer", version, about = "Win/loss and build-order prediction from replays")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-signal replay corpus.
    GenData(GenDataArgs),
    /// Train one model variant.
    Train(RunArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Fine-tune fresh heads on a new corpus over a frozen trunk.
    Transfer(TransferArgs),
    /// Train and compare all five variants.
    Ablate(RunArgs),
    /// Finite-difference check of every gradient rule.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    matchup: Option<Matchup>,
    #[arg(long)]
    replays: Option<usize>,
    #[arg(long)]
    len_min: Option<usize>,
    #[arg(long)]
    len_max: Option<usize>,
    /// Label-flip probability.
    #[arg(long)]
    noise: Option<f64>,
    /// Step within each window that carries the outcome signal.
    #[arg(long)]
    signal_step: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config, merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Corpus directory or manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_replays: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    decoder_softmax: Option<bool>,
    /// Let every step attend to the whole window.
    #[arg(long)]
    no_causal_mask: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Any other config key, as `section.key=json`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Directory for report.csv and report.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TransferArgs {
    /// Source checkpoint (full variant).
    #[arg(long = "from")]
    from: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Corrupt one backward rule (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

impl RunArgs {
    /// Resolves the config; `epochs`/`lr` go to `section`.
    fn resolve(&self, section: &str) -> Result<RunConfig> {
        let mut overrides: Vec<(String, Value)> = Vec::new();
        let mut put = |k: &str, v: Value| overrides.push((k.to_string(), v));
        if let Some(p) = self.preset {
            put("preset", json!(p.name()));
        }
        if let Some(d) = &self.data {
            put("data", json!(d));
        }
        if let Some(o) = &self.out {
            put("out", json!(o));
        }
        if let Some(v) = self.variant {
            put("model.variant", json!(v.name()));
        }
        if let Some(e) = self.epochs {
            put(&format!("{section}.epochs"), json!(e));
        }
        if let Some(lr) = self.lr {
            put(if section == "train" { "train.base_lr" } else { "transfer.lr" }, json!(lr));
        }
        if let Some(b) = self.batch_replays {
            put(&format!("{section}.batch_replays"), json!(b));
        }
        if let Some(d) = self.dropout {
            put("model.dropout", json!(d));
        }
        if let Some(s) = self.decoder_softmax {
            put("model.decoder_softmax", json!(s));
        }
        if self.no_causal_mask {
            put("model.causal_mask", json!(false));
        }
        for s in &self.set {
            overrides.push(parse_override(s)?);
        }
        let mut cfg = RunConfig::load(self.config.as_deref(), &overrides)?;
        if let Some(seed) = effective_seed(self.seed)? {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let d = GeneratorSpec::default();
    let spec = GeneratorSpec {
        matchup: a.matchup.unwrap_or(d.matchup),
        replays: a.replays.unwrap_or(d.replays),
        len_min: a.len_min.unwrap_or(d.len_min),
        len_max: a.len_max.unwrap_or(d.len_max),
        noise: a.noise.unwrap_or(d.noise),
        signal_step: a.signal_step.unwrap_or(d.signal_step),
        seed: effective_seed(a.seed)?.unwrap_or(d.seed),
        ..d
    };
    let m = generate_synthetic_corpus(&spec, &a.out_dir)?;
    println!(
        "{} replays of {} written to {} (train {}, val {}, test {})",
        m.files.len(),
        m.matchup,
        a.out_dir.display(),
        m.counts.train,
        m.counts.val,
        m.counts.test
    );
    Ok(())
}

fn print_log(log: &[macroformer::training::EpochRecord]) {
    for r in log {
        println!(
            "epoch {} lr {:e} loss {:.4} val gsp {:.4} bop {:.4}",
            r.epoch, r.lr, r.train_loss, r.val_gsp, r.val_bop
        );
    }
}

/// Runs a command; `Ok(false)` is a failed check (exit 1).
fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config { field: "threads".into(), detail: "must be at least 1".into() });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config { field: "threads".into(), detail: e.to_string() })?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => {
            let (outcome, report) = cmd_train(a.resolve("train")?)?;
            print_log(&outcome.log);
            println!("test gsp {:.4} bop {:.4} over {} steps", report.gsp_mean_acc, report.bop_mean_acc, report.steps);
        }
        Command::Eval(a) => {
            let r = cmd_eval(&a.checkpoint, &a.data, a.split, a.out.as_deref())?;
            println!(
                "{} {} gsp {:.4} bop {:.4} over {} steps",
                r.variant, r.split, r.gsp_mean_acc, r.bop_mean_acc, r.steps
            );
        }
        Command::Transfer(a) => {
            let (result, report) = cmd_transfer(a.run.resolve("transfer")?, &a.from)?;
            print_log(&result.outcome.log);
            println!("test gsp {:.4} bop {:.4}", report.gsp_mean_acc, report.bop_mean_acc);
            println!(
                "frozen digest {} -> {} ({})",
                result.source_frozen_digest,
                result.final_frozen_digest,
                if result.frozen_intact() { "intact" } else { "CHANGED" }
            );
            return Ok(result.frozen_intact());
        }
        Command::Ablate(a) => {
            let table = cmd_ablate(a.resolve("train")?, &mut |v, r| {
                println!("{v}: test gsp {:.4} bop {:.4}", r.gsp_mean_acc, r.bop_mean_acc)
            })?;
            print!("{}", table.to_csv());
        }
        Command::Gradcheck(a) => {
            let fault = match a.inject_fault {
                Some(name) => Some(ALL_OPS.into_iter().find(|op: &OpKind| op.name() == name).ok_or_else(|| {
                    Error::Config { field: "inject-fault".into(), detail: format!("unknown op {name:?}") }
                })?),
                None => None,
            };
            let report = run_suite(&GradcheckOptions {
                h: a.h,
                tolerance: a.tolerance,
                seed: a.seed,
                fault,
                ..Default::default()
            })?;
            print!("{}", report.render());
            println!("{} layer families checked", report.layer_families());
            let failed: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                println!("FAILED: {}", failed.join(", "));
                return Ok(false);
            }
            println!("all {} checks within {:e}", report.results.len(), report.tolerance);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
