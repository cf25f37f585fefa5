//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.
//!
//! ```text
//! cargo test --release --test acceptance
//! ```

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use macroformer::data::{
    assign_splits, decode_replay, dequantize, encode_replay, quantize, read_replay, write_replay, GeneratorSpec, Race,
    Split, SplitCounts,
};
use macroformer::eval::{evaluate, EvalReport};
use macroformer::gradcheck::{run_suite, GradcheckOptions};
use macroformer::layers::{EncoderLayer, ForwardCtx, NormOrder};
use macroformer::models::{MacroModel, ModelConfig, Variant, WindowInput};
use macroformer::params::ParamStore;
use macroformer::tensor::kernels::softmax_axis;
use macroformer::tensor::{Tape, Tensor};
use macroformer::training::{
    has_prefix, lr_at_epoch, metrics_jsonl, train, train_model, transfer, Checkpoint, TrainConfig, TransferConfig,
    FROZEN_SET, REINIT_SET,
};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

/// Outcome of one criterion: pass/fail plus a one-line summary.
struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict { passed, detail: detail.into() }
    }
}

/// Collects sub-checks; the criterion passes only when every one does.
#[derive(Default)]
struct Checks {
    failed: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if !ok {
            self.failed.push(what.clone());
        }
        self.notes.push(what);
    }

    fn verdict(self) -> Verdict {
        if self.failed.is_empty() {
            Verdict::new(true, self.notes.join("; "))
        } else {
            Verdict::new(false, format!("failed: {}", self.failed.join("; ")))
        }
    }
}

fn input(cfg: &ModelConfig, t: usize, seed: u64) -> WindowInput<f64> {
    let mut r = common::rng(seed);
    let [c, h, w] = cfg.spatial_shape;
    WindowInput::new(
        common::tensor(&[t, cfg.global_dim], common::uniform(&mut r, t * cfg.global_dim, 0.0, 1.0)),
        common::tensor(&[t, c, h, w], common::uniform(&mut r, t * c * h * w, 0.0, 1.0)),
    )
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let report = match run_suite(&GradcheckOptions::default()) {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    let worst = report.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let mut c = Checks::default();
    c.check(
        report.passed(),
        format!("{} checks, worst rel err {worst:.2e} < {:e}", report.results.len(), report.tolerance),
    );
    c.check(report.layer_families() >= 8, format!("{} layer families", report.layer_families()));
    c.check(elapsed < Duration::from_secs(120), format!("{elapsed:.1?}"));
    for f in report.failures() {
        c.check(false, format!("{} {:.2e}", f.name, f.max_rel_error));
    }
    c.verdict()
}

fn oracles() -> Verdict {
    let n = 200;
    let mut c = Checks::default();
    for (name, stats) in [
        ("conv2d", common::checks::conv2d(n, 1)),
        ("maxpool2d", common::checks::maxpool2d(n, 2)),
        ("attention", common::checks::attention(n, 3)),
        ("gru", common::checks::gru(n, 4)),
        ("loss_global", common::checks::loss_global_draws(n, 5)),
        ("loss_build", common::checks::loss_build_draws(n, 6)),
    ] {
        c.check(
            stats.instances >= n && stats.max_error <= 1e-6,
            format!("{name} {}x {:.1e}", stats.instances, stats.max_error),
        );
    }
    c.verdict()
}

fn contracts() -> Verdict {
    let mut c = Checks::default();
    let t = 5;

    // No output at step i depends on inputs after i.
    let mut leaks = Vec::new();
    for variant in [Variant::Full, Variant::NoSkip, Variant::NoDecoder, Variant::GruBaseline] {
        let cfg = ModelConfig::toy(variant);
        let model = MacroModel::<f64>::new(&cfg, 3).unwrap();
        let base = input(&cfg, t, 4);
        let reference = model.predict(&base).unwrap();
        for cut in 0..t - 1 {
            let mut x = base.clone();
            let mut r = common::rng(cut as u64 + 100);
            let (g, s) = (cfg.global_dim, x.spatial.len() / t);
            x.global.data_mut()[(cut + 1) * g..].iter_mut().for_each(|v| *v = r.gen());
            x.spatial.data_mut()[(cut + 1) * s..].iter_mut().for_each(|v| *v = r.gen());
            let out = model.predict(&x).unwrap();
            let a = cfg.action_count;
            if out.win_prob.data()[..=cut] != reference.win_prob.data()[..=cut]
                || out.action_dist.data()[..(cut + 1) * a] != reference.action_dist.data()[..(cut + 1) * a]
            {
                leaks.push(format!("{variant}@{cut}"));
            }
        }
    }
    c.check(
        leaks.is_empty(),
        format!("causal no-leak on 4 variants{}", if leaks.is_empty() { String::new() } else { format!(" {leaks:?}") }),
    );

    // Pre-norm layer with zeroed sublayers passes its input through.
    let mut store = ParamStore::<f64>::new();
    let layer = EncoderLayer::new(&mut store, "l", 8, 2, 16, 0.0, NormOrder::PreNorm, &mut common::rng(5)).unwrap();
    store.zero_prefix("l.self_attn");
    store.zero_prefix("l.ffn");
    let x = common::tensor(&[4, 8], common::uniform(&mut common::rng(6), 32, -2.0, 2.0));
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x.clone());
    let y = layer.forward(&mut tape, xv, true, &mut ForwardCtx::eval()).unwrap();
    c.check(tape.value(y) == &x, "residual identity");

    // Self-attention-only model commutes with permutations of the window.
    let cfg = ModelConfig::toy(Variant::SelfAttnOnly);
    let model = MacroModel::<f64>::new(&cfg, 7).unwrap();
    let base = input(&cfg, t, 8);
    let perm = [3, 0, 4, 1, 2];
    let permute = |x: &Tensor<f64>| {
        let row = x.len() / t;
        let mut shape = x.shape().to_vec();
        shape[0] = t;
        Tensor::from_vec(shape, perm.iter().flat_map(|&p| x.data()[p * row..(p + 1) * row].to_vec()).collect()).unwrap()
    };
    let a = model.predict(&base).unwrap();
    let b = model.predict(&WindowInput::new(permute(&base.global), permute(&base.spatial))).unwrap();
    let dev = common::max_abs_diff(&permute(&a.win_prob).into_data(), b.win_prob.data())
        .max(common::max_abs_diff(&permute(&a.action_dist).into_data(), b.action_dist.data()));
    c.check(dev <= 1e-14, format!("permutation equivariance (max dev {dev:.1e})"));

    // Softmax rows sum to one.
    let mut r = common::rng(9);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let cols = r.gen_range(1..100);
        let scale = [1.0, 100.0, 1e4][r.gen_range(0..3)];
        let x = common::uniform(&mut r, cols, -scale, scale);
        let mut out = vec![0.0; cols];
        softmax_axis(&[1, cols], 1, &x, &mut out);
        worst = worst.max((out.iter().sum::<f64>() - 1.0).abs());
    }
    c.check(worst <= 1e-6, format!("softmax sums (max dev {worst:.1e})"));

    // With both stacks zeroed, heads see exactly the branch encodings.
    let mut wiring = true;
    for variant in [Variant::Full, Variant::NoSkip] {
        let cfg = ModelConfig { decoder_softmax: false, ..ModelConfig::toy(variant) };
        let mut model = MacroModel::<f64>::new(&cfg, 9).unwrap();
        model.params_mut().zero_prefix("encoder_stack");
        model.params_mut().zero_prefix("decoder_stack");
        let x = input(&cfg, t, 10);
        let mut tape = Tape::with_params(model.params());
        let tr = model.forward(&mut tape, &x, &mut ForwardCtx::eval()).unwrap();
        let zeros = Tensor::zeros(tape.value(tr.mlp_out).shape());
        let (ew, eb) = match variant {
            Variant::Full => (tape.value(tr.mlp_out).clone(), tape.value(tr.cnn_out).clone()),
            _ => (zeros.clone(), zeros),
        };
        wiring &= tape.value(tr.head_win_input) == &ew && tape.value(tr.head_build_input) == &eb;
    }
    c.check(wiring, "skip wiring trace");
    c.verdict()
}

fn schedule_and_transfer() -> Verdict {
    let mut c = Checks::default();
    let expected = [1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 2.5e-4, 1.25e-4, 1.25e-4, 6.25e-5, 6.25e-5];
    let formula = expected.iter().enumerate().all(|(e, &lr)| lr_at_epoch(1e-3, e) == lr);
    let ds = common::small_corpus(1, 20, Race::Terran);
    let m = &ds.manifest;
    let cfg = ModelConfig {
        global_dim: m.global_dim,
        spatial_shape: m.spatial_shape,
        action_count: m.action_count,
        window_len: 10,
        ..ModelConfig::toy(Variant::Full)
    };
    let tc = TrainConfig { batch_replays: 5, seed: 1, ..TrainConfig::default() };
    let run = train(&cfg, &tc, &ds).unwrap();
    let logged: Vec<f64> = run.log.iter().map(|r| r.lr).collect();
    c.check(formula && logged == expected, "lr 1e-3 halved every 2 epochs");

    let source = run.final_checkpoint;
    let target = common::small_corpus(2, 20, Race::Protoss);
    let out =
        transfer(&source, &TransferConfig { batch_replays: 5, seed: 3, ..TransferConfig::default() }, &target).unwrap();
    let fin = &out.outcome.final_checkpoint;
    let in_set = |set: &[&str], n: &str| set.iter().any(|p| has_prefix(n, p));
    let mut frozen = 0;
    let mut bitwise = true;
    for (_, p) in fin.params.iter().filter(|(_, p)| in_set(&FROZEN_SET, &p.name)) {
        frozen += 1;
        let src = &source.params.by_name(&p.name).unwrap().value;
        bitwise &= p.frozen && src.data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    c.check(bitwise && out.frozen_intact(), format!("{frozen} frozen tensors bitwise unchanged"));
    let mut changed = out.changed.clone();
    changed.sort();
    let mut heads: Vec<String> = fin.params.names().filter(|n| in_set(&REINIT_SET, n)).map(String::from).collect();
    heads.sort();
    let only_heads = fin.params.names().all(|n| in_set(&FROZEN_SET, n) || in_set(&REINIT_SET, n));
    c.check(changed == heads && only_heads, format!("exactly {} head tensors reinitialised", heads.len()));
    c.verdict()
}

struct Run {
    report: EvalReport,
    epochs: usize,
}

fn desk_run(variant: Variant, seed: u64, softmax: bool) -> Run {
    let data = common::desk_corpus(seed);
    let cfg = ModelConfig { decoder_softmax: softmax, ..ModelConfig::desk(variant, data.manifest.action_count) };
    let tc = TrainConfig { seed, ..TrainConfig::default() };
    let out = train_model(MacroModel::new(&cfg, seed).unwrap(), &tc, &data, &mut |_| {}).unwrap();
    let report = evaluate(&out.final_checkpoint.to_model().unwrap(), &data, Split::Test).unwrap();
    Run { report, epochs: out.log.len() }
}

fn learning(full: &[Run], softmax_on: &[Run]) -> Verdict {
    let chance = 3.0 / 75.0;
    let mut c = Checks::default();
    for (seed, r) in SEEDS.iter().zip(full) {
        c.check(
            r.report.gsp_mean_acc >= 0.90 && r.report.bop_mean_acc >= chance && r.epochs <= 10,
            format!("seed {seed}: gsp {:.3} bop {:.3}", r.report.gsp_mean_acc, r.report.bop_mean_acc),
        );
    }
    let mut v = c.verdict();
    let on: Vec<String> = softmax_on.iter().map(|r| format!("{:.3}", r.report.gsp_mean_acc)).collect();
    v.detail += &format!(" [reported, not asserted: decoder softmax on gsp {}]", on.join("/"));
    v
}

fn ablation(full: &[Run], self_attn: &[Run]) -> Verdict {
    let mut c = Checks::default();
    for ((seed, f), s) in SEEDS.iter().zip(full).zip(self_attn) {
        c.check(
            s.report.gsp_mean_acc < f.report.gsp_mean_acc,
            format!("seed {seed}: self_attn_only {:.3} < full {:.3}", s.report.gsp_mean_acc, f.report.gsp_mean_acc),
        );
    }
    c.verdict()
}

fn data_layer() -> Verdict {
    let mut c = Checks::default();
    let spec = GeneratorSpec { replays: 50, seed: 11, ..GeneratorSpec::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut lossless = true;
    for (i, r) in spec.generate().unwrap().iter().enumerate() {
        let path = dir.path().join(format!("{i}.bin"));
        write_replay(&path, r).unwrap();
        let back = read_replay(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        lossless &= &back == r && encode_replay(&back).unwrap() == bytes && decode_replay(&bytes).unwrap() == *r;
    }
    c.check(lossless, "50 replays round trip bitwise");

    let mut ratio = true;
    for n in [10, 99, 100, 600, 1001, 4567] {
        let k = SplitCounts::for_total(n);
        let splits = assign_splits(n, 3);
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count() as f64;
        let n = n as f64;
        ratio &= (count(Split::Train) - 0.7 * n).abs() <= 1.0
            && (count(Split::Val) - 0.1 * n).abs() <= 1.0
            && (count(Split::Test) - 0.2 * n).abs() <= 1.0
            && k.total() as f64 == n;
    }
    c.check(ratio, "split 7:1:2 within 1");

    let mut r = common::rng(12);
    let worst = (0..100_000).map(|_| r.gen::<f32>()).map(|v| (dequantize(quantize(v)) - v).abs()).fold(0f32, f32::max);
    c.check(worst <= 1.0 / 510.0 + f32::EPSILON, format!("quantisation max err {worst:.2e} over 1e5 values"));
    c.verdict()
}

fn determinism() -> Verdict {
    let ds = common::small_corpus(13, 24, Race::Terran);
    let m = &ds.manifest;
    let cfg = ModelConfig {
        global_dim: m.global_dim,
        spatial_shape: m.spatial_shape,
        action_count: m.action_count,
        window_len: 10,
        dropout: 0.5,
        ..ModelConfig::toy(Variant::Full)
    };
    let tc = TrainConfig { epochs: 3, batch_replays: 5, seed: 14, ..TrainConfig::default() };
    let bytes = |c: &Checkpoint| c.to_bytes().unwrap();
    let a = train(&cfg, &tc, &ds).unwrap();
    let b = train(&cfg, &tc, &ds).unwrap();
    let mut c = Checks::default();
    c.check(bytes(&a.final_checkpoint) == bytes(&b.final_checkpoint), "final checkpoints identical");
    c.check(bytes(&a.best_checkpoint) == bytes(&b.best_checkpoint), "best checkpoints identical");
    c.check(metrics_jsonl(&a.log).unwrap() == metrics_jsonl(&b.log).unwrap(), "metric logs identical");
    c.verdict()
}

fn main() -> ExitCode {
    let mut verdicts: Vec<(usize, &str, Verdict, Duration)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let elapsed = start.elapsed();
        println!("{} criterion {n} ({name}): {} [{elapsed:.1?}]", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        verdicts.push((n, name, v, elapsed));
    };
    timed(1, "gradient check", &mut gradients);
    timed(2, "reference oracles", &mut oracles);
    timed(3, "structural contracts", &mut contracts);
    timed(4, "schedule and transfer", &mut schedule_and_transfer);

    let start = Instant::now();
    let full: Vec<Run> = SEEDS.iter().map(|&s| desk_run(Variant::Full, s, false)).collect();
    let softmax_on: Vec<Run> = SEEDS.iter().map(|&s| desk_run(Variant::Full, s, true)).collect();
    let self_attn: Vec<Run> = SEEDS.iter().map(|&s| desk_run(Variant::SelfAttnOnly, s, false)).collect();
    println!(
        "trained 9 desk models (3 seeds x full, full with decoder softmax, self_attn_only) in {:.1?}",
        start.elapsed()
    );
    timed(5, "planted-signal learning", &mut || learning(&full, &softmax_on));
    timed(6, "self-attention ablation", &mut || ablation(&full, &self_attn));
    timed(7, "data layer", &mut data_layer);
    timed(8, "determinism", &mut determinism);

    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.2.passed).map(|v| v.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", verdicts.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: criteria {failed:?} fail");
        ExitCode::FAILURE
    }
}
