//! Central finite-difference checks of every backward rule, every layer
//! family and the assembled models, in 64-bit arithmetic.
//!
//! Each check reduces the output to a scalar with a fixed random projection,
//! back-propagates once, and compares every input and parameter coordinate
//! against `(L(x + h) - L(x - h)) / 2h`. The relative error of a coordinate is
//! `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients from
//! dividing by zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{
    causal_mask, Conv2d, DecoderLayer, EncoderLayer, FeedForward, ForwardCtx, GruCell, LayerNorm, Linear,
    MultiHeadAttention, NormOrder,
};
use crate::models::{MacroModel, ModelConfig, Variant, WindowInput};
use crate::params::ParamStore;
use crate::tensor::{OpKind, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub h: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub seed: u64,
    /// Corrupts the backward rule of one operation (negative control).
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { h: 1e-4, tolerance: 1e-3, floor: 1e-3, seed: 7, fault: None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// `op`, `layer` or `model`.
    pub family: &'static str,
    pub max_rel_error: f64,
    /// Coordinate with the largest error, e.g. `input0[3]` or `w.weight[5]`.
    pub worst: String,
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn layer_families(&self) -> usize {
        self.results.iter().filter(|r| r.family == "layer").count()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            s += &format!(
                "{:<5} {:<6} {:<28} max rel err {:.3e} at {} ({} coords)\n",
                if r.passed { "ok" } else { "FAIL" },
                r.family,
                r.name,
                r.max_rel_error,
                r.worst,
                r.coordinates
            );
        }
        s
    }
}

type Forward<'a> = dyn for<'p> Fn(&mut Tape<'p, f64>, &[Var]) -> Result<Var> + 'a;

/// Checks `f` with respect to `inputs` and every parameter in `store`.
pub fn check(
    name: &str,
    family: &'static str,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: &Forward<'_>,
    opts: &GradcheckOptions,
) -> Result<CheckResult> {
    // Fixed projection of the output to a scalar.
    let project = |tape: &mut Tape<'_, f64>, out: Var| -> Result<Var> {
        let n = tape.value(out).len();
        if n == 1 {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xfeed);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = tape.mul_const(out, w)?;
        Ok(tape.sum(p))
    };
    let loss_at = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::with_params(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let l = project(&mut tape, out)?;
        Ok(tape.value(l).item())
    };

    let mut tape = Tape::with_params(store);
    tape.inject_fault(opts.fault);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = project(&mut tape, out)?;
    tape.backward(loss)?;

    let mut analytic: Vec<(String, Tensor<f64>)> = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let g = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        analytic.push((format!("input{i}"), g));
    }
    let param_grads = tape.param_grads();
    for (id, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let g = param_grads
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| (*g).clone())
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        analytic.push((p.name.clone(), g));
    }
    drop(tape);

    let mut worst = (0.0f64, String::from("-"));
    let mut coords = 0;
    let mut consider = |label: String, a: f64, n: f64| {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(opts.floor);
        if err > worst.0 || !err.is_finite() {
            worst = (if err.is_finite() { err } else { f64::INFINITY }, label);
        }
    };

    let mut inputs_mut = inputs.to_vec();
    for i in 0..inputs.len() {
        for k in 0..inputs[i].len() {
            let x = inputs[i].data()[k];
            inputs_mut[i].data_mut()[k] = x + opts.h;
            let up = loss_at(store, &inputs_mut)?;
            inputs_mut[i].data_mut()[k] = x - opts.h;
            let down = loss_at(store, &inputs_mut)?;
            inputs_mut[i].data_mut()[k] = x;
            consider(format!("input{i}[{k}]"), analytic[i].1.data()[k], (up - down) / (2.0 * opts.h));
            coords += 1;
        }
    }
    let mut store_mut = store.clone();
    for (name, g) in &analytic[inputs.len()..] {
        let id = store.id(name).expect("present");
        for k in 0..g.len() {
            let x = store.get(id).value.data()[k];
            store_mut.get_mut(id).value.data_mut()[k] = x + opts.h;
            let up = loss_at(&store_mut, inputs)?;
            store_mut.get_mut(id).value.data_mut()[k] = x - opts.h;
            let down = loss_at(&store_mut, inputs)?;
            store_mut.get_mut(id).value.data_mut()[k] = x;
            consider(format!("{name}[{k}]"), g.data()[k], (up - down) / (2.0 * opts.h));
            coords += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        family,
        max_rel_error: worst.0,
        worst: worst.1,
        coordinates: coords,
        passed: worst.0 < opts.tolerance,
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape.to_vec(), v).expect("shape")
}

/// Values at least `gap` apart, so max and ReLU kinks stay out of reach of `h`.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    Tensor::from_vec(shape.to_vec(), v).expect("shape")
}

/// Randomizes every parameter (biases and norm offsets are zero at init,
/// which would leave some paths unexercised).
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

fn op_checks(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let empty = ParamStore::new();
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, f: &Forward<'_>| -> Result<()> {
        out.push(check(name, "op", &empty, &inputs, f, opts)?);
        Ok(())
    };
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| random(rng, s, -1.0, 1.0);

    run("matmul", vec![r(rng, &[3, 4]), r(rng, &[4, 2])], &|t, v| t.matmul(v[0], v[1]))?;
    run("matmul", vec![r(rng, &[3, 4]), r(rng, &[2, 4])], &|t, v| t.matmul_bt(v[0], v[1]))?;
    run("add_row", vec![r(rng, &[3, 4]), r(rng, &[4])], &|t, v| t.add_row(v[0], v[1]))?;
    run("transpose", vec![r(rng, &[3, 4])], &|t, v| t.transpose(v[0]))?;
    run("add", vec![r(rng, &[3, 4]), r(rng, &[3, 4])], &|t, v| t.add(v[0], v[1]))?;
    run("sub", vec![r(rng, &[3, 4]), r(rng, &[3, 4])], &|t, v| t.sub(v[0], v[1]))?;
    run("mul", vec![r(rng, &[3, 4]), r(rng, &[3, 4])], &|t, v| t.mul(v[0], v[1]))?;
    run("mul", vec![r(rng, &[3, 4]), r(rng, &[3, 1])], &|t, v| t.mul(v[0], v[1]))?;
    run("relu", vec![spread(rng, &[3, 4], 0.1)], &|t, v| Ok(t.relu(v[0])))?;
    run("sigmoid", vec![r(rng, &[3, 4])], &|t, v| Ok(t.sigmoid(v[0])))?;
    run("tanh", vec![r(rng, &[3, 4])], &|t, v| Ok(t.tanh(v[0])))?;
    run("scale", vec![r(rng, &[3, 4])], &|t, v| Ok(t.scale(v[0], -1.7)))?;
    run("mul_const", vec![r(rng, &[2, 3])], &|t, v| t.mul_const(v[0], vec![0.5, -1.0, 2.0, 0.0, 3.0, 1.0]))?;
    run("mask_fill+softmax", vec![r(rng, &[2, 3])], &|t, v| {
        let m = t.mask_fill(v[0], vec![false, true, false, false, false, true])?;
        t.softmax(m, 1)
    })?;
    run("softmax", vec![r(rng, &[3, 4])], &|t, v| t.softmax(v[0], 1))?;
    run("softmax", vec![r(rng, &[3, 4])], &|t, v| t.softmax(v[0], 0))?;
    run("layernorm", vec![r(rng, &[3, 5]), r(rng, &[5]), r(rng, &[5])], &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))?;
    run("conv2d", vec![r(rng, &[2, 5, 5]), r(rng, &[3, 2, 3, 3]), r(rng, &[3])], &|t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
    })?;
    run("conv2d", vec![r(rng, &[2, 1, 4, 4]), r(rng, &[2, 1, 2, 2])], &|t, v| t.conv2d(v[0], v[1], None, 1, 0))?;
    run("maxpool2d", vec![spread(rng, &[2, 4, 4], 0.05)], &|t, v| t.maxpool2d(v[0], 2, 2))?;
    run("reshape", vec![r(rng, &[3, 4])], &|t, v| t.reshape(v[0], &[2, 6]))?;
    run("slice_cols+concat_cols", vec![r(rng, &[3, 5])], &|t, v| {
        let a = t.slice_cols(v[0], 1, 2)?;
        let b = t.slice_cols(v[0], 0, 1)?;
        t.concat_cols(&[a, b, a])
    })?;
    run("slice_rows+concat_rows", vec![r(rng, &[4, 3])], &|t, v| {
        let a = t.slice_rows(v[0], 2, 2)?;
        let b = t.slice_rows(v[0], 0, 1)?;
        t.concat_rows(&[b, a, b])
    })?;
    run("sum+scale+add", vec![r(rng, &[3, 4])], &|t, v| {
        let s = t.sum(v[0]);
        let m = t.mean(v[0]);
        let m = t.scale(m, 3.0);
        t.add(s, m)
    })?;
    run("binary_cross_entropy", vec![random(rng, &[6], 0.05, 0.95)], &|t, v| {
        t.binary_cross_entropy(v[0], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0], vec![0.5, 1.0, 0.25, 2.0, 1.0, 0.0], 1e-7)
    })?;
    run("softmax+neg_log_likelihood", vec![r(rng, &[3, 4])], &|t, v| {
        let d = t.softmax(v[0], 1)?;
        t.neg_log_likelihood(d, vec![2, 0, 3], vec![1.0, 0.5, 2.0], 1e-7)
    })?;
    Ok(out)
}

fn layer_checks(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut layer = |name: &str,
                     build: &dyn Fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<()>,
                     inputs: Vec<Tensor<f64>>,
                     f: &Forward<'_>,
                     rng: &mut ChaCha8Rng|
     -> Result<()> {
        let mut store = ParamStore::new();
        build(&mut store, rng)?;
        jitter(&mut store, rng);
        out.push(check(name, "layer", &store, &inputs, f, opts)?);
        Ok(())
    };
    let mut init = ChaCha8Rng::seed_from_u64(opts.seed);
    let (d, heads, l) = (8, 2, 4);
    let x = |rng: &mut ChaCha8Rng, s: &[usize]| random(rng, s, -1.0, 1.0);

    let mut s = ParamStore::<f64>::new();
    let lin = Linear::new(&mut s, "lin", 5, 3, &mut init)?;
    layer(
        "linear",
        &|st, r| Linear::new(st, "lin", 5, 3, r).map(drop),
        vec![x(rng, &[4, 5])],
        &|t, v| lin.forward(t, v[0]),
        rng,
    )?;

    let mut s = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut s, "ln", d)?;
    layer(
        "layer_norm",
        &|st, _| LayerNorm::new(st, "ln", d).map(drop),
        vec![x(rng, &[l, d])],
        &|t, v| ln.forward(t, v[0]),
        rng,
    )?;

    let mut s = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut s, "conv", 2, 3, 3, 2, 1, &mut init)?;
    layer(
        "conv2d",
        &|st, r| Conv2d::new(st, "conv", 2, 3, 3, 2, 1, r).map(drop),
        vec![x(rng, &[2, 2, 6, 6])],
        &|t, v| conv.forward(t, v[0]),
        rng,
    )?;

    layer("maxpool2d", &|_, _| Ok(()), vec![spread(rng, &[3, 4, 6], 0.02)], &|t, v| t.maxpool2d(v[0], 2, 2), rng)?;

    let mut s = ParamStore::<f64>::new();
    let ffn = FeedForward::new(&mut s, "ffn", d, 12, 0.0, &mut init)?;
    layer(
        "feed_forward",
        &|st, r| FeedForward::new(st, "ffn", d, 12, 0.0, r).map(drop),
        vec![x(rng, &[l, d])],
        &|t, v| ffn.forward(t, v[0], &mut ForwardCtx::eval()),
        rng,
    )?;

    let mut s = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut s, "attn", d, heads, 0.0, &mut init)?;
    let mask = causal_mask(l, l);
    layer(
        "attention",
        &|st, r| MultiHeadAttention::new(st, "attn", d, heads, 0.0, r).map(drop),
        vec![x(rng, &[l, d]), x(rng, &[l, d])],
        &|t, v| mha.forward(t, v[0], v[1], v[1], Some(&mask), &mut ForwardCtx::eval()),
        rng,
    )?;

    let mut s = ParamStore::<f64>::new();
    let gru = GruCell::new(&mut s, "gru", 5, 4, &mut init)?;
    layer(
        "gru",
        &|st, r| GruCell::new(st, "gru", 5, 4, r).map(drop),
        vec![x(rng, &[l, 5]), x(rng, &[4])],
        &|t, v| gru.forward(t, v[0], v[1]),
        rng,
    )?;

    for order in [NormOrder::PreNorm, NormOrder::PostNorm] {
        let tag = match order {
            NormOrder::PreNorm => "pre",
            NormOrder::PostNorm => "post",
        };
        let mut s = ParamStore::<f64>::new();
        let enc = EncoderLayer::new(&mut s, "enc", d, heads, 12, 0.0, order, &mut init)?;
        layer(
            &format!("encoder_layer_{tag}"),
            &|st, r| EncoderLayer::new(st, "enc", d, heads, 12, 0.0, order, r).map(drop),
            vec![x(rng, &[l, d])],
            &|t, v| enc.forward(t, v[0], true, &mut ForwardCtx::eval()),
            rng,
        )?;
        let mut s = ParamStore::<f64>::new();
        let dec = DecoderLayer::new(&mut s, "dec", d, heads, 12, 0.0, order, &mut init)?;
        layer(
            &format!("decoder_layer_{tag}"),
            &|st, r| DecoderLayer::new(st, "dec", d, heads, 12, 0.0, order, r).map(drop),
            vec![x(rng, &[l, d]), x(rng, &[l, d])],
            &|t, v| dec.forward(t, v[0], Some(v[1]), true, &mut ForwardCtx::eval()),
            rng,
        )?;
    }

    layer(
        "positional_softmax",
        &|_, _| Ok(()),
        vec![x(rng, &[l, d])],
        &|t, v| {
            let pe = t.constant(crate::layers::PositionalEncoding::new(l, d)?.rows(l)?);
            let s = t.add(v[0], pe)?;
            t.softmax(s, 1)
        },
        rng,
    )?;
    Ok(out)
}

/// Toy-size input for a model config, values in `[0, 1]`.
pub fn toy_window(cfg: &ModelConfig, t: usize, seed: u64) -> WindowInput<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = cfg.spatial_shape;
    WindowInput::new(random(&mut rng, &[t, cfg.global_dim], 0.0, 1.0), random(&mut rng, &[t, c, h, w], 0.0, 1.0))
}

fn model_checks(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for variant in Variant::ALL {
        let cfg = ModelConfig::toy(variant);
        let mut model = MacroModel::<f64>::new(&cfg, opts.seed)?;
        jitter(model.params_mut(), &mut ChaCha8Rng::seed_from_u64(opts.seed + 1));
        let input = toy_window(&cfg, 5, opts.seed + 2);
        let actions = vec![0usize, 3, 1, 4, 2];
        let f = |tape: &mut Tape<'_, f64>, _: &[Var]| -> Result<Var> {
            let tr = model.forward(tape, &input, &mut ForwardCtx::eval())?;
            let w = vec![0.2; 5];
            let lg = tape.binary_cross_entropy(tr.win_prob, vec![1.0; 5], w.clone(), 1e-7)?;
            let lb = tape.neg_log_likelihood(tr.action_dist, actions.clone(), w, 1e-7)?;
            tape.add(lg, lb)
        };
        out.push(check(&format!("model_{variant}"), "model", model.params(), &[], &f, opts)?);
    }
    Ok(out)
}

/// Runs every op, layer and model check.
pub fn run_suite(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if !(opts.h > 0.0 && opts.tolerance > 0.0) {
        return Err(Error::config("h", "step and tolerance must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut results = op_checks(opts, &mut rng)?;
    results.extend(layer_checks(opts, &mut rng)?);
    results.extend(model_checks(opts)?);
    Ok(GradcheckReport { tolerance: opts.tolerance, results })
}
