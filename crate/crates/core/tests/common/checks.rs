//! Randomised comparisons of library operations against the reference
//! implementations; each returns the largest absolute deviation seen.

use rand::Rng;

use macroformer::layers::{causal_mask, AttentionMask, ForwardCtx, GruCell, MultiHeadAttention};
use macroformer::params::ParamStore;
use macroformer::tensor::{Tape, Tensor};
use macroformer::training::{loss_build, loss_global, PROB_CLAMP};

use super::*;

pub struct OracleStats {
    pub instances: usize,
    pub max_error: f64,
}

impl OracleStats {
    fn new() -> Self {
        OracleStats { instances: 0, max_error: 0.0 }
    }

    fn record(&mut self, err: f64) {
        self.instances += 1;
        if err.is_nan() || err > self.max_error {
            self.max_error = if err.is_nan() { f64::INFINITY } else { err };
        }
    }
}

pub fn conv2d(instances: usize, seed: u64) -> OracleStats {
    let mut r = rng(seed);
    let mut stats = OracleStats::new();
    while stats.instances < instances {
        let (c, h, w) = (r.gen_range(1..=3), r.gen_range(3..=7), r.gen_range(3..=7));
        let (o, k, stride, pad) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=2), r.gen_range(0..=1));
        let x = uniform(&mut r, c * h * w, -1.0, 1.0);
        let wt = uniform(&mut r, o * c * k * k, -1.0, 1.0);
        let b = r.gen_bool(0.5).then(|| uniform(&mut r, o, -1.0, 1.0));
        let (expected, oh, ow) = naive_conv2d(&x, (c, h, w), &wt, (o, k), b.as_deref(), stride, pad);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(tensor(&[c, h, w], x));
        let wv = tape.constant(tensor(&[o, c, k, k], wt));
        let bv = b.map(|b| tape.constant(tensor(&[o], b)));
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        assert_eq!(tape.shape(y), [o, oh, ow]);
        stats.record(max_abs_diff(tape.value(y).data(), &expected));
    }
    stats
}

pub fn maxpool2d(instances: usize, seed: u64) -> OracleStats {
    let mut r = rng(seed);
    let mut stats = OracleStats::new();
    while stats.instances < instances {
        let (c, h, w) = (r.gen_range(1..=3), r.gen_range(2..=7), r.gen_range(2..=7));
        let k = r.gen_range(1..=h.min(w).min(3));
        let stride = r.gen_range(1..=2);
        let x = uniform(&mut r, c * h * w, -1.0, 1.0);
        let expected = naive_maxpool(&x, (c, h, w), k, stride);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(tensor(&[c, h, w], x));
        let y = tape.maxpool2d(xv, k, stride).unwrap();
        stats.record(max_abs_diff(tape.value(y).data(), &expected));
    }
    stats
}

fn weights(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.by_name(name).unwrap().value.data().to_vec()
}

pub fn attention(instances: usize, seed: u64) -> OracleStats {
    let mut r = rng(seed);
    let mut stats = OracleStats::new();
    while stats.instances < instances {
        let heads = r.gen_range(1..=3);
        let d = heads * r.gen_range(1..=3);
        let (lq, lk) = (r.gen_range(1..=5), r.gen_range(1..=5));
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut store, "a", d, heads, 0.0, &mut r).unwrap();
        let mask = match r.gen_range(0..3) {
            0 => None,
            1 => Some(causal_mask(lq, lk)),
            _ => {
                // Random mask, keeping at least one visible key per query.
                let mut masked: Vec<bool> = (0..lq * lk).map(|_| r.gen_bool(0.4)).collect();
                for i in 0..lq {
                    let keep = r.gen_range(0..lk);
                    masked[i * lk + keep] = false;
                }
                Some(AttentionMask { queries: lq, keys: lk, masked })
            }
        };
        let q = uniform(&mut r, lq * d, -1.0, 1.0);
        let k = uniform(&mut r, lk * d, -1.0, 1.0);
        let v = uniform(&mut r, lk * d, -1.0, 1.0);
        let ws = ["w_q", "w_k", "w_v", "w_o"].map(|n| weights(&store, &format!("a.{n}")));
        let expected = naive_attention(
            &q,
            &k,
            &v,
            (lq, lk, d),
            [&ws[0], &ws[1], &ws[2], &ws[3]],
            heads,
            mask.as_ref().map(|m| m.masked.as_slice()),
        );
        let mut tape = Tape::with_params(&store);
        let (qv, kv, vv) = (
            tape.constant(tensor(&[lq, d], q)),
            tape.constant(tensor(&[lk, d], k)),
            tape.constant(tensor(&[lk, d], v)),
        );
        let y = mha.forward(&mut tape, qv, kv, vv, mask.as_ref(), &mut ForwardCtx::eval()).unwrap();
        stats.record(max_abs_diff(tape.value(y).data(), &expected));
    }
    stats
}

pub fn gru(instances: usize, seed: u64) -> OracleStats {
    let mut r = rng(seed);
    let mut stats = OracleStats::new();
    while stats.instances < instances {
        let (n_in, n_h, steps) = (r.gen_range(1..=5), r.gen_range(1..=5), r.gen_range(1..=3));
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "g", n_in, n_h, &mut r).unwrap();
        for (_, p) in store.iter_mut() {
            for v in p.value.data_mut() {
                *v += r.gen_range(-0.5..0.5);
            }
        }
        let g = |kind: &str| ["z", "r", "n"].map(|gate| weights(&store, &format!("g.{kind}_{gate}")));
        let w = GruWeights { w_i: g("w_i"), b_i: g("b_i"), w_h: g("w_h"), b_h: g("b_h") };
        let xs = uniform(&mut r, steps * n_in, -1.0, 1.0);
        let h0 = uniform(&mut r, n_h, -1.0, 1.0);
        let mut expected = Vec::new();
        let mut h = h0.clone();
        for t in 0..steps {
            h = naive_gru_step(&xs[t * n_in..(t + 1) * n_in], &h, &w);
            expected.extend_from_slice(&h);
        }
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(tensor(&[steps, n_in], xs));
        let hv = tape.constant(tensor(&[n_h], h0));
        let y = cell.forward(&mut tape, xv, hv).unwrap();
        stats.record(max_abs_diff(tape.value(y).data(), &expected));
    }
    stats
}

/// Random batch shapes, masks with at least one real step, and
/// probabilities including values beyond the clamp.
pub fn loss_global_draws(instances: usize, seed: u64) -> OracleStats {
    let mut r = rng(seed);
    let mut stats = OracleStats::new();
    while stats.instances < instances {
        let (b, t) = (r.gen_range(1..=4), r.gen_range(1..=10));
        let mut p = uniform(&mut r, b * t, 0.0, 1.0);
        if r.gen_bool(0.2) {
            p[0] = if r.gen_bool(0.5) { 0.0 } else { 1.0 };
        }
        let results: Vec<u8> = (0..b).map(|_| r.gen_range(0..=1)).collect();
        let mut mask: Vec<bool> = (0..b * t).map(|_| r.gen_bool(0.8)).collect();
        mask[r.gen_range(0..b * t)] = true;
        let expected = direct_loss_global(&p, t, &results, &mask, PROB_CLAMP);
        let got = loss_global(&tensor(&[b, t], p), &results, &mask).unwrap();
        stats.record((got - expected).abs());
    }
    stats
}

pub fn loss_build_draws(instances: usize, seed: u64) -> OracleStats {
    let mut r = rng(seed);
    let mut stats = OracleStats::new();
    while stats.instances < instances {
        let (b, t, a) = (r.gen_range(1..=3), r.gen_range(1..=10), r.gen_range(2..=75));
        let mut dist = Vec::with_capacity(b * t * a);
        for _ in 0..b * t {
            let row = uniform(&mut r, a, 0.0, 1.0);
            let z: f64 = row.iter().sum();
            dist.extend(row.iter().map(|v| v / z));
        }
        let actions: Vec<usize> = (0..b * t).map(|_| r.gen_range(0..a)).collect();
        let mut mask: Vec<bool> = (0..b * t).map(|_| r.gen_bool(0.8)).collect();
        mask[r.gen_range(0..b * t)] = true;
        let expected = direct_loss_build(&dist, a, &actions, &mask, PROB_CLAMP);
        let got = loss_build(&Tensor::from_vec(vec![b, t, a], dist).unwrap(), &actions, &mask).unwrap();
        stats.record((got - expected).abs());
    }
    stats
}
