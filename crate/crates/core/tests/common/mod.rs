//! Independent reference implementations and fixtures shared by the
//! integration tests. Nothing here goes through the tape.

#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use macroformer::data::{Dataset, GeneratorSpec, Matchup, Race};
use macroformer::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `x [C, H, W]`, `w [O, C, k, k]`, zero padding.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    (c, h, wd): (usize, usize, usize),
    w: &[f64],
    (o, k): (usize, usize),
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b.map_or(0.0, |b| b[oc]);
                for ic in 0..c {
                    for di in 0..k {
                        for dj in 0..k {
                            let (y, xx) =
                                ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                            if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            acc += x[(ic * h + y as usize) * wd + xx as usize] * w[((oc * c + ic) * k + di) * k + dj];
                        }
                    }
                }
                out[(oc * oh + i) * ow + j] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// `x [C, H, W]`, windows of `k` every `stride`, no padding.
pub fn naive_maxpool(x: &[f64], (c, h, w): (usize, usize, usize), k: usize, stride: usize) -> Vec<f64> {
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for di in 0..k {
                    for dj in 0..k {
                        m = m.max(x[(ch * h + i * stride + di) * w + j * stride + dj]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Row-major `[rows, cols]` matrix times the transpose of `[out, cols]`.
fn project(x: &[f64], rows: usize, cols: usize, w: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            y[r * out + o] = (0..cols).map(|c| x[r * cols + c] * w[o * cols + c]).sum();
        }
    }
    y
}

/// Multi-head attention evaluated element by element. Projections are
/// `y = x W^T`; `masked[i * lk + j]` hides key `j` from query `i`.
#[allow(clippy::too_many_arguments)]
pub fn naive_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    (lq, lk, d): (usize, usize, usize),
    [wq, wk, wv, wo]: [&[f64]; 4],
    heads: usize,
    masked: Option<&[bool]>,
) -> Vec<f64> {
    let (qp, kp, vp) = (project(q, lq, d, wq, d), project(k, lk, d, wk, d), project(v, lk, d, wv, d));
    let hd = d / heads;
    let mut cat = vec![0.0; lq * d];
    for h in 0..heads {
        for i in 0..lq {
            let scores: Vec<f64> = (0..lk)
                .map(|j| {
                    if masked.is_some_and(|m| m[i * lk + j]) {
                        return f64::NEG_INFINITY;
                    }
                    (0..hd).map(|e| qp[i * d + h * hd + e] * kp[j * d + h * hd + e]).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for e in 0..hd {
                cat[i * d + h * hd + e] = (0..lk).map(|j| exps[j] / z * vp[j * d + h * hd + e]).sum();
            }
        }
    }
    project(&cat, lq, d, wo, d)
}

pub struct GruWeights {
    /// Gate order z, r, n; each `[hidden, input]`.
    pub w_i: [Vec<f64>; 3],
    pub b_i: [Vec<f64>; 3],
    /// Each `[hidden, hidden]`.
    pub w_h: [Vec<f64>; 3],
    pub b_h: [Vec<f64>; 3],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One GRU step, gate by gate.
pub fn naive_gru_step(x: &[f64], h: &[f64], w: &GruWeights) -> Vec<f64> {
    let (n_in, n_h) = (x.len(), h.len());
    let gate = |g: usize, j: usize| -> (f64, f64) {
        let xi: f64 = (0..n_in).map(|c| w.w_i[g][j * n_in + c] * x[c]).sum::<f64>() + w.b_i[g][j];
        let hi: f64 = (0..n_h).map(|c| w.w_h[g][j * n_h + c] * h[c]).sum::<f64>() + w.b_h[g][j];
        (xi, hi)
    };
    (0..n_h)
        .map(|j| {
            let (xz, hz) = gate(0, j);
            let (xr, hr) = gate(1, j);
            let (xn, hn) = gate(2, j);
            let z = sigmoid(xz + hz);
            let r = sigmoid(xr + hr);
            let n = (xn + r * hn).tanh();
            (1.0 - z) * h[j] + z * n
        })
        .collect()
}

/// Mean binary cross-entropy over unmasked steps, `p` clamped to
/// `[eps, 1 - eps]`; `results` holds one label per row of `T` steps.
pub fn direct_loss_global(p: &[f64], t: usize, results: &[u8], mask: &[bool], eps: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (i, &pi) in p.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        let pi = pi.clamp(eps, 1.0 - eps);
        let r = results[i / t] as f64;
        sum -= r * pi.ln() + (1.0 - r) * (1.0 - pi).ln();
        n += 1;
    }
    sum / n as f64
}

/// Mean negative log-likelihood of the true action over unmasked steps.
pub fn direct_loss_build(dist: &[f64], a: usize, actions: &[usize], mask: &[bool], eps: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (i, &y) in actions.iter().enumerate() {
        if mask[i] {
            sum -= dist[i * a + y].max(eps).ln();
            n += 1;
        }
    }
    sum / n as f64
}

/// The desk-scale planted-signal corpus (600 TvT replays).
pub fn desk_corpus(seed: u64) -> Dataset {
    GeneratorSpec { seed, ..GeneratorSpec::default() }.dataset().unwrap()
}

/// A small corpus for fast training tests.
pub fn small_corpus(seed: u64, replays: usize, player: Race) -> Dataset {
    GeneratorSpec {
        matchup: Matchup::new(player, Race::Terran),
        replays,
        len_min: 10,
        len_max: 20,
        spatial_shape: [2, 8, 8],
        seed,
        ..GeneratorSpec::default()
    }
    .dataset()
    .unwrap()
}
