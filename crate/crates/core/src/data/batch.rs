use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::models::WindowInput;
use crate::tensor::Tensor;

/// A contiguous slice `[start, start + len)` of one replay, padded to
/// `window_len` when it is the short final window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub replay: usize,
    /// Position of this window within its replay (0 for the first).
    pub index: usize,
    pub start: usize,
    /// Number of real (unpadded) steps.
    pub len: usize,
    pub window_len: usize,
}

impl Window {
    pub fn steps(&self) -> Range<usize> {
        self.start..self.start + self.len
    }

    /// `true` for real steps, `false` for trailing padding.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.window_len).map(|t| t < self.len).collect()
    }

    pub fn is_padded(&self) -> bool {
        self.len < self.window_len
    }
}

/// Tiles `[0, len)` with windows of `window_len`; the remainder becomes a
/// final padded window.
pub fn window_replay(replay: usize, len: usize, window_len: usize) -> Vec<Window> {
    assert!(window_len >= 1, "window_len must be positive");
    (0..len.div_ceil(window_len))
        .map(|index| {
            let start = index * window_len;
            Window { replay, index, start, len: window_len.min(len - start), window_len }
        })
        .collect()
}

/// Windows from up to `batch_replays` replays, all at the same window index.
#[derive(Clone, Debug)]
pub struct Batch {
    pub window_index: usize,
    pub windows: Vec<Window>,
    /// `[B, T, global_dim]`, zero at padded steps.
    pub global: Tensor<f32>,
    /// `[B, T, C, H, W]`, zero at padded steps.
    pub spatial: Tensor<f32>,
    /// `B * T` action ids, 0 at padded steps.
    pub actions: Vec<usize>,
    /// One result per replay.
    pub results: Vec<u8>,
    /// `B * T`, `true` at real steps.
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn unmasked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Model input for item `b`, restricted to its real steps.
    pub fn input(&self, b: usize) -> WindowInput<f32> {
        let w = &self.windows[b];
        let t = w.window_len;
        let g = self.global.shape()[2];
        let s: usize = self.spatial.shape()[2..].iter().product();
        let mut sshape = vec![w.len];
        sshape.extend_from_slice(&self.spatial.shape()[2..]);
        let global = self.global.data()[b * t * g..(b * t + w.len) * g].to_vec();
        let spatial = self.spatial.data()[b * t * s..(b * t + w.len) * s].to_vec();
        WindowInput::new(
            Tensor::from_vec(vec![w.len, g], global).expect("window slice"),
            Tensor::from_vec(sshape, spatial).expect("window slice"),
        )
    }

    /// Ground-truth actions of item `b`'s real steps.
    pub fn item_actions(&self, b: usize) -> &[usize] {
        let w = &self.windows[b];
        &self.actions[b * w.window_len..b * w.window_len + w.len]
    }
}

/// Materializes one batch from dataset windows.
pub fn collate(ds: &Dataset, windows: Vec<Window>) -> Batch {
    let m = &ds.manifest;
    let t = windows.first().map_or(0, |w| w.window_len);
    let (g, s) = (m.global_dim, m.spatial_shape.iter().product::<usize>());
    let b = windows.len();
    let mut global = vec![0f32; b * t * g];
    let mut spatial = vec![0f32; b * t * s];
    let mut actions = vec![0usize; b * t];
    let mut mask = vec![false; b * t];
    let mut results = Vec::with_capacity(b);
    for (i, w) in windows.iter().enumerate() {
        let r = &ds.replays[w.replay];
        results.push(r.result);
        for (k, step) in r.steps[w.steps()].iter().enumerate() {
            let row = i * t + k;
            global[row * g..(row + 1) * g].copy_from_slice(&step.global);
            for (dst, v) in spatial[row * s..(row + 1) * s].iter_mut().zip(step.spatial_f32()) {
                *dst = v;
            }
            actions[row] = step.action as usize;
            mask[row] = true;
        }
    }
    let [c, h, wd] = m.spatial_shape;
    Batch {
        window_index: windows.first().map_or(0, |w| w.index),
        global: Tensor::from_vec(vec![b, t, g], global).expect("collate"),
        spatial: Tensor::from_vec(vec![b, t, c, h, wd], spatial).expect("collate"),
        actions,
        results,
        mask,
        windows,
    }
}

/// Deterministic batch stream for one epoch.
///
/// Replay order is shuffled from `(seed, epoch)`, cut into groups of
/// `batch_replays`, and each group yields one batch per window index holding
/// the replays that reach that index.
pub fn make_batches(
    ds: &Dataset,
    split: Split,
    batch_replays: usize,
    window_len: usize,
    seed: u64,
    epoch: usize,
) -> Result<impl Iterator<Item = Batch> + '_> {
    if batch_replays == 0 {
        return Err(Error::config("batch_replays", "must be at least 1"));
    }
    if window_len == 0 {
        return Err(Error::config("window_len", "must be at least 1"));
    }
    let mut order = ds.split_indices(split);
    if order.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);

    let mut plan: Vec<Vec<Window>> = Vec::new();
    for group in order.chunks(batch_replays) {
        let tiled: Vec<Vec<Window>> =
            group.iter().map(|&i| window_replay(i, ds.replays[i].len(), window_len)).collect();
        let depth = tiled.iter().map(Vec::len).max().unwrap_or(0);
        for k in 0..depth {
            plan.push(tiled.iter().filter_map(|ws| ws.get(k).copied()).collect());
        }
    }
    Ok(plan.into_iter().map(move |ws| collate(ds, ws)))
}
