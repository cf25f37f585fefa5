//! Planted-signal corpora shaped like the real replay data.
//!
//! Two learnable mechanisms are planted:
//!
//! * **Outcome.** A latent win bit `y` is drawn per replay. Global feature 0
//!   carries it at step `w * window_len + signal_step` of every window span
//!   (above 0.5 for a win, below for a loss) and is uniform noise elsewhere.
//!   The stored result is `y` flipped with probability `noise`, so an oracle
//!   reading that one feature is right with probability `1 - noise`.
//! * **Build order.** Actions follow a Markov chain: with probability
//!   `follow_prob` the next action is a fixed successor of the previous one,
//!   otherwise it is drawn from a skewed base distribution (weights
//!   `(rank + 1)^-1.5` over a shuffled action order). The successor table and
//!   the base distribution both depend on a sticky binary mode visible as the
//!   mean level of spatial channel 0. The previous
//!   action is exposed in the trailing global features (one-hot when it fits,
//!   binary code otherwise).

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::path::Path;

use super::{Dataset, DatasetManifest, Matchup, Race, Replay, ReplayStep};
use crate::error::{Error, Result};

const MODE_FLIP_PROB: f64 = 0.1;
/// Exponent of the rank weights of the base action distribution.
const BASE_SKEW: f64 = 1.5;

/// Action dynamics of one mode.
struct Chain {
    successor: Vec<u16>,
    base: WeightedIndex<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub matchup: Matchup,
    pub replays: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Probability that a replay's stored result disagrees with its planted bit.
    pub noise: f64,
    /// Offset inside each window span where the outcome feature is planted.
    pub signal_step: usize,
    pub window_len: usize,
    pub global_dim: usize,
    pub spatial_shape: [usize; 3],
    pub follow_prob: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    /// The desk-scale corpus: 600 TvT replays of 20 to 40 steps.
    fn default() -> Self {
        GeneratorSpec {
            matchup: Matchup::new(Race::Terran, Race::Terran),
            replays: 600,
            len_min: 20,
            len_max: 40,
            noise: 0.02,
            signal_step: 0,
            window_len: 10,
            global_dim: 101,
            spatial_shape: [13, 8, 8],
            follow_prob: 0.7,
            seed: 0,
        }
    }
}

/// Where the previous action lives in the global vector.
#[derive(Clone, Copy, Debug, PartialEq)]
enum ActionCode {
    OneHot { offset: usize },
    Binary { offset: usize, bits: usize },
}

impl GeneratorSpec {
    pub fn action_count(&self) -> usize {
        self.matchup.action_count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.replays == 0 {
            return Err(Error::config("replays", "must be at least 1"));
        }
        if self.window_len == 0 {
            return Err(Error::config("window_len", "must be at least 1"));
        }
        if self.len_min < self.window_len {
            return Err(Error::config(
                "len_min",
                format!("{} is shorter than one window of {}", self.len_min, self.window_len),
            ));
        }
        if self.len_max < self.len_min {
            return Err(Error::config("len_max", format!("{} is below len_min {}", self.len_max, self.len_min)));
        }
        if self.signal_step >= self.window_len {
            return Err(Error::config(
                "signal_step",
                format!("{} lies outside a window of {}", self.signal_step, self.window_len),
            ));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::config("noise", format!("{} not in [0, 0.5]", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.follow_prob) {
            return Err(Error::config("follow_prob", format!("{} not in [0, 1]", self.follow_prob)));
        }
        if self.spatial_shape.contains(&0) {
            return Err(Error::config("spatial_shape", "extents must be positive"));
        }
        if self.spatial_shape.iter().any(|&d| d > u16::MAX as usize) || self.global_dim > u16::MAX as usize {
            return Err(Error::config("spatial_shape", "extents must fit in 16 bits"));
        }
        self.action_code()?;
        Ok(())
    }

    fn action_code(&self) -> Result<ActionCode> {
        let a = self.action_count();
        let room = self.global_dim.saturating_sub(1);
        let bits = usize::BITS as usize - a.leading_zeros() as usize;
        if room >= a {
            Ok(ActionCode::OneHot { offset: self.global_dim - a })
        } else if room >= bits {
            Ok(ActionCode::Binary { offset: self.global_dim - bits, bits })
        } else {
            Err(Error::config(
                "global_dim",
                format!("{} leaves no room to encode {a} previous actions", self.global_dim),
            ))
        }
    }

    /// Successor tables and base distributions for mode 0 and mode 1.
    fn chains(&self) -> [Chain; 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let a = self.action_count() as u16;
        let mut perm = || {
            let mut p: Vec<u16> = (0..a).collect();
            p.shuffle(&mut rng);
            p
        };
        let (t0, t1, r0, r1) = (perm(), perm(), perm(), perm());
        let chain = |successor: Vec<u16>, ranking: Vec<u16>| {
            let mut weights = vec![0.0; a as usize];
            for (rank, &action) in ranking.iter().enumerate() {
                weights[action as usize] = (rank as f64 + 1.0).powf(-BASE_SKEW);
            }
            Chain { successor, base: WeightedIndex::new(weights).expect("positive weights") }
        };
        [chain(t0, r0), chain(t1, r1)]
    }

    /// Generates every replay in memory. Replay `i` depends only on
    /// `(seed, i)`.
    pub fn generate(&self) -> Result<Vec<Replay>> {
        self.validate()?;
        let chains = self.chains();
        let code = self.action_code()?;
        (0..self.replays).map(|i| self.generate_one(i, &chains, code)).collect()
    }

    fn generate_one(&self, index: usize, chains: &[Chain; 2], code: ActionCode) -> Result<Replay> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        let a = self.action_count();
        let [c, h, w] = self.spatial_shape;
        let plane = h * w;

        let latent: bool = rng.gen_bool(0.5);
        let flipped = rng.gen_bool(self.noise);
        let result = u8::from(latent != flipped);
        let len = rng.gen_range(self.len_min..=self.len_max);
        let mut mode = usize::from(rng.gen_bool(0.5));
        let mut prev: Option<u16> = None;
        let code_start = match code {
            ActionCode::OneHot { offset } | ActionCode::Binary { offset, .. } => offset,
        };

        let mut steps = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 && rng.gen_bool(MODE_FLIP_PROB) {
                mode ^= 1;
            }
            let mut global = vec![0f32; self.global_dim];
            global[0] = if t % self.window_len == self.signal_step {
                if latent {
                    rng.gen_range(0.8..=1.0)
                } else {
                    rng.gen_range(0.0..=0.2)
                }
            } else {
                rng.gen()
            };
            for (j, g) in global.iter_mut().enumerate().take(code_start).skip(1) {
                *g = if j % 2 == 0 {
                    let drift = t as f32 / self.len_max as f32;
                    (drift + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)
                } else {
                    rng.gen()
                };
            }
            if let Some(p) = prev {
                match code {
                    ActionCode::OneHot { offset } => global[offset + p as usize] = 1.0,
                    ActionCode::Binary { offset, bits } => {
                        for b in 0..bits {
                            global[offset + b] = ((p as usize + 1) >> b & 1) as f32;
                        }
                    }
                }
            }

            let level = if mode == 1 { 0.75f32 } else { 0.25 };
            let mut spatial = vec![0f32; c * plane];
            for (k, v) in spatial.iter_mut().enumerate() {
                *v = if k < plane { (level + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0) } else { rng.gen() };
            }

            let action = match prev {
                Some(p) if rng.gen_bool(self.follow_prob) => chains[mode].successor[p as usize],
                _ => chains[mode].base.sample(&mut rng) as u16,
            };
            steps.push(ReplayStep::new(global, &spatial, action)?);
            prev = Some(action);
        }
        Ok(Replay {
            matchup: self.matchup,
            result,
            global_dim: self.global_dim,
            spatial_shape: self.spatial_shape,
            action_count: a,
            steps,
        })
    }

    /// The planted-bit reading an oracle would make for `replay`.
    pub fn oracle_result(&self, replay: &Replay) -> u8 {
        u8::from(replay.steps[self.signal_step].global[0] > 0.5)
    }

    /// In-memory dataset with splits assigned from the seed.
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::from_replays(self.generate()?, Some(self.clone()), self.seed)
    }
}

/// Generates the corpus described by `spec` and writes it under `out_dir`.
pub fn generate_synthetic_corpus(spec: &GeneratorSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let ds = spec.dataset()?;
    ds.save(out_dir)?;
    Ok(ds.manifest)
}
