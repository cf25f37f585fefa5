//! Replay data model, on-disk formats, synthetic corpora and batching.

mod batch;
mod format;
mod manifest;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{collate, make_batches, window_replay, Batch, Window};
pub use format::{decode_replay, encode_replay, read_replay, write_replay, FORMAT_VERSION, MAGIC};
pub use manifest::{assign_splits, Dataset, DatasetManifest, ReplayEntry, Split, SplitCounts, MANIFEST_FILE};
pub use synthetic::{generate_synthetic_corpus, GeneratorSpec};

/// Tolerance for the `[0, 1]` feature range.
pub const RANGE_TOLERANCE: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Race {
    Terran,
    Protoss,
    Zerg,
}

impl Race {
    /// Size of the race's build/train/research action vocabulary.
    pub fn action_count(self) -> usize {
        match self {
            Race::Terran => 75,
            Race::Protoss => 61,
            Race::Zerg => 74,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Race::Terran => 'T',
            Race::Protoss => 'P',
            Race::Zerg => 'Z',
        }
    }

    fn code(self) -> u8 {
        match self {
            Race::Terran => 0,
            Race::Protoss => 1,
            Race::Zerg => 2,
        }
    }

    fn from_code(code: u8) -> Option<Race> {
        match code {
            0 => Some(Race::Terran),
            1 => Some(Race::Protoss),
            2 => Some(Race::Zerg),
            _ => None,
        }
    }

    fn from_letter(c: char) -> Option<Race> {
        match c.to_ascii_uppercase() {
            'T' => Some(Race::Terran),
            'P' => Some(Race::Protoss),
            'Z' => Some(Race::Zerg),
            _ => None,
        }
    }
}

/// Player race versus opponent race. Actions are those of the player.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Matchup {
    pub player: Race,
    pub opponent: Race,
}

impl Matchup {
    pub fn new(player: Race, opponent: Race) -> Self {
        Matchup { player, opponent }
    }

    pub fn action_count(self) -> usize {
        self.player.action_count()
    }

    /// One byte: player code in the high nibble, opponent in the low.
    pub fn to_byte(self) -> u8 {
        (self.player.code() << 4) | self.opponent.code()
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match (Race::from_code(b >> 4), Race::from_code(b & 0x0f)) {
            (Some(p), Some(o)) => Ok(Matchup::new(p, o)),
            _ => Err(Error::Format(format!("invalid race pair byte {b:#04x}"))),
        }
    }

    /// Replay count of the matchup in the public MSC release, where listed.
    pub fn reference_replay_count(self) -> Option<usize> {
        let mut pair = [self.player.code(), self.opponent.code()];
        pair.sort_unstable();
        match pair {
            [0, 0] => Some(4897),
            [0, 1] => Some(7894),
            [0, 2] => Some(9996),
            [1, 1] => Some(4334),
            [1, 2] => Some(6509),
            [2, 2] => Some(2989),
            _ => None,
        }
    }
}

impl fmt::Display for Matchup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}v{}", self.player.letter(), self.opponent.letter())
    }
}

impl FromStr for Matchup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let c: Vec<char> = s.chars().collect();
        let bad = || Error::config("matchup", format!("expected e.g. \"TvZ\", got {s:?}"));
        if c.len() != 3 || !c[1].eq_ignore_ascii_case(&'v') {
            return Err(bad());
        }
        match (Race::from_letter(c[0]), Race::from_letter(c[2])) {
            (Some(p), Some(o)) => Ok(Matchup::new(p, o)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Matchup {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Matchup {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `round(v * 255)` for `v` in `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(q: u8) -> f32 {
    q as f32 / 255.0
}

/// One time step. Spatial values are held quantized, exactly as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayStep {
    pub global: Vec<f32>,
    pub spatial: Vec<u8>,
    pub action: u16,
}

impl ReplayStep {
    /// Quantizes `spatial`, rejecting values outside `[0, 1]`.
    pub fn new(global: Vec<f32>, spatial: &[f32], action: u16) -> Result<Self> {
        check_range("global", &global)?;
        check_range("spatial", spatial)?;
        Ok(ReplayStep { global, spatial: spatial.iter().map(|&v| quantize(v)).collect(), action })
    }

    pub fn spatial_f32(&self) -> impl Iterator<Item = f32> + '_ {
        self.spatial.iter().map(|&q| dequantize(q))
    }
}

fn check_range(name: &str, values: &[f32]) -> Result<()> {
    match values.iter().position(|&v| !(-RANGE_TOLERANCE..=1.0 + RANGE_TOLERANCE).contains(&v)) {
        Some(i) => Err(Error::Data(format!("{name} feature {i} = {} outside [0, 1]", values[i]))),
        None => Ok(()),
    }
}

/// One game.
#[derive(Clone, Debug, PartialEq)]
pub struct Replay {
    pub matchup: Matchup,
    /// 1 for a win of the player, 0 for a loss.
    pub result: u8,
    pub global_dim: usize,
    pub spatial_shape: [usize; 3],
    pub action_count: usize,
    pub steps: Vec<ReplayStep>,
}

impl Replay {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn spatial_len(&self) -> usize {
        self.spatial_shape.iter().product()
    }

    /// Checks every invariant of the in-memory replay.
    pub fn validate(&self) -> Result<()> {
        if self.result > 1 {
            return Err(Error::Data(format!("result must be 0 or 1, got {}", self.result)));
        }
        if self.action_count == 0 || self.action_count > u16::MAX as usize {
            return Err(Error::Data(format!("action_count {} out of range", self.action_count)));
        }
        for (t, s) in self.steps.iter().enumerate() {
            if s.global.len() != self.global_dim || s.spatial.len() != self.spatial_len() {
                return Err(Error::Data(format!("step {t}: feature sizes do not match the header")));
            }
            if s.action as usize >= self.action_count {
                return Err(Error::Data(format!(
                    "step {t}: action {} outside vocabulary of {}",
                    s.action, self.action_count
                )));
            }
            check_range("global", &s.global).map_err(|e| Error::Data(format!("step {t}: {e}")))?;
        }
        Ok(())
    }
}
