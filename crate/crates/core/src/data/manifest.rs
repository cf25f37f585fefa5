use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::format::{decode_replay, encode_replay};
use super::{GeneratorSpec, Matchup, Replay};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("split", format!("expected train, val or test, got {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 7:1:2 partition of `n`: validation and test sizes are rounded, training
    /// takes the remainder.
    pub fn for_total(n: usize) -> Self {
        let val = (n as f64 / 10.0).round() as usize;
        let test = (n as f64 / 5.0).round() as usize;
        SplitCounts { train: n - val - test, val, test }
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Seeded assignment of `n` replays to splits.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let counts = SplitCounts::for_total(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001));
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < counts.val {
            Split::Val
        } else if rank < counts.val + counts.test {
            Split::Test
        } else {
            Split::Train
        };
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub split: Split,
    pub steps: usize,
    pub result: u8,
    /// CRC32 of the whole file, lowercase hex.
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub matchup: Matchup,
    pub counts: SplitCounts,
    pub global_dim: usize,
    pub spatial_shape: [usize; 3],
    pub action_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
    pub files: Vec<ReplayEntry>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path(path.as_ref());
        let text = fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
        }
        m.check_counts()?;
        Ok(m)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }

    fn check_counts(&self) -> Result<()> {
        for split in Split::ALL {
            let n = self.files.iter().filter(|f| f.split == split).count();
            if n != self.counts.get(split) {
                return Err(Error::Data(format!(
                    "manifest lists {n} {split} files but counts say {}",
                    self.counts.get(split)
                )));
            }
        }
        Ok(())
    }

    /// Stable identifier of the replays in one split.
    pub fn fingerprint(&self, split: Split) -> String {
        let mut h = crc32fast::Hasher::new();
        for f in self.files.iter().filter(|f| f.split == split) {
            h.update(f.id.as_bytes());
            h.update(f.checksum.as_bytes());
        }
        format!("{}:{split}:{:08x}", self.matchup, h.finalize())
    }
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

/// A manifest together with its decoded replays (same order as `files`).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub replays: Vec<Replay>,
}

impl Dataset {
    /// Loads and verifies every replay listed in the manifest.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mpath = manifest_path(path.as_ref());
        let manifest = DatasetManifest::load(&mpath)?;
        let root = mpath.parent().map(Path::to_path_buf).unwrap_or_default();
        let replays = manifest
            .files
            .par_iter()
            .map(|entry| {
                let file = root.join(&entry.path);
                let bytes = fs::read(&file).map_err(|e| Error::io_at(&file, e))?;
                let sum = format!("{:08x}", crc32fast::hash(&bytes));
                if sum != entry.checksum {
                    return Err(Error::Format(format!(
                        "{}: checksum {sum} does not match manifest {}",
                        file.display(),
                        entry.checksum
                    )));
                }
                decode_replay(&bytes).map_err(|e| match e {
                    Error::Data(m) => Error::Data(format!("replay {}: {m}", entry.id)),
                    Error::Format(m) => Error::Format(format!("replay {}: {m}", entry.id)),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(manifest, replays)
    }

    /// Builds a dataset from replays already in memory, assigning splits from
    /// `seed` and computing the checksums the files would carry.
    pub fn from_replays(replays: Vec<Replay>, generator: Option<GeneratorSpec>, seed: u64) -> Result<Self> {
        let first = replays.first().ok_or_else(|| Error::Data("no replays".into()))?;
        let splits = assign_splits(replays.len(), seed);
        let files = replays
            .iter()
            .zip(&splits)
            .enumerate()
            .map(|(i, (r, &split))| {
                let bytes = encode_replay(r)?;
                Ok(ReplayEntry {
                    id: format!("replay_{i:05}"),
                    path: format!("replays/replay_{i:05}.mscr"),
                    split,
                    steps: r.len(),
                    result: r.result,
                    checksum: format!("{:08x}", crc32fast::hash(&bytes)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            matchup: first.matchup,
            counts: SplitCounts::for_total(replays.len()),
            global_dim: first.global_dim,
            spatial_shape: first.spatial_shape,
            action_count: first.action_count,
            generator,
            files,
        };
        Self::from_parts(manifest, replays)
    }

    fn from_parts(manifest: DatasetManifest, replays: Vec<Replay>) -> Result<Self> {
        for (entry, r) in manifest.files.iter().zip(&replays) {
            if r.global_dim != manifest.global_dim
                || r.spatial_shape != manifest.spatial_shape
                || r.action_count != manifest.action_count
                || r.matchup != manifest.matchup
            {
                return Err(Error::Data(format!("replay {} does not match the manifest header", entry.id)));
            }
            if r.len() != entry.steps || r.result != entry.result {
                return Err(Error::Data(format!("replay {} disagrees with its manifest entry", entry.id)));
            }
        }
        Ok(Dataset { manifest, replays })
    }

    /// Writes replay files and the manifest under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("replays"))?;
        self.manifest.files.par_iter().zip(&self.replays).try_for_each(|(entry, r)| -> Result<()> {
            fs::write(dir.join(&entry.path), encode_replay(r)?)?;
            Ok(())
        })?;
        self.manifest.save(dir)
    }

    /// Indices (into `replays`) of one split, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.replays.len()).filter(|&i| self.manifest.files[i].split == split).collect()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.manifest.files[index].id
    }

    pub fn steps_in(&self, split: Split) -> usize {
        self.split_indices(split).iter().map(|&i| self.replays[i].len()).sum()
    }
}
