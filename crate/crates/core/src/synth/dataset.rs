use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_episode, Episode, OodAxis, WorldConfig};
use crate::error::{Error, Result};
use crate::numerics::{blob, Rng};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "episodes.cc3t";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Where one episode lives inside the blob file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    pub ood_axis: OodAxis,
    pub split: Split,
    /// Byte offset of the frames tensor; the actions tensor follows it.
    pub offset: u64,
    pub frames_bytes: u64,
    pub actions_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub cfg: WorldConfig,
    pub seed: u64,
    pub blob: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

/// Episodes held in memory together with their manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<Episode>,
}

/// Seed of episode `index` in a dataset generated from `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    Rng::new(seed).derive(index as u64).seed()
}

/// Number of test episodes under a 90/10 split; at least one when `n > 1`.
fn test_count(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        n.div_ceil(10)
    }
}

impl Dataset {
    /// Generates `n` episodes in memory; the last tenth forms the test split.
    pub fn generate(cfg: &WorldConfig, n: usize, seed: u64) -> Result<Dataset> {
        Self::generate_split(cfg, n, test_count(n), seed)
    }

    /// Generates `n` episodes of which the last `n_test` form the test split.
    pub fn generate_split(cfg: &WorldConfig, n: usize, n_test: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Config("dataset must contain at least one episode".into()));
        }
        if n_test > n {
            return Err(Error::Config(format!("{n_test} test episodes out of {n}")));
        }
        cfg.validate()?;
        let episodes = (0..n)
            .into_par_iter()
            .map(|i| generate_episode(cfg, episode_seed(seed, i)))
            .collect::<Result<Vec<_>>>()?;
        let mut offset = 0u64;
        let entries = episodes
            .iter()
            .enumerate()
            .map(|(i, ep)| {
                let frames_bytes = blob::encoded_len(&ep.frames) as u64;
                let actions_bytes = blob::encoded_len(&ep.actions) as u64;
                let entry = ManifestEntry {
                    seed: ep.seed,
                    ood_axis: ep.ood_axis,
                    split: if i >= n - n_test { Split::Test } else { Split::Train },
                    offset,
                    frames_bytes,
                    actions_bytes,
                };
                offset += frames_bytes + actions_bytes;
                entry
            })
            .collect();
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            cfg: cfg.clone(),
            seed,
            blob: BLOB_FILE.into(),
            entries,
        };
        Ok(Dataset { manifest, episodes })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().zip(&self.manifest.entries).filter(move |(_, e)| e.split == split).map(|(ep, _)| ep)
    }

    /// Writes `manifest.json` and the episode blob into `dir`.
    pub fn save(&self, dir: &Path, overwrite: bool) -> Result<()> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() && !overwrite {
            return Err(Error::OutputExists(manifest_path));
        }
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(&self.manifest.blob))?);
        for ep in &self.episodes {
            blob::write_tensor(&mut w, &ep.frames)?;
            blob::write_tensor(&mut w, &ep.actions)?;
        }
        w.flush()?;
        fs::write(manifest_path, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::MissingArtifact(manifest_path));
        }
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
        }
        let blob_path: PathBuf = dir.join(&manifest.blob);
        if !blob_path.exists() {
            return Err(Error::MissingArtifact(blob_path));
        }
        let mut file = File::open(blob_path)?;
        let mut episodes = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            file.seek(SeekFrom::Start(e.offset))?;
            let mut buf = vec![0u8; (e.frames_bytes + e.actions_bytes) as usize];
            file.read_exact(&mut buf)?;
            let (f, a) = buf.split_at(e.frames_bytes as usize);
            let frames = blob::from_bytes(f)?;
            let actions = blob::from_bytes(a)?;
            if frames.shape().first() != actions.shape().first() {
                return Err(Error::Format(format!("episode {} has mismatched frame and action counts", e.seed)));
            }
            episodes.push(Episode { frames, actions, seed: e.seed, ood_axis: e.ood_axis });
        }
        Ok(Dataset { manifest, episodes })
    }
}

/// Generates `n` episodes and writes them to `dir`.
pub fn generate_dataset(cfg: &WorldConfig, n: usize, seed: u64, dir: &Path, overwrite: bool) -> Result<DatasetManifest> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !overwrite {
        return Err(Error::OutputExists(manifest_path));
    }
    let ds = Dataset::generate(cfg, n, seed)?;
    ds.save(dir, overwrite)?;
    Ok(ds.manifest)
}
