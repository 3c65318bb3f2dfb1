//! Checkpoints: a JSON header next to a file of concatenated `CC3T` blobs,
//! one per parameter in store order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{blob, ParamStore};

#[derive(Debug, Serialize, Deserialize)]
struct Envelope<H> {
    kind: String,
    header: H,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn header_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.json"))
}

pub fn weights_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.cc3t"))
}

/// Writes `{name}.json` and `{name}.cc3t` into `dir`.
pub fn save<H: Serialize>(dir: &Path, name: &str, kind: &str, header: &H, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let envelope = Envelope {
        kind: kind.to_string(),
        header,
        params: store
            .names()
            .iter()
            .zip(store.values())
            .map(|(n, t)| ParamEntry { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(weights_path(dir, name))?);
    for t in store.values() {
        blob::write_tensor(&mut w, t)?;
    }
    w.flush()?;
    fs::write(header_path(dir, name), serde_json::to_string_pretty(&envelope)?)?;
    Ok(())
}

/// Reads only the header of a checkpoint.
pub fn load_header<H: DeserializeOwned>(dir: &Path, name: &str, kind: &str) -> Result<H> {
    let path = header_path(dir, name);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let envelope: Envelope<H> = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if envelope.kind != kind {
        return Err(Error::Format(format!("{} holds a {} checkpoint, expected {kind}", path.display(), envelope.kind)));
    }
    Ok(envelope.header)
}

/// Loads weights into `store`, whose names and shapes must match the file.
pub fn load_weights(dir: &Path, name: &str, store: &mut ParamStore) -> Result<()> {
    let path = header_path(dir, name);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let envelope: Envelope<serde_json::Value> = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if envelope.params.len() != store.len()
        || envelope.params.iter().zip(store.names()).any(|(e, n)| &e.name != n)
    {
        return Err(Error::Format(format!("{} does not match the model architecture", path.display())));
    }
    let wpath = weights_path(dir, name);
    if !wpath.exists() {
        return Err(Error::MissingArtifact(wpath));
    }
    let mut r = BufReader::new(File::open(wpath)?);
    let values = (0..store.len()).map(|_| blob::read_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
    store.load_values(values)
}
