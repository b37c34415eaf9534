//! On-disk parameter snapshots: `manifest.json` plus a little-endian `params.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub path: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub byte_order: String,
    pub rng_seed: u64,
    /// In blob order (lexicographic by path).
    pub params: Vec<ParamEntry>,
    /// Caller-defined description of the model the parameters belong to.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn save(dir: &Path, store: &ParameterStore, metadata: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        dtype: "f64".into(),
        byte_order: "little".into(),
        rng_seed: store.seed(),
        params: store
            .iter()
            .map(|(path, t)| ParamEntry {
                path: path.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        metadata,
    };
    let mut blob = Vec::with_capacity(store.num_scalars() * 8);
    for (_, t) in store.iter() {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&mpath, e))?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(ParameterStore, CheckpointManifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;
    if manifest.dtype != "f64" || manifest.byte_order != "little" {
        return Err(Error::Config(format!(
            "unsupported checkpoint encoding {}/{}",
            manifest.dtype, manifest.byte_order
        )));
    }
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let total: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 8 {
        return Err(Error::Config(format!(
            "{} holds {} bytes but the manifest describes {} values",
            bpath.display(),
            blob.len(),
            total
        )));
    }
    let mut store = ParameterStore::new(manifest.rng_seed);
    let mut values = blob
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        store.insert(entry.path.clone(), Tensor::from_vec(&entry.shape, data));
    }
    Ok((store, manifest))
}
