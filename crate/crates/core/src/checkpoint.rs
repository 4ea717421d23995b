//! Bit-exact model checkpoints.
//!
//! A checkpoint is a pair of files sharing a prefix: `<prefix>.json` holds a
//! manifest (parameter names, shapes, byte offsets, plus scalar extras such
//! as the annealing temperature), and `<prefix>.bin` holds the raw values as
//! little-endian f64. Round trips are bit-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::optim::Param;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset_bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    extras: BTreeMap<String, f64>,
    params: Vec<ManifestEntry>,
}

/// Writes `<prefix>.json` and `<prefix>.bin`.
pub fn save(prefix: &Path, params: &[Param], extras: &BTreeMap<String, f64>) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut blob: Vec<u8> = Vec::new();
    for p in params {
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset_bytes: blob.len(),
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { dtype: "f64".into(), extras: extras.clone(), params: entries };
    fs::write(with_ext(prefix, "json"), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(with_ext(prefix, "bin"), blob)?;
    Ok(())
}

/// Reads a checkpoint written by [`save`].
pub fn load(prefix: &Path) -> Result<(Vec<Param>, BTreeMap<String, f64>)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(with_ext(prefix, "json"))?)?;
    if manifest.dtype != "f64" {
        return Err(Error::Data(format!("unsupported checkpoint dtype {}", manifest.dtype)));
    }
    let blob = fs::read(with_ext(prefix, "bin"))?;
    let mut params = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let end = e.offset_bytes + n * 8;
        if end > blob.len() {
            return Err(Error::Data(format!("checkpoint blob truncated for {}", e.name)));
        }
        let data = blob[e.offset_bytes..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.push(Param::new(e.name.clone(), Tensor::new(e.shape.clone(), data)));
    }
    Ok((params, manifest.extras))
}

fn with_ext(prefix: &Path, ext: &str) -> std::path::PathBuf {
    let mut name = prefix.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(ext);
    prefix.with_file_name(name)
}
