// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bundles: a directory holding `manifest.json`, one tensor blob per
//! intervention parameter or constant source, and optionally the model
//! checkpoint under `model/`.
//!
//! Output is deterministic: saving the same state twice produces
//! byte-identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{ConstantSource, IntervenableConfig, IntervenableModel, NoiseOptions};
use crate::error::{Error, Result};
use crate::interventions::Registry;
use crate::model::{checkpoint, Model};
use crate::tensor::blob;

pub const MANIFEST: &str = "manifest.json";
pub const MODEL_DIR: &str = "model";
pub const FORMAT_VERSION: u32 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub intervention: usize,
    pub field: String,
    pub fnv1a64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub schema_digest: String,
    pub config: Value,
    pub blobs: Vec<BlobEntry>,
    pub includes_model: bool,
}

pub fn blob_name(intervention: usize, field: &str) -> String {
    format!("intervention_{intervention}_{field}.pvt")
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write `pv` to `dir`, creating it if needed.
pub fn save_bundle(pv: &IntervenableModel, dir: &Path, include_model_weights: bool) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut config = pv.config().clone();
    let mut blobs = Vec::new();
    let mut put = |i: usize, field: &str, bytes: Vec<u8>| -> Result<String> {
        let file = blob_name(i, field);
        write(&dir.join(&file), &bytes)?;
        blobs.push(BlobEntry {
            file: file.clone(),
            intervention: i,
            field: field.to_string(),
            fnv1a64: hex(fnv1a64(&bytes)),
        });
        Ok(file)
    };
    for (i, spec) in config.interventions.iter_mut().enumerate() {
        if let Some(params) = pv.rotation(i) {
            for (field, t) in params.tensors() {
                put(i, field, blob::encode(t)?)?;
            }
            if let Some(t) = params.temperature() {
                spec.temperature = Some(t);
            }
        }
        if let Some(c) = pv.constant(i) {
            let file = put(i, "constant_source", blob::encode(c)?)?;
            spec.constant_source = Some(ConstantSource::Blob(file));
        }
        if let Some(n) = pv.noise_spec(i) {
            spec.noise = Some(NoiseOptions {
                scale: Some(n.scale),
                seed: n.seed,
            });
        }
    }
    if include_model_weights {
        checkpoint::save(&pv.model().with_grad(false), &dir.join(MODEL_DIR))?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        schema_digest: pv.model().schema().digest(),
        config: config.to_document(),
        blobs,
        includes_model: include_model_weights,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write(&dir.join(MANIFEST), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let raw = read(&dir.join(MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| Error::MalformedDocument(format!("{MANIFEST}: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(manifest.format_version));
    }
    Ok(manifest)
}

/// Load a bundle. `model` overrides stored weights and is required when the
/// bundle has none; its schema must match the one the bundle was saved with.
pub fn load_bundle(dir: &Path, model: Option<Model>, registry: &Registry) -> Result<IntervenableModel> {
    let manifest = read_manifest(dir)?;
    let model = match model {
        Some(m) => m,
        None if manifest.includes_model => checkpoint::load(&dir.join(MODEL_DIR))?,
        None => {
            return Err(Error::InvalidArgument(
                "bundle holds no model weights; supply a model".into(),
            ))
        }
    };
    let got = model.schema().digest();
    if got != manifest.schema_digest {
        return Err(Error::SchemaDigestMismatch {
            expected: manifest.schema_digest,
            got,
        });
    }
    let mut tensors = Vec::with_capacity(manifest.blobs.len());
    for entry in &manifest.blobs {
        let bytes = read(&dir.join(&entry.file))?;
        if hex(fnv1a64(&bytes)) != entry.fnv1a64 {
            return Err(Error::ChecksumMismatch(entry.file.clone()));
        }
        tensors.push((entry, blob::decode(&bytes)?));
    }
    let mut config = IntervenableConfig::parse_with(&manifest.config, registry)?;
    for (entry, t) in &tensors {
        if entry.field == "constant_source" {
            let spec = config
                .interventions
                .get_mut(entry.intervention)
                .ok_or_else(|| Error::MalformedDocument(format!("blob {} names a missing intervention", entry.file)))?;
            spec.constant_source = Some(ConstantSource::Values(t.to_f64_vec()));
        }
    }
    if let Some(spec) = config.interventions.iter().find(|s| matches!(s.constant_source, Some(ConstantSource::Blob(_)))) {
        return Err(Error::MalformedDocument(format!(
            "constant source of {} has no blob entry",
            spec.component
        )));
    }
    let mut pv = IntervenableModel::wrap_with(model, config, registry.clone(), 0)?;
    for (entry, t) in &tensors {
        if entry.field == "constant_source" {
            continue;
        }
        pv.rotation_mut(entry.intervention)
            .ok_or_else(|| Error::MalformedDocument(format!("blob {} names an untrainable intervention", entry.file)))?
            .set_tensor(&entry.field, t)?;
    }
    Ok(pv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
