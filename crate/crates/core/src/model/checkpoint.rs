// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model checkpoints: `model.json` (schema + parameter index), `vocab.txt`,
//! and one tensor blob per parameter under `params/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSchema, Vocab};
use crate::error::{Error, Result};
use crate::serialization::fnv1a64;
use crate::tensor::blob;

pub const MANIFEST: &str = "model.json";
pub const VOCAB: &str = "vocab.txt";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    fnv1a64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    schema: ModelSchema,
    params: Vec<ParamEntry>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save(model: &Model, dir: &Path) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let mut entries = Vec::new();
    for (name, t) in model.params() {
        let bytes = blob::encode(t)?;
        let file = format!("params/{name}.pvt");
        write(&dir.join(&file), &bytes)?;
        entries.push(ParamEntry {
            name: name.clone(),
            file,
            fnv1a64: format!("{:016x}", fnv1a64(&bytes)),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        schema: model.schema().clone(),
        params: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write(&dir.join(MANIFEST), &json)?;
    model.vocab().save(&dir.join(VOCAB))
}

pub fn load(dir: &Path) -> Result<Model> {
    let raw = read(&dir.join(MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| Error::MalformedDocument(format!("{MANIFEST}: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(manifest.format_version));
    }
    let mut params = BTreeMap::new();
    for entry in &manifest.params {
        let bytes = read(&dir.join(&entry.file))?;
        if format!("{:016x}", fnv1a64(&bytes)) != entry.fnv1a64 {
            return Err(Error::ChecksumMismatch(entry.file.clone()));
        }
        params.insert(entry.name.clone(), blob::decode(&bytes)?);
    }
    let vocab = Vocab::load(&dir.join(VOCAB))?;
    Model::from_parts(manifest.schema, vocab, params)
}

/// Schema stored in a checkpoint, without loading weights.
pub fn load_schema(dir: &Path) -> Result<ModelSchema> {
    let raw = read(&dir.join(MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| Error::MalformedDocument(format!("{MANIFEST}: {e}")))?;
    Ok(manifest.schema)
}
