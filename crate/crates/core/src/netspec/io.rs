//! Directory format shared by checkpoints, task vectors, layer statistics
//! and exemplar sets: a canonical `manifest.json` next to one raw
//! little-endian row-major `f64` blob per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, NetworkSpec, TaskVector, UnitKind};
use crate::error::{Error, FormatError, Result};
use crate::json;
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub unit_id: String,
    pub kind: UnitKind,
    pub shape: [usize; 2],
    pub dtype: String,
    pub blob: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamManifest {
    pub format_version: u32,
    /// `checkpoint` or `task_vector`.
    pub content: String,
    pub spec: NetworkSpec,
    pub spec_hash: String,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(dir: &Path, spec: &NetworkSpec, ckpt: &Checkpoint) -> Result<()> {
    ckpt.ensure_spec(spec)?;
    save_params(dir, spec, "checkpoint", &ckpt.params)
}

pub fn load_checkpoint(dir: &Path) -> Result<(NetworkSpec, Checkpoint)> {
    let (spec, params) = load_params(dir, "checkpoint")?;
    let ckpt = Checkpoint::new(&spec, params).map_err(|e| malformed(dir, e.to_string()))?;
    Ok((spec, ckpt))
}

pub fn save_task_vector(dir: &Path, spec: &NetworkSpec, tv: &TaskVector) -> Result<()> {
    tv.ensure_spec(spec)?;
    save_params(dir, spec, "task_vector", &tv.deltas)
}

pub fn load_task_vector(dir: &Path) -> Result<(NetworkSpec, TaskVector)> {
    let (spec, deltas) = load_params(dir, "task_vector")?;
    let tv = TaskVector::new(&spec, deltas).map_err(|e| malformed(dir, e.to_string()))?;
    Ok((spec, tv))
}

fn save_params(
    dir: &Path,
    spec: &NetworkSpec,
    content: &str,
    params: &BTreeMap<String, Matrix>,
) -> Result<()> {
    prepare_dir(dir)?;
    let mut entries = Vec::new();
    // Spec order, so manifests read naturally.
    for u in spec.all_units() {
        let Some(m) = params.get(&u.unit_id) else {
            continue;
        };
        let blob = format!("{}.bin", u.unit_id);
        write_f64_blob(&dir.join(&blob), m.as_slice())?;
        entries.push(ParamEntry {
            unit_id: u.unit_id.clone(),
            kind: u.kind,
            shape: [m.rows(), m.cols()],
            dtype: "f64".into(),
            blob,
        });
    }
    let manifest = ParamManifest {
        format_version: FORMAT_VERSION,
        content: content.into(),
        spec: spec.clone(),
        spec_hash: spec.hash(),
        params: entries,
    };
    write_manifest(dir, &manifest)
}

fn load_params(dir: &Path, content: &str) -> Result<(NetworkSpec, BTreeMap<String, Matrix>)> {
    let manifest: ParamManifest = read_manifest(dir)?;
    let path = dir.join(MANIFEST);
    check_version(&path, manifest.format_version)?;
    if manifest.content != content {
        return Err(malformed(
            dir,
            format!("expected a {content} directory, found `{}`", manifest.content),
        ));
    }
    manifest
        .spec
        .validate()
        .map_err(|e| malformed(dir, e.to_string()))?;
    let hash = manifest.spec.hash();
    if hash != manifest.spec_hash {
        return Err(FormatError::HashMismatch {
            path,
            expected: hash,
            found: manifest.spec_hash,
        }
        .into());
    }
    let mut params = BTreeMap::new();
    for e in &manifest.params {
        let unit = manifest
            .spec
            .unit(&e.unit_id)
            .ok_or_else(|| malformed(dir, format!("param `{}` is not in the spec", e.unit_id)))?;
        if e.kind != unit.kind || e.shape != unit.shape || e.dtype != "f64" {
            return Err(malformed(
                dir,
                format!("param `{}` disagrees with its spec entry", e.unit_id),
            ));
        }
        let m = read_matrix(dir, &e.blob, &e.unit_id, e.shape[0], e.shape[1])?;
        if params.insert(e.unit_id.clone(), m).is_some() {
            return Err(malformed(dir, format!("param `{}` listed twice", e.unit_id)));
        }
    }
    Ok((manifest.spec, params))
}

pub(crate) fn malformed(dir: &Path, detail: String) -> Error {
    FormatError::MalformedManifest {
        path: dir.join(MANIFEST),
        detail,
    }
    .into()
}

pub(crate) fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(FormatError::MalformedManifest {
            path: path.to_path_buf(),
            detail: format!("unsupported format_version {version}"),
        }
        .into());
    }
    Ok(())
}

/// Creates `dir` and clears files a previous write may have left behind.
pub(crate) fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ours = path.extension().is_some_and(|x| x == "bin")
            || path.file_name().is_some_and(|n| n == MANIFEST);
        if ours && path.is_file() {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

pub(crate) fn write_manifest<T: Serialize>(dir: &Path, manifest: &T) -> Result<()> {
    json::write_canonical(&dir.join(MANIFEST), manifest)
}

pub(crate) fn read_manifest<T: DeserializeOwned>(dir: &Path) -> Result<T> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        FormatError::MalformedManifest {
            path,
            detail: e.to_string(),
        }
        .into()
    })
}

pub(crate) fn write_f64_blob(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_u32_blob(path: &Path, values: &[u32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(dir: &Path, blob: &str, width: usize) -> Result<(PathBuf, Vec<u8>)> {
    if blob.contains('/') || blob.contains('\\') || blob.starts_with("..") {
        return Err(malformed(dir, format!("blob name `{blob}` escapes the directory")));
    }
    let path = dir.join(blob);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() % width != 0 {
        return Err(FormatError::Truncated {
            path,
            len: bytes.len(),
            width,
        }
        .into());
    }
    Ok((path, bytes))
}

pub(crate) fn read_matrix(
    dir: &Path,
    blob: &str,
    field: &str,
    rows: usize,
    cols: usize,
) -> Result<Matrix> {
    let (path, bytes) = read_blob(dir, blob, 8)?;
    let n = bytes.len() / 8;
    if n != rows * cols {
        return Err(FormatError::ShapeMismatch {
            path,
            field: field.into(),
            expected: vec![rows, cols],
            found: n,
        }
        .into());
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Matrix::from_vec(rows, cols, values).map_err(|_| {
        FormatError::NonFinite {
            path,
            field: field.into(),
        }
        .into()
    })
}

pub(crate) fn read_u32s(dir: &Path, blob: &str, field: &str, len: usize) -> Result<Vec<u32>> {
    let (path, bytes) = read_blob(dir, blob, 4)?;
    if bytes.len() / 4 != len {
        return Err(FormatError::ShapeMismatch {
            path,
            field: field.into(),
            expected: vec![len],
            found: bytes.len() / 4,
        }
        .into());
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}
