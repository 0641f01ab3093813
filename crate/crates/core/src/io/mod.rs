//! On-disk formats.
//!
//! Every artifact is a directory holding a JSON manifest and one raw blob per
//! tensor under `tensors/`. Blobs are row-major little-endian `f32`; the
//! manifest records each tensor's shape and SHA-256 so that truncation and
//! silent corruption are caught on load.

mod compressed;
mod model;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use compressed::{
    load_compressed, parameter_report, save_compressed, CompressedManifest, KindParams,
    LayerParams, ParameterReport, RATIO_DEFINITION,
};
pub use model::{load_model, save_model, ModelManifest};

pub const TENSOR_DIR: &str = "tensors";

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp-{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Manifest entry of one stored tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
    pub sha256: String,
}

pub fn encode_f32(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 4);
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects tensors written under one artifact root.
#[derive(Debug)]
pub(crate) struct TensorWriter<'a> {
    root: &'a Path,
    pub entries: Vec<TensorEntry>,
}

impl<'a> TensorWriter<'a> {
    pub fn new(root: &'a Path) -> Self {
        Self {
            root,
            entries: Vec::new(),
        }
    }

    pub fn write(&mut self, name: String, m: &Matrix) -> Result<()> {
        let bytes = encode_f32(m);
        let file = format!("{TENSOR_DIR}/{name}.bin");
        write_atomic(&self.root.join(&file), &bytes)?;
        self.entries.push(TensorEntry {
            name,
            shape: [m.rows(), m.cols()],
            sha256: sha256_hex(&bytes),
            file,
        });
        Ok(())
    }
}

/// Read and verify one tensor: the file must exist, match the manifest's
/// shape and hash to the recorded digest.
pub(crate) fn read_tensor(root: &Path, entry: &TensorEntry) -> Result<Matrix> {
    let path = root.join(&entry.file);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::format(0, format!("missing blob {} for tensor {}", entry.file, entry.name)))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let [rows, cols] = entry.shape;
    let want = rows * cols * 4;
    if bytes.len() != want {
        return Err(Error::format(
            bytes.len().min(want),
            format!(
                "tensor {} has {} bytes but shape {rows}x{cols} needs {want}",
                entry.name,
                bytes.len()
            ),
        ));
    }
    let digest = sha256_hex(&bytes);
    if digest != entry.sha256 {
        return Err(Error::Integrity {
            tensor: entry.name.clone(),
            message: format!("sha256 {digest} does not match manifest {}", entry.sha256),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::new(rows, cols, data).map_err(|e| Error::Integrity {
        tensor: entry.name.clone(),
        message: e.to_string(),
    })
}

pub(crate) fn find<'e>(entries: &'e [TensorEntry], name: &str) -> Result<&'e TensorEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::format(0, format!("manifest lists no tensor named {name}")))
}
