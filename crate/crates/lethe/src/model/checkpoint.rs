//! Versioned binary model checkpoints.
//!
//! Layout: an 8-byte magic, a u32 format version, a length-prefixed JSON
//! header (config plus provenance), then one labeled little-endian f64 blob
//! per parameter in canonical order. Writing is a pure function of the
//! model, so checkpoints are byte-stable across runs with the same seed.

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LETHECKP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    /// Hex SHA-256 of the corpus file this model was trained on, when known.
    corpus_checksum: Option<String>,
    param_count: usize,
}

pub fn save_model(model: &ModelState, corpus_checksum: Option<&str>, path: &Path) -> Result<()> {
    let bytes = model_to_bytes(model, corpus_checksum)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_model(path: &Path) -> Result<(ModelState, Option<String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    model_from_bytes(&bytes).map_err(|e| match e {
        Error::MalformedFile { detail, .. } => Error::MalformedFile {
            path: path.display().to_string(),
            detail,
        },
        other => other,
    })
}

/// Hex SHA-256 of the serialized model, used in reports.
pub fn model_checksum(model: &ModelState) -> Result<String> {
    let bytes = model_to_bytes(model, None)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn model_to_bytes(model: &ModelState, corpus_checksum: Option<&str>) -> Result<Vec<u8>> {
    let names = model.param_names();
    let params = model.params();
    let header = Header {
        config: model.config.clone(),
        corpus_checksum: corpus_checksum.map(str::to_string),
        param_count: params.len(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::new();
    out.write_all(MAGIC).unwrap();
    out.write_all(&VERSION.to_le_bytes()).unwrap();
    out.write_all(&(header_json.len() as u32).to_le_bytes()).unwrap();
    out.write_all(&header_json).unwrap();
    for (name, m) in names.iter().zip(params.iter()) {
        write_matrix(&mut out, name, m);
    }
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<(ModelState, Option<String>)> {
    let bad = |detail: &str| Error::MalformedFile {
        path: "<bytes>".into(),
        detail: detail.into(),
    };
    let mut cur = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != MAGIC {
        return Err(bad("not a lethe checkpoint"));
    }
    let version = read_u32(&mut cur).map_err(|_| bad("truncated version"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let header_len = read_u32(&mut cur).map_err(|_| bad("truncated header length"))? as usize;
    let mut header_bytes = vec![0u8; header_len];
    cur.read_exact(&mut header_bytes).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    header.config.validate()?;

    let mut template = ModelState::init(header.config.clone())?;
    let names = template.param_names();
    if names.len() != header.param_count {
        return Err(bad("parameter count mismatch"));
    }
    for (name, slot) in names.iter().zip(template.params_mut()) {
        let (read_name, m) = read_matrix(&mut cur).map_err(|_| bad("truncated parameter"))?;
        if &read_name != name {
            return Err(bad(&format!("expected parameter {name}, found {read_name}")));
        }
        if m.shape() != slot.shape() {
            return Err(bad(&format!("shape mismatch for {name}")));
        }
        *slot = m;
    }
    Ok((template, header.corpus_checksum))
}

pub(crate) fn write_matrix(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    out.write_all(&(name.len() as u16).to_le_bytes()).unwrap();
    out.write_all(name.as_bytes()).unwrap();
    out.write_all(&(m.rows() as u32).to_le_bytes()).unwrap();
    out.write_all(&(m.cols() as u32).to_le_bytes()).unwrap();
    for v in m.data() {
        out.write_all(&v.to_le_bytes()).unwrap();
    }
}

pub(crate) fn read_matrix(cur: &mut std::io::Cursor<&[u8]>) -> std::io::Result<(String, Matrix)> {
    let mut len_bytes = [0u8; 2];
    cur.read_exact(&mut len_bytes)?;
    let name_len = u16::from_le_bytes(len_bytes) as usize;
    let mut name_bytes = vec![0u8; name_len];
    cur.read_exact(&mut name_bytes)?;
    let name = String::from_utf8_lossy(&name_bytes).into_owned();
    let rows = read_u32(cur)? as usize;
    let cols = read_u32(cur)? as usize;
    let mut data = vec![0.0f64; rows * cols];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        cur.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    let m = Matrix::from_vec(rows, cols, data)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "bad matrix"))?;
    Ok((name, m))
}

fn read_u32(cur: &mut std::io::Cursor<&[u8]>) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
