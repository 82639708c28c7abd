use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Matrix, ParamStore};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "shiftssd-params-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

/// First line of a checkpoint file. The `f64` payload that follows holds
/// the tensors in `tensors` order, row-major, little-endian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        tensors: store
            .entries()
            .map(|(name, m)| TensorEntry {
                name: name.to_string(),
                shape: [m.rows(), m.cols()],
            })
            .collect(),
        meta,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (_, m) in store.entries() {
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointHeader)> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(bad("missing header line".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&line).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unsupported format {}", header.format)));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected: usize = header.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
    if payload.len() != expected * 8 {
        return Err(bad(format!(
            "payload has {} bytes, header describes {} values",
            payload.len(),
            expected
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let data: Vec<f64> = values.by_ref().take(t.shape[0] * t.shape[1]).collect();
        store.insert(t.name.clone(), Matrix::from_vec(t.shape[0], t.shape[1], data)?)?;
    }
    Ok((store, header))
}
