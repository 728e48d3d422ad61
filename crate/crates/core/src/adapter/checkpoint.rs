//! `*.adapter.json` checkpoints.
//!
//! One JSON document with explicit dims, row-major matrices as flat decimal
//! arrays and a free-form metadata block:
//!
//! ```json
//! { "version": "camo-adapter/checkpoint-v1", "d": 4, "r": 2,
//!   "w_down": [..8..], "w_mid": [..4..], "w_up": [..8..], "s": 0.15,
//!   "meta": { "seed": 7 } }
//! ```
//!
//! Numbers are printed shortest-round-trip, so `load(save(p)) == p` bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AdapterParams;
use crate::error::{Error, Result};
use crate::numerics::Mat64;

pub const CHECKPOINT_VERSION: &str = "camo-adapter/checkpoint-v1";

pub type Meta = BTreeMap<String, serde_json::Value>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: String,
    d: usize,
    r: usize,
    w_down: Vec<f64>,
    w_mid: Vec<f64>,
    w_up: Vec<f64>,
    s: f64,
    #[serde(default)]
    meta: Meta,
}

pub fn save(p: &AdapterParams, meta: &Meta) -> Result<Vec<u8>> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION.to_string(),
        d: p.d(),
        r: p.r(),
        w_down: p.w_down().values().to_vec(),
        w_mid: p.w_mid().values().to_vec(),
        w_up: p.w_up().values().to_vec(),
        s: p.s(),
        meta: meta.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&file)
        .map_err(|e| Error::format("$", format!("cannot serialize checkpoint: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn load(bytes: &[u8]) -> Result<(AdapterParams, Meta)> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let file: CheckpointFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "$".to_string() } else { format!("$.{path}") };
        Error::format(path, e.into_inner().to_string())
    })?;

    if file.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "$.version",
            format!("unsupported version '{}', expected '{CHECKPOINT_VERSION}'", file.version),
        ));
    }
    let (d, r) = (file.d, file.r);
    let matrix = |name: &str, rows: usize, cols: usize, values: Vec<f64>| {
        if values.len() != rows * cols {
            return Err(Error::format(
                format!("$.{name}"),
                format!(
                    "{name} is {rows}x{cols} but holds {} values",
                    values.len()
                ),
            ));
        }
        Mat64::from_vec(rows, cols, values)
    };
    let w_down = matrix("w_down", r, d, file.w_down)?;
    let w_mid = matrix("w_mid", r, r, file.w_mid)?;
    let w_up = matrix("w_up", d, r, file.w_up)?;
    let params = AdapterParams::new(w_down, w_mid, w_up, file.s)
        .map_err(|e| Error::format("$", e.to_string()))?;
    Ok((params, file.meta))
}

pub fn save_file(path: &Path, p: &AdapterParams, meta: &Meta) -> Result<()> {
    let bytes = save(p, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_file(path: &Path) -> Result<(AdapterParams, Meta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load(&bytes)
}
