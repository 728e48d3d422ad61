//! Binary 8-bit PGM (P5) masks.
//!
//! The header is `P5`, width, height, maxval (must be 255), separated by
//! whitespace with optional `#` comments, then exactly one whitespace byte
//! and `width × height` payload bytes. Values map to `v / 255`. Ground-truth
//! masks are additionally binarized at `v ≥ 128`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MaskGrid;

pub fn parse_pgm(bytes: &[u8], origin: &str) -> Result<MaskGrid> {
    let err = |msg: String| Error::format(origin, msg);
    if !bytes.starts_with(b"P5") {
        return Err(err("not a binary PGM (expected magic 'P5')".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (slot, name) in fields.iter_mut().zip(["width", "height", "maxval"]) {
        // Whitespace and comments before each header number.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(format!("missing {name} in header")));
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(format!("{name} out of range")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err(format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(err(format!("empty image {width}x{height}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err("header must end with a single whitespace byte".into()));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .ok_or_else(|| err("image too large".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(err(format!(
            "payload has {} bytes, {width}x{height} needs {need}",
            payload.len()
        )));
    }
    if payload.len() > need {
        return Err(err(format!(
            "{} trailing bytes after {width}x{height} payload",
            payload.len() - need
        )));
    }
    let values = payload.iter().map(|&v| v as f64 / 255.0).collect();
    MaskGrid::new(height, width, values)
}

pub fn load_mask_pgm(path: &Path) -> Result<MaskGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, &path.display().to_string())
}

/// Loads a ground-truth mask, mapping bytes `≥ 128` to 1 and the rest to 0.
pub fn load_gt_mask_pgm(path: &Path) -> Result<MaskGrid> {
    let m = load_mask_pgm(path)?;
    let values = m
        .values()
        .iter()
        .map(|&v| if (v * 255.0).round() >= 128.0 { 1.0 } else { 0.0 })
        .collect();
    MaskGrid::new(m.height(), m.width(), values)
}

/// Encodes a mask as P5, rounding each value to the nearest of 256 levels.
pub fn save_mask_pgm(m: &MaskGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.width(), m.height()).into_bytes();
    out.extend(m.values().iter().map(|&v| (v * 255.0).round() as u8));
    out
}

pub fn write_mask_pgm(path: &Path, m: &MaskGrid) -> Result<()> {
    std::fs::write(path, save_mask_pgm(m)).map_err(|e| Error::io(path, e))
}
