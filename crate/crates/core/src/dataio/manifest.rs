//! Segmentation evaluation manifest.
//!
//! ```json
//! { "entries": {
//!     "img_001": { "pred_mask_path": "pred/img_001.pgm", "gt_mask_path": "gt/img_001.pgm",
//!                  "pred_class": "owl", "true_class": "owl" } } }
//! ```
//!
//! Relative paths resolve against the manifest's directory. Every path must
//! exist when the manifest is loaded. Duplicate ids are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};

use super::pgm::{load_gt_mask_pgm, load_mask_pgm};
use crate::error::{Error, Result};
use crate::metrics::EvalPair;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub pred_mask_path: PathBuf,
    pub gt_mask_path: PathBuf,
    pub pred_class: String,
    pub true_class: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Sorted by id; paths already resolved.
    pub entries: BTreeMap<String, ManifestEntry>,
}

struct UniqueEntries(BTreeMap<String, ManifestEntry>);

impl<'de> Deserialize<'de> for UniqueEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = UniqueEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from id to manifest entry")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = BTreeMap::new();
                while let Some(id) = map.next_key::<String>()? {
                    if out.contains_key(&id) {
                        return Err(serde::de::Error::custom(format!("duplicate id '{id}'")));
                    }
                    let entry: ManifestEntry = map.next_value()?;
                    out.insert(id, entry);
                }
                Ok(UniqueEntries(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    entries: UniqueEntries,
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    let file: ManifestFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        let at = if at == "." { "$".to_string() } else { format!("$.{at}") };
        Error::format(format!("{}:{at}", path.display()), e.into_inner().to_string())
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = file.entries.0;
    for entry in entries.values_mut() {
        for p in [&mut entry.pred_mask_path, &mut entry.gt_mask_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.is_file() {
                return Err(Error::io(
                    p.clone(),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "mask file not found"),
                ));
            }
        }
    }
    Ok(Manifest { entries })
}

/// Loads every mask pair of the manifest, in id order.
pub fn load_eval_pairs(manifest: &Manifest) -> Result<Vec<EvalPair>> {
    manifest
        .entries
        .iter()
        .map(|(id, e)| {
            Ok(EvalPair {
                id: id.clone(),
                pred: load_mask_pgm(&e.pred_mask_path)?,
                gt: load_gt_mask_pgm(&e.gt_mask_path)?,
                pred_class: e.pred_class.clone(),
                true_class: e.true_class.clone(),
            })
        })
        .collect()
}
