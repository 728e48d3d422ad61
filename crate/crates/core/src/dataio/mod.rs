//! File formats.
//!
//! Embeddings, one JSON object per line:
//! `{"id": "img_001", "class": "owl", "condition": "gt_mask", "view": 0, "embedding": [..]}`
//! Embeddings must be unit-norm within 1e-3 and share one dimension per file;
//! `(id, condition, view)` is unique.
//!
//! Prompts, one JSON object per line, in class order:
//! `{"class": "owl", "feature": [..]}`
//!
//! Blank lines are ignored. Errors carry the 1-based line number and field.

mod manifest;
mod pgm;
pub mod synth;

use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::classification::{Condition, PromptTable};
use crate::error::{Error, Result};
use crate::numerics::{norm, Vec64};

pub use manifest::{load_eval_pairs, load_manifest, Manifest, ManifestEntry};
pub use pgm::{load_gt_mask_pgm, load_mask_pgm, parse_pgm, save_mask_pgm, write_mask_pgm};

pub const NORM_TOLERANCE: f64 = 1e-3;

/// One frozen image embedding under one mask condition and one view.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub class: String,
    pub condition: Condition,
    pub view: usize,
    pub embedding: Vec64,
}

fn schema(line: usize, field: &str, msg: impl Into<String>) -> Error {
    Error::Schema {
        line,
        field: field.to_string(),
        msg: msg.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| {
        Error::format(
            path.display().to_string(),
            format!("not valid UTF-8 (byte {})", e.utf8_error().valid_up_to()),
        )
    })
}

/// Parses each non-blank line as a JSON object with exactly `fields`.
fn objects<'a>(
    text: &'a str,
    fields: &'a [&'a str],
) -> impl Iterator<Item = Result<(usize, Map<String, Value>)>> + 'a {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(move |(i, l)| {
            let line = i + 1;
            let value: Value = serde_json::from_str(l)
                .map_err(|e| schema(line, "$", format!("invalid JSON: {e}")))?;
            let Value::Object(map) = value else {
                return Err(schema(line, "$", "expected a JSON object"));
            };
            if let Some(extra) = map.keys().find(|k| !fields.contains(&k.as_str())) {
                return Err(schema(line, extra, "unknown field"));
            }
            if let Some(missing) = fields.iter().find(|f| !map.contains_key(**f)) {
                return Err(schema(line, missing, "missing field"));
            }
            Ok((line, map))
        })
}

fn string_field(map: &Map<String, Value>, line: usize, field: &str) -> Result<String> {
    match &map[field] {
        Value::String(s) if !s.is_empty() => Ok(s.clone()),
        Value::String(_) => Err(schema(line, field, "must not be empty")),
        _ => Err(schema(line, field, "expected a string")),
    }
}

fn vector_field(map: &Map<String, Value>, line: usize, field: &str) -> Result<Vec64> {
    let Value::Array(items) = &map[field] else {
        return Err(schema(line, field, "expected an array of numbers"));
    };
    if items.is_empty() {
        return Err(schema(line, field, "must not be empty"));
    }
    items
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| schema(line, &format!("{field}[{i}]"), "expected a finite number"))
        })
        .collect()
}

pub fn parse_embeddings(text: &str) -> Result<Vec<EmbeddingRecord>> {
    const FIELDS: [&str; 5] = ["id", "class", "condition", "view", "embedding"];
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    let mut seen = HashSet::new();
    for item in objects(text, &FIELDS) {
        let (line, map) = item?;
        let id = string_field(&map, line, "id")?;
        let class = string_field(&map, line, "class")?;
        let condition: Condition = string_field(&map, line, "condition")?
            .parse()
            .map_err(|e: Error| schema(line, "condition", e.to_string()))?;
        let view = map["view"]
            .as_u64()
            .ok_or_else(|| schema(line, "view", "expected a non-negative integer"))?
            as usize;
        let embedding = vector_field(&map, line, "embedding")?;
        match dim {
            None => dim = Some(embedding.len()),
            Some(d) if d != embedding.len() => {
                return Err(schema(
                    line,
                    "embedding",
                    format!("dimension {} differs from earlier records ({d})", embedding.len()),
                ))
            }
            Some(_) => {}
        }
        let n = norm(&embedding);
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(schema(
                line,
                "embedding",
                format!("record '{id}' has norm {n:.6}, expected 1 within {NORM_TOLERANCE}"),
            ));
        }
        if !seen.insert((id.clone(), condition, view)) {
            return Err(schema(
                line,
                "id",
                format!("duplicate record ('{id}', {condition}, view {view})"),
            ));
        }
        out.push(EmbeddingRecord {
            id,
            class,
            condition,
            view,
            embedding,
        });
    }
    Ok(out)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    parse_embeddings(&read_text(path)?)
}

fn jsonl<T: Serialize>(items: impl Iterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn format_embeddings(records: &[EmbeddingRecord]) -> String {
    jsonl(records.iter())
}

pub fn save_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    std::fs::write(path, format_embeddings(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_prompts(text: &str) -> Result<PromptTable> {
    const FIELDS: [&str; 2] = ["class", "feature"];
    let mut entries: Vec<(String, Vec64)> = Vec::new();
    let mut lines = Vec::new();
    for item in objects(text, &FIELDS) {
        let (line, map) = item?;
        let class = string_field(&map, line, "class")?;
        let feature = vector_field(&map, line, "feature")?;
        if let Some((_, first)) = entries.first() {
            if first.len() != feature.len() {
                return Err(schema(
                    line,
                    "feature",
                    format!("dimension {} differs from earlier prompts ({})", feature.len(), first.len()),
                ));
            }
        }
        if let Some(prev) = entries.iter().position(|(c, _)| *c == class) {
            return Err(schema(
                line,
                "class",
                format!("duplicate class '{class}' (first on line {})", lines[prev]),
            ));
        }
        if norm(&feature) == 0.0 {
            return Err(schema(line, "feature", format!("prompt '{class}' is the zero vector")));
        }
        lines.push(line);
        entries.push((class, feature));
    }
    PromptTable::new(entries)
}

pub fn load_prompts(path: &Path) -> Result<PromptTable> {
    parse_prompts(&read_text(path)?)
}

#[derive(Serialize)]
struct PromptLine<'a> {
    class: &'a str,
    feature: &'a Vec64,
}

pub fn format_prompts(table: &PromptTable) -> String {
    jsonl(table.iter().map(|(class, feature)| PromptLine { class, feature }))
}

pub fn save_prompts(path: &Path, table: &PromptTable) -> Result<()> {
    std::fs::write(path, format_prompts(table)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_sample, Rng};
    use proptest::prelude::*;

    fn line(id: &str, cond: &str, view: usize, e: &[f64]) -> String {
        serde_json::json!({"id": id, "class": "owl", "condition": cond, "view": view, "embedding": e})
            .to_string()
    }

    #[test]
    fn empty_input_is_empty() {
        assert!(parse_embeddings("").unwrap().is_empty());
        assert!(parse_embeddings("\n  \n").unwrap().is_empty());
        assert!(parse_prompts("").unwrap().is_empty());
    }

    #[test]
    fn norm_error_names_the_record() {
        let text = [line("a", "gt_mask", 0, &[1.0, 0.0]), line("bad7", "gt_mask", 0, &[0.9, 0.0])].join("\n");
        match parse_embeddings(&text) {
            Err(Error::Schema { line, field, msg }) => {
                assert_eq!((line, field.as_str()), (2, "embedding"));
                assert!(msg.contains("bad7"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        // Inside the tolerance is accepted.
        parse_embeddings(&line("ok", "gt_mask", 0, &[1.0009, 0.0])).unwrap();
    }

    #[test]
    fn dimension_change_reported_at_first_offending_line() {
        let text = [
            line("a", "gt_mask", 0, &[1.0, 0.0]),
            line("b", "gt_mask", 0, &[0.0, 1.0]),
            line("c", "gt_mask", 0, &[0.0, 0.0, 1.0]),
            line("d", "gt_mask", 0, &[0.0, 0.0, 0.0, 1.0]),
        ]
        .join("\n");
        assert!(matches!(parse_embeddings(&text), Err(Error::Schema { line: 3, .. })));
    }

    #[test]
    fn schema_violations() {
        let cases = [
            ("{\"id\":\"a\"", "$"),
            ("[1,2]", "$"),
            (r#"{"id":"a","class":"owl","condition":"gt_mask","view":0}"#, "embedding"),
            (r#"{"id":"a","class":"owl","condition":"gt_mask","view":0,"embedding":[1.0],"x":1}"#, "x"),
            (r#"{"id":"a","class":"owl","condition":"truth","view":0,"embedding":[1.0]}"#, "condition"),
            (r#"{"id":"a","class":"owl","condition":"gt_mask","view":-1,"embedding":[1.0]}"#, "view"),
            (r#"{"id":"a","class":"owl","condition":"gt_mask","view":0,"embedding":[1.0,"x"]}"#, "embedding[1]"),
            (r#"{"id":"","class":"owl","condition":"gt_mask","view":0,"embedding":[1.0]}"#, "id"),
        ];
        for (text, want) in cases {
            match parse_embeddings(text) {
                Err(Error::Schema { line: 1, field, .. }) => assert_eq!(field, want, "{text}"),
                other => panic!("{text}: unexpected {other:?}"),
            }
        }
        let dup = [line("a", "gt_mask", 1, &[1.0]), line("a", "gt_mask", 1, &[1.0])].join("\n");
        assert!(matches!(parse_embeddings(&dup), Err(Error::Schema { line: 2, .. })));
        let distinct = [line("a", "gt_mask", 1, &[1.0]), line("a", "all_black", 1, &[1.0])].join("\n");
        assert_eq!(parse_embeddings(&distinct).unwrap().len(), 2);
    }

    #[test]
    fn duplicate_prompt_class_is_named() {
        let text = "{\"class\":\"owl\",\"feature\":[1.0]}\n{\"class\":\"owl\",\"feature\":[2.0]}\n";
        match parse_prompts(text) {
            Err(Error::Schema { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("owl"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn prompt_table_of_75_classes() {
        let mut rng = Rng::new(75);
        let entries: Vec<(String, Vec64)> = (0..75)
            .map(|i| (format!("class_{i}"), gaussian_sample(&mut rng, 0.0, 1.0, 768).unwrap()))
            .collect();
        let table = PromptTable::new(entries).unwrap();
        let back = parse_prompts(&format_prompts(&table)).unwrap();
        assert_eq!(back.len(), 75);
        assert_eq!(back, table);
    }

    proptest! {
        #[test]
        fn embeddings_round_trip(seed in any::<u64>(), n in 0usize..12, d in 1usize..9) {
            let mut rng = Rng::new(seed);
            let records: Vec<EmbeddingRecord> = (0..n)
                .map(|i| EmbeddingRecord {
                    id: format!("r{}", i / 3),
                    class: format!("c{}", rng.below(3)),
                    condition: Condition::ALL[i % 3],
                    view: i / 9,
                    embedding: gaussian_sample(&mut rng, 0.0, 1.0, d).unwrap().normalized().unwrap(),
                })
                .collect();
            let text = format_embeddings(&records);
            let back = parse_embeddings(&text).unwrap();
            prop_assert_eq!(&back, &records);
            prop_assert_eq!(format_embeddings(&back), text);
        }
    }
}
