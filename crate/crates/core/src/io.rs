//! On-disk formats: JSONL datasets, weak-labeled JSONL with provenance,
//! and JSON rule sets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ClassId, Dataset, DatasetKind, EntityPair, Instance, Rule, TypeError, WeakLabelRecord};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}:{line}: label 0 is reserved for abstain")]
    ZeroLabel { path: PathBuf, line: usize },
    #[error(transparent)]
    Type(#[from] TypeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SpanPair {
    head_type: String,
    tail_type: String,
    head: [usize; 2],
    tail: [usize; 2],
}

impl From<&EntityPair> for SpanPair {
    fn from(p: &EntityPair) -> Self {
        Self {
            head_type: p.head_type.clone(),
            tail_type: p.tail_type.clone(),
            head: [p.head.0, p.head.1],
            tail: [p.tail.0, p.tail.1],
        }
    }
}

impl From<SpanPair> for EntityPair {
    fn from(p: SpanPair) -> Self {
        Self {
            head_type: p.head_type,
            tail_type: p.tail_type,
            head: (p.head[0], p.head[1]),
            tail: (p.tail[0], p.tail[1]),
        }
    }
}

/// One line of the dataset JSONL format.
#[derive(Debug, Serialize, Deserialize)]
pub struct InstanceLine {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub label: Option<ClassId>,
    #[serde(default)]
    entity_pair: Option<SpanPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matching_score: Option<f64>,
}

impl InstanceLine {
    pub fn from_instance(x: &Instance) -> Self {
        Self {
            id: x.id.clone(),
            text: x.text.clone(),
            label: x.gold_label,
            entity_pair: x.entity_pair.as_ref().map(SpanPair::from),
            rule_id: None,
            matching_score: None,
        }
    }
}

pub fn parse_dataset(
    reader: impl BufRead,
    path: &Path,
    kind: DatasetKind,
    space_size: usize,
) -> Result<Dataset, IoError> {
    let mut instances = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceLine = serde_json::from_str(&line).map_err(|source| IoError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            source,
        })?;
        if rec.label == Some(0) {
            return Err(IoError::ZeroLabel {
                path: path.to_path_buf(),
                line: n + 1,
            });
        }
        instances.push(Instance::new(
            rec.id,
            rec.text,
            rec.label,
            rec.entity_pair.map(EntityPair::from),
            space_size,
        )?);
    }
    Ok(Dataset::new(kind, instances))
}

pub fn read_dataset(path: &Path, kind: DatasetKind, space_size: usize) -> Result<Dataset, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_dataset(BufReader::new(file), path, kind, space_size)
}

pub fn write_dataset(path: &Path, d: &Dataset) -> Result<(), IoError> {
    let lines = d.instances.iter().map(InstanceLine::from_instance);
    write_lines(path, lines)
}

/// Weak-labeled JSONL: the dataset format with `label` set to the weak label
/// plus `rule_id` and `matching_score` provenance columns.
pub fn write_weak_labels(path: &Path, unlabeled: &Dataset, records: &[WeakLabelRecord]) -> Result<(), IoError> {
    let lines = records.iter().filter_map(|r| {
        unlabeled.get(&r.instance_id).map(|x| {
            let mut line = InstanceLine::from_instance(x);
            line.label = Some(r.label);
            line.rule_id = Some(r.rule_id.clone());
            line.matching_score = Some(r.matching_score);
            line
        })
    });
    write_lines(path, lines)
}

pub fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(&item).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_rules(path: &Path) -> Result<Vec<Rule>, IoError> {
    read_json(path)
}

pub fn write_rules(path: &Path, rules: &[Rule]) -> Result<(), IoError> {
    write_json(path, rules)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_jsonl_with_entity_pairs_and_nulls() {
        let src = r#"{"id": "a", "text": "Bill Gates founded Microsoft.", "label": 2, "entity_pair": {"head_type": "Person", "tail_type": "Org", "head": [0, 10], "tail": [19, 28]}}
{"id": "b", "text": "nothing here", "label": null, "entity_pair": null}

{"id": "c", "text": "no optional keys"}
"#;
        let d = parse_dataset(src.as_bytes(), Path::new("mem"), DatasetKind::Unlabeled, 128).unwrap();
        assert_eq!(d.len(), 3);
        let a = &d.instances[0];
        assert_eq!(a.gold_label, Some(2));
        let pair = a.entity_pair.as_ref().unwrap();
        assert_eq!(pair.head_text(&a.text).unwrap(), "Bill Gates");
        assert_eq!(pair.tail_text(&a.text).unwrap(), "Microsoft");
        assert_eq!(d.instances[1].gold_label, None);
        assert_eq!(d.instances[2].tokens, vec!["no", "optional", "keys"]);
    }

    #[test]
    fn rejects_label_zero_and_bad_json() {
        let zero = r#"{"id": "a", "text": "x", "label": 0}"#;
        assert!(matches!(
            parse_dataset(zero.as_bytes(), Path::new("m"), DatasetKind::Unlabeled, 8),
            Err(IoError::ZeroLabel { line: 1, .. })
        ));
        let bad = "{\"id\": 1}";
        assert!(matches!(
            parse_dataset(bad.as_bytes(), Path::new("m"), DatasetKind::Unlabeled, 8),
            Err(IoError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn weak_label_lines_carry_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let x = Instance::new("u1", "goal scored", None, None, 32).unwrap();
        let d = Dataset::new(DatasetKind::Unlabeled, vec![x]);
        let rec = WeakLabelRecord {
            instance_id: "u1".into(),
            label: 3,
            rule_id: "r7".into(),
            matching_score: 0.42,
            iteration: 2,
        };
        let path = dir.path().join("weak.jsonl");
        write_weak_labels(&path, &d, &[rec]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["label"], 3);
        assert_eq!(v["rule_id"], "r7");
        assert_eq!(v["matching_score"], 0.42);
        let back = read_dataset(&path, DatasetKind::WeakLabeled, 32).unwrap();
        assert_eq!(back.instances[0].gold_label, Some(3));
    }
}
