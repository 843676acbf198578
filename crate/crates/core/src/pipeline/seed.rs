//! Keyword rules that provide the initial weak labels.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::features::tokenize;
use crate::io::read_json;
use crate::types::{ClassId, Dataset, LabelSpace, WeakLabelRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRule {
    pub id: String,
    pub keywords: Vec<String>,
    pub label: ClassId,
}

pub fn load_seed_rules(path: &Path, labels: &LabelSpace) -> Result<Vec<SeedRule>, PipelineError> {
    let rules: Vec<SeedRule> = read_json(path)?;
    for r in &rules {
        if !labels.contains(r.label) {
            return Err(PipelineError::Config(format!("seed rule {} has label {}", r.id, r.label)));
        }
        if r.keywords.iter().all(|k| tokenize(k).is_empty()) {
            return Err(PipelineError::Config(format!("seed rule {} has no keywords", r.id)));
        }
    }
    Ok(rules)
}

/// A rule fires when any of its keywords occurs among the instance tokens.
/// Fired rules vote; the label with the most votes wins and ties abstain.
/// Records carry score 1 and the first fired rule of the winning label.
pub fn apply_seed_rules(rules: &[SeedRule], unlabeled: &Dataset) -> Vec<WeakLabelRecord> {
    let keyword_sets: Vec<Vec<String>> = rules
        .iter()
        .map(|r| r.keywords.iter().flat_map(|k| tokenize(k)).collect())
        .collect();
    let mut out = Vec::new();
    for x in &unlabeled.instances {
        let mut votes: BTreeMap<ClassId, (usize, &str)> = BTreeMap::new();
        for (r, kw) in rules.iter().zip(&keyword_sets) {
            if kw.iter().any(|k| x.tokens.contains(k)) {
                votes.entry(r.label).or_insert((0, r.id.as_str())).0 += 1;
            }
        }
        let Some(top) = votes.values().map(|v| v.0).max() else {
            continue;
        };
        let winners: Vec<(&ClassId, &(usize, &str))> = votes.iter().filter(|(_, v)| v.0 == top).collect();
        if let [(label, (_, rule_id))] = winners.as_slice() {
            out.push(WeakLabelRecord {
                instance_id: x.id.clone(),
                label: **label,
                rule_id: rule_id.to_string(),
                matching_score: 1.0,
                iteration: 0,
            });
        }
    }
    out
}
