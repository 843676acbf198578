//! Shared domain vocabulary: label spaces, instances, datasets, rules and
//! weak-label records.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{featurize, tokenize, FeatureError, SparseVector};

/// Class ids are 1-based; 0 is reserved for ABSTAIN.
pub type ClassId = usize;

pub const ABSTAIN: ClassId = 0;

#[derive(Debug, Error, PartialEq)]
pub enum TypeError {
    #[error("label space needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("duplicate class name {0:?}")]
    DuplicateClass(String),
    #[error("class names must be non-empty")]
    EmptyClassName,
    #[error("rule {id} is {status:?}; only candidate rules can change status")]
    StatusLocked { id: String, status: RuleStatus },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    class_names: Vec<String>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, TypeError> {
        let class_names: Vec<String> = names.into_iter().map(Into::into).collect();
        if class_names.len() < 2 {
            return Err(TypeError::TooFewClasses(class_names.len()));
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if name.is_empty() {
                return Err(TypeError::EmptyClassName);
            }
            if !seen.insert(name.as_str()) {
                return Err(TypeError::DuplicateClass(name.clone()));
            }
        }
        Ok(Self { class_names })
    }

    /// Number of classes K.
    pub fn k(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn contains(&self, id: ClassId) -> bool {
        (1..=self.k()).contains(&id)
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        if id == ABSTAIN {
            return None;
        }
        self.class_names.get(id - 1).map(String::as_str)
    }

    pub fn id_of(&self, name: &str) -> Option<ClassId> {
        self.class_names.iter().position(|n| n == name).map(|i| i + 1)
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = TypeError;

    fn try_from(value: Vec<String>) -> Result<Self, Self::Error> {
        LabelSpace::new(value)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(value: LabelSpace) -> Self {
        value.class_names
    }
}

/// Typed entity pair for relation tasks. Spans are `[start, end)` char offsets
/// into the instance text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityPair {
    pub head_type: String,
    pub tail_type: String,
    pub head: (usize, usize),
    pub tail: (usize, usize),
}

impl EntityPair {
    pub fn constraint(&self) -> EntityConstraint {
        EntityConstraint {
            head_type: self.head_type.clone(),
            tail_type: self.tail_type.clone(),
        }
    }

    fn slice(text: &str, (start, end): (usize, usize)) -> Option<String> {
        if start > end || end > text.chars().count() {
            return None;
        }
        Some(text.chars().skip(start).take(end - start).collect())
    }

    pub fn head_text(&self, text: &str) -> Option<String> {
        Self::slice(text, self.head)
    }

    pub fn tail_text(&self, text: &str) -> Option<String> {
        Self::slice(text, self.tail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityConstraint {
    pub head_type: String,
    pub tail_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub entity_pair: Option<EntityPair>,
    pub features: SparseVector,
    pub gold_label: Option<ClassId>,
}

impl Instance {
    /// Tokenizes and featurizes `text`.
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        gold_label: Option<ClassId>,
        entity_pair: Option<EntityPair>,
        space_size: usize,
    ) -> Result<Self, TypeError> {
        let text = text.into();
        let tokens = tokenize(&text);
        let features = featurize(&tokens, space_size)?;
        Ok(Self {
            id: id.into(),
            text,
            tokens,
            entity_pair,
            features,
            gold_label,
        })
    }

    pub fn with_label(mut self, label: Option<ClassId>) -> Self {
        self.gold_label = label;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    CleanLabeled,
    Unlabeled,
    WeakLabeled,
    Dev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, instances: Vec<Instance>) -> Self {
        Self { kind, instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|x| x.id == id)
    }

    pub fn gold_labels(&self) -> Option<Vec<ClassId>> {
        self.instances.iter().map(|x| x.gold_label).collect()
    }
}

/// Every invariant violation in `d`, as human-readable descriptions.
pub fn validate_dataset(d: &Dataset, ls: &LabelSpace) -> Vec<String> {
    let mut violations = Vec::new();
    let mut seen = HashSet::new();
    let mut dims = HashSet::new();
    for x in &d.instances {
        if !seen.insert(x.id.as_str()) {
            violations.push(format!("duplicate id {}", x.id));
        }
        match x.gold_label {
            None if matches!(d.kind, DatasetKind::CleanLabeled | DatasetKind::Dev) => {
                violations.push(format!("instance {} has no gold label", x.id));
            }
            Some(l) if !ls.contains(l) => {
                violations.push(format!("instance {} has label {l} outside 1..={}", x.id, ls.k()));
            }
            _ => {}
        }
        if x.tokens != tokenize(&x.text) {
            violations.push(format!("instance {} tokens do not match its text", x.id));
        }
        let dim = x.features.dim();
        dims.insert(dim);
        for (id, v) in x.features.entries() {
            if *v == 0.0 {
                violations.push(format!("instance {} has an explicit zero feature {id}", x.id));
            } else if *v < 0.0 || !v.is_finite() {
                violations.push(format!("instance {} has invalid feature value {v}", x.id));
            }
            if *id as usize >= dim {
                violations.push(format!("instance {} feature {id} outside space {dim}", x.id));
            }
        }
        if let Some(pair) = &x.entity_pair {
            if pair.head_text(&x.text).is_none() || pair.tail_text(&x.text).is_none() {
                violations.push(format!("instance {} has an entity span outside its text", x.id));
            }
        }
    }
    if dims.len() > 1 {
        violations.push(format!("mixed feature space sizes {dims:?}"));
    }
    violations
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleStatus {
    Candidate,
    Accepted,
    Rejected,
}

/// A prompt-based labeling rule: `{constraint} ∧ {MASK ∈ vocabulary} → label`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub template_id: String,
    /// Accepted mask predictions, in insertion order, no duplicates.
    pub mask_vocabulary: Vec<String>,
    pub entity_constraint: Option<EntityConstraint>,
    pub label: ClassId,
    pub source_instance_id: String,
    pub source_text: String,
    pub prompt: String,
    pub iteration: usize,
    pub status: RuleStatus,
    pub rule_text: String,
}

impl Rule {
    fn transition(&mut self, to: RuleStatus) -> Result<(), TypeError> {
        if self.status != RuleStatus::Candidate {
            return Err(TypeError::StatusLocked {
                id: self.id.clone(),
                status: self.status,
            });
        }
        self.status = to;
        Ok(())
    }

    pub fn accept(&mut self) -> Result<(), TypeError> {
        self.transition(RuleStatus::Accepted)
    }

    pub fn reject(&mut self) -> Result<(), TypeError> {
        self.transition(RuleStatus::Rejected)
    }

    /// Identity used for de-duplication: (template, vocabulary, constraint, label).
    pub fn dedup_key(&self) -> (String, Vec<String>, Option<EntityConstraint>, ClassId) {
        let mut vocab = self.mask_vocabulary.clone();
        vocab.sort();
        (
            self.template_id.clone(),
            vocab,
            self.entity_constraint.clone(),
            self.label,
        )
    }

    pub fn render(&self, ls: &LabelSpace) -> String {
        let mut parts = Vec::new();
        if let Some(c) = &self.entity_constraint {
            parts.push(format!("{{entity pair == ({}, {})}}", c.head_type, c.tail_type));
        }
        parts.push(format!("{{[MASK] == {}}}", self.mask_vocabulary.join(" | ")));
        parts.push("{score > sigma}".to_string());
        let label = ls
            .name(self.label)
            .map(str::to_string)
            .unwrap_or_else(|| format!("class {}", self.label));
        format!("{} -> {label}", parts.join(" & "))
    }
}

/// One weak label, with the rule that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabelRecord {
    pub instance_id: String,
    pub label: ClassId,
    pub rule_id: String,
    pub matching_score: f64,
    pub iteration: usize,
}
