use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RuleGenError;
use crate::io::read_json;
use crate::types::Instance;

pub const MASK: &str = "[MASK]";
const INPUT: &str = "[INPUT]";
const HEAD: &str = "[HEAD]";
const TAIL: &str = "[TAIL]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Relation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate")]
pub struct RuleTemplate {
    pub id: String,
    pub pattern: String,
    pub task_kind: TaskKind,
}

#[derive(Deserialize)]
struct RawTemplate {
    id: String,
    pattern: String,
    task_kind: TaskKind,
}

impl TryFrom<RawTemplate> for RuleTemplate {
    type Error = RuleGenError;

    fn try_from(raw: RawTemplate) -> Result<Self, Self::Error> {
        RuleTemplate::new(raw.id, raw.pattern, raw.task_kind)
    }
}

impl RuleTemplate {
    pub fn new(id: impl Into<String>, pattern: impl Into<String>, task_kind: TaskKind) -> Result<Self, RuleGenError> {
        let id = id.into();
        let pattern = pattern.into();
        let masks = pattern.matches(MASK).count();
        if masks != 1 {
            return Err(RuleGenError::Template {
                id,
                reason: format!("expected exactly one {MASK}, found {masks}"),
            });
        }
        let has_entities = pattern.contains(HEAD) || pattern.contains(TAIL);
        if has_entities && task_kind == TaskKind::Classification {
            return Err(RuleGenError::Template {
                id,
                reason: format!("{HEAD}/{TAIL} only allowed in relation templates"),
            });
        }
        Ok(Self { id, pattern, task_kind })
    }

    pub fn classification(id: impl Into<String>, pattern: impl Into<String>) -> Result<Self, RuleGenError> {
        Self::new(id, pattern, TaskKind::Classification)
    }

    pub fn relation(id: impl Into<String>, pattern: impl Into<String>) -> Result<Self, RuleGenError> {
        Self::new(id, pattern, TaskKind::Relation)
    }

    /// Substitutes placeholders in a single left-to-right pass, so text taken
    /// from the instance is never re-scanned for placeholders.
    pub fn render_prompt(&self, x: &Instance) -> Result<String, RuleGenError> {
        let (head, tail) = match (self.task_kind, &x.entity_pair) {
            (TaskKind::Relation, None) => {
                return Err(RuleGenError::MissingEntityPair {
                    template: self.id.clone(),
                    instance: x.id.clone(),
                })
            }
            (TaskKind::Relation, Some(pair)) => {
                let bad_span = || RuleGenError::BadEntitySpan(x.id.clone());
                (
                    pair.head_text(&x.text).ok_or_else(bad_span)?,
                    pair.tail_text(&x.text).ok_or_else(bad_span)?,
                )
            }
            (TaskKind::Classification, _) => (String::new(), String::new()),
        };
        for value in [&x.text, &head, &tail] {
            if value.contains(MASK) {
                return Err(RuleGenError::MaskInInput(x.id.clone()));
            }
        }
        let mut out = String::with_capacity(self.pattern.len() + x.text.len());
        let mut rest = self.pattern.as_str();
        while let Some(pos) = rest.find('[') {
            out.push_str(&rest[..pos]);
            let tail_str = &rest[pos..];
            let (piece, consumed) = if tail_str.starts_with(INPUT) {
                (x.text.as_str(), INPUT.len())
            } else if tail_str.starts_with(HEAD) {
                (head.as_str(), HEAD.len())
            } else if tail_str.starts_with(TAIL) {
                (tail.as_str(), TAIL.len())
            } else if tail_str.starts_with(MASK) {
                (MASK, MASK.len())
            } else {
                ("[", 1)
            };
            out.push_str(piece);
            rest = &tail_str[consumed..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Template file: a JSON list of `{id, pattern, task_kind}`.
pub fn load_templates(path: &Path) -> Result<Vec<RuleTemplate>, RuleGenError> {
    read_json(path).map_err(|e| RuleGenError::TemplateFile(e.to_string()))
}
