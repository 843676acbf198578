//! Rule annotation sessions: binary decisions per (rule, annotator), strict
//! majority voting and vocabulary merging of accepted candidates.

mod agreement;
mod scripted;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use agreement::{fleiss_kappa, kappa_from, Agreement};
pub use scripted::{oracle_decisions, scripted_annotate, AnnotatorPolicy, ScriptedAnnotatorSpec, DEFAULT_ORACLE_THRESHOLD};

use crate::matching::MatchError;
use crate::types::{ClassId, EntityConstraint, LabelSpace, Rule, RuleStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("rule {0} is not a candidate")]
    NotCandidate(String),
    #[error("duplicate candidate rule id {0}")]
    DuplicateRule(String),
    #[error("session needs at least one annotator")]
    NoAnnotators,
    #[error("duplicate annotator id {0}")]
    DuplicateAnnotator(String),
    #[error("unknown rule {0}")]
    UnknownRule(String),
    #[error("unknown annotator {0}")]
    UnknownAnnotator(String),
    #[error("rule {rule} already decided by {annotator}")]
    AlreadyDecided { rule: String, annotator: String },
    #[error("session {0} is closed")]
    Closed(String),
    #[error("quorum not met; missing decisions: {}", format_pairs(.0))]
    QuorumUnmet(Vec<(String, String)>),
    #[error("quorum {quorum} is outside 1..={annotators}")]
    BadQuorum { quorum: usize, annotators: usize },
    #[error("degenerate agreement")]
    DegenerateAgreement,
    #[error("no rated items")]
    EmptyRatings,
    #[error("ragged rating matrix: {0}")]
    RaggedRatings(String),
    #[error("p_flip {0} outside [0, 0.5)")]
    BadFlipProbability(f64),
    #[error("oracle needs a non-empty pool with gold labels")]
    EmptyPool,
    #[error(transparent)]
    Match(#[from] MatchError),
}

fn format_pairs(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(r, a)| format!("({r}, {a})")).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub rule_id: String,
    pub annotator: String,
    pub decision: Decision,
    /// Time the annotator spent on the card, when the client reports it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub decided: usize,
    pub expected: usize,
}

/// Outcome of [`AnnotationSession::close_and_vote`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    /// Accepted rules after merging, in candidate order.
    pub accepted: Vec<Rule>,
    pub accepted_candidates: usize,
    pub rejected_candidates: usize,
    pub agreement: Option<Agreement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSession {
    pub id: String,
    pub iteration: usize,
    pub candidates: Vec<Rule>,
    pub annotators: Vec<String>,
    /// Decisions in recording order.
    pub decisions: Vec<DecisionRecord>,
    pub state: SessionState,
    /// Decisions required per rule before voting.
    pub quorum: usize,
    /// Cap on a merged rule's vocabulary.
    pub max_vocabulary: usize,
}

impl AnnotationSession {
    pub fn open(
        id: impl Into<String>,
        candidates: Vec<Rule>,
        annotators: Vec<String>,
        iteration: usize,
        max_vocabulary: usize,
    ) -> Result<Self, AnnotationError> {
        if annotators.is_empty() {
            return Err(AnnotationError::NoAnnotators);
        }
        let mut seen = HashSet::new();
        for a in &annotators {
            if !seen.insert(a.as_str()) {
                return Err(AnnotationError::DuplicateAnnotator(a.clone()));
            }
        }
        let mut seen = HashSet::new();
        for r in &candidates {
            if r.status != RuleStatus::Candidate {
                return Err(AnnotationError::NotCandidate(r.id.clone()));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(AnnotationError::DuplicateRule(r.id.clone()));
            }
        }
        let quorum = annotators.len();
        Ok(Self {
            id: id.into(),
            iteration,
            candidates,
            annotators,
            decisions: Vec::new(),
            state: SessionState::Open,
            quorum,
            max_vocabulary: max_vocabulary.max(1),
        })
    }

    pub fn with_quorum(mut self, quorum: usize) -> Result<Self, AnnotationError> {
        if quorum == 0 || quorum > self.annotators.len() {
            return Err(AnnotationError::BadQuorum {
                quorum,
                annotators: self.annotators.len(),
            });
        }
        self.quorum = quorum;
        Ok(self)
    }

    pub fn is_open(&self) -> bool {
        self.state == SessionState::Open
    }

    pub fn rule(&self, id: &str) -> Option<&Rule> {
        self.candidates.iter().find(|r| r.id == id)
    }

    pub fn decision(&self, rule_id: &str, annotator: &str) -> Option<Decision> {
        self.decisions
            .iter()
            .find(|d| d.rule_id == rule_id && d.annotator == annotator)
            .map(|d| d.decision)
    }

    pub fn record_decision(
        &mut self,
        rule_id: &str,
        annotator: &str,
        decision: Decision,
        elapsed_ms: Option<u64>,
    ) -> Result<(), AnnotationError> {
        if !self.is_open() {
            return Err(AnnotationError::Closed(self.id.clone()));
        }
        if self.rule(rule_id).is_none() {
            return Err(AnnotationError::UnknownRule(rule_id.to_string()));
        }
        if !self.annotators.iter().any(|a| a == annotator) {
            return Err(AnnotationError::UnknownAnnotator(annotator.to_string()));
        }
        if self.decision(rule_id, annotator).is_some() {
            return Err(AnnotationError::AlreadyDecided {
                rule: rule_id.to_string(),
                annotator: annotator.to_string(),
            });
        }
        self.decisions.push(DecisionRecord {
            rule_id: rule_id.to_string(),
            annotator: annotator.to_string(),
            decision,
            elapsed_ms,
        });
        Ok(())
    }

    /// First candidate, in presentation order, this annotator has not decided.
    pub fn next_for(&self, annotator: &str) -> Result<Option<&Rule>, AnnotationError> {
        if !self.annotators.iter().any(|a| a == annotator) {
            return Err(AnnotationError::UnknownAnnotator(annotator.to_string()));
        }
        if !self.is_open() {
            return Ok(None);
        }
        Ok(self.candidates.iter().find(|r| self.decision(&r.id, annotator).is_none()))
    }

    pub fn progress(&self) -> Progress {
        Progress {
            decided: self.decisions.len(),
            expected: self.candidates.len() * self.annotators.len(),
        }
    }

    fn tallies(&self) -> HashMap<&str, (usize, usize)> {
        let mut t: HashMap<&str, (usize, usize)> = HashMap::new();
        for d in &self.decisions {
            let e = t.entry(d.rule_id.as_str()).or_default();
            match d.decision {
                Decision::Accept => e.0 += 1,
                Decision::Reject => e.1 += 1,
            }
        }
        t
    }

    /// Undecided pairs of every rule still short of the quorum.
    pub fn missing_pairs(&self) -> Vec<(String, String)> {
        let tallies = self.tallies();
        let mut missing = Vec::new();
        for r in &self.candidates {
            let (a, b) = tallies.get(r.id.as_str()).copied().unwrap_or_default();
            if a + b >= self.quorum {
                continue;
            }
            for ann in &self.annotators {
                if self.decision(&r.id, ann).is_none() {
                    missing.push((r.id.clone(), ann.clone()));
                }
            }
        }
        missing
    }

    pub fn quorum_met(&self) -> bool {
        self.missing_pairs().is_empty()
    }

    /// `[accept, reject]` counts for every rule decided by all annotators.
    pub fn rating_matrix(&self) -> Vec<Vec<usize>> {
        let tallies = self.tallies();
        let n = self.annotators.len();
        self.candidates
            .iter()
            .filter_map(|r| tallies.get(r.id.as_str()))
            .filter(|(a, b)| a + b == n)
            .map(|(a, b)| vec![*a, *b])
            .collect()
    }

    /// Fleiss' kappa over fully rated rules; `None` with a single annotator,
    /// no fully rated rule, or undefined agreement.
    pub fn agreement(&self) -> Option<Agreement> {
        if self.annotators.len() < 2 {
            return None;
        }
        fleiss_kappa(&self.rating_matrix()).ok()
    }

    /// Strict-majority vote, then merge of accepted rules sharing source
    /// instance, label, entity constraint and template. Closes the session.
    pub fn close_and_vote(&mut self, labels: &LabelSpace) -> Result<VoteResult, AnnotationError> {
        if !self.is_open() {
            return Err(AnnotationError::Closed(self.id.clone()));
        }
        let missing = self.missing_pairs();
        if !missing.is_empty() {
            return Err(AnnotationError::QuorumUnmet(missing));
        }
        let tallies: HashMap<String, (usize, usize)> =
            self.tallies().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let agreement = self.agreement();

        type MergeKey = (String, ClassId, Option<EntityConstraint>, String);
        let mut groups: BTreeMap<usize, Rule> = BTreeMap::new();
        let mut slot: HashMap<MergeKey, usize> = HashMap::new();
        let (mut n_acc, mut n_rej) = (0, 0);
        for (pos, rule) in self.candidates.iter_mut().enumerate() {
            let (acc, rej) = tallies.get(&rule.id).copied().unwrap_or_default();
            if acc > rej {
                rule.accept().expect("candidate status checked at open");
                n_acc += 1;
            } else {
                rule.reject().expect("candidate status checked at open");
                n_rej += 1;
                continue;
            }
            let key: MergeKey = (
                rule.source_instance_id.clone(),
                rule.label,
                rule.entity_constraint.clone(),
                rule.template_id.clone(),
            );
            match slot.get(&key) {
                Some(&first) => {
                    let merged = groups.get_mut(&first).expect("group exists");
                    for tok in &rule.mask_vocabulary {
                        if merged.mask_vocabulary.len() >= self.max_vocabulary {
                            break;
                        }
                        if !merged.mask_vocabulary.contains(tok) {
                            merged.mask_vocabulary.push(tok.clone());
                        }
                    }
                }
                None => {
                    let mut merged = rule.clone();
                    merged.mask_vocabulary.truncate(self.max_vocabulary);
                    slot.insert(key, pos);
                    groups.insert(pos, merged);
                }
            }
        }
        let accepted = groups
            .into_values()
            .map(|mut r| {
                r.rule_text = r.render(labels);
                r
            })
            .collect();
        self.state = SessionState::Closed;
        Ok(VoteResult {
            accepted,
            accepted_candidates: n_acc,
            rejected_candidates: n_rej,
            agreement,
        })
    }
}
