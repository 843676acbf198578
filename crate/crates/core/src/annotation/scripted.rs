//! Scripted annotators for headless runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotationError, AnnotationSession, Decision};
use crate::matching::Matcher;
use crate::types::{Instance, Rule};

pub const DEFAULT_ORACLE_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum AnnotatorPolicy {
    Oracle,
    NoisyOracle { p_flip: f64 },
    AcceptAll,
    RejectAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedAnnotatorSpec {
    #[serde(flatten)]
    pub policy: AnnotatorPolicy,
    #[serde(default)]
    pub seed: u64,
    /// Precision a rule must exceed on the pool to be accepted by the oracle.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_ORACLE_THRESHOLD
}

impl Default for ScriptedAnnotatorSpec {
    fn default() -> Self {
        Self {
            policy: AnnotatorPolicy::Oracle,
            seed: 0,
            threshold: DEFAULT_ORACLE_THRESHOLD,
        }
    }
}

impl ScriptedAnnotatorSpec {
    pub fn validate(&self) -> Result<(), AnnotationError> {
        if let AnnotatorPolicy::NoisyOracle { p_flip } = self.policy {
            if !(0.0..0.5).contains(&p_flip) {
                return Err(AnnotationError::BadFlipProbability(p_flip));
            }
        }
        Ok(())
    }

    fn needs_oracle(&self) -> bool {
        matches!(self.policy, AnnotatorPolicy::Oracle | AnnotatorPolicy::NoisyOracle { .. })
    }
}

/// Accept iff the rule's precision on the gold-labeled part of `pool`
/// exceeds `threshold`. A rule that matches nothing is rejected.
pub fn oracle_decisions(
    rules: &[Rule],
    matcher: &Matcher,
    pool: &[Instance],
    threshold: f64,
) -> Result<Vec<Decision>, AnnotationError> {
    let graded: Vec<Instance> = pool.iter().filter(|x| x.gold_label.is_some()).cloned().collect();
    if graded.is_empty() {
        return Err(AnnotationError::EmptyPool);
    }
    matcher.warm(&graded)?;
    rules
        .iter()
        .map(|rule| {
            let hits = matcher.rule_hits(rule, &graded)?;
            if hits.is_empty() {
                return Ok(Decision::Reject);
            }
            let correct = hits.iter().filter(|x| x.gold_label == Some(rule.label)).count();
            let precision = correct as f64 / hits.len() as f64;
            Ok(if precision > threshold {
                Decision::Accept
            } else {
                Decision::Reject
            })
        })
        .collect()
}

fn annotator_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add((index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

/// Records a decision for every undecided (rule, annotator) pair. Oracle
/// policies need `oracle = Some((matcher, pool))`; each annotator draws its
/// noise from its own seeded stream, in candidate order.
pub fn scripted_annotate(
    session: &mut AnnotationSession,
    spec: &ScriptedAnnotatorSpec,
    oracle: Option<(&Matcher, &[Instance])>,
) -> Result<(), AnnotationError> {
    spec.validate()?;
    let truth = if spec.needs_oracle() {
        let (matcher, pool) = oracle.ok_or(AnnotationError::EmptyPool)?;
        Some(oracle_decisions(&session.candidates, matcher, pool, spec.threshold)?)
    } else {
        None
    };
    let annotators = session.annotators.clone();
    let rule_ids: Vec<String> = session.candidates.iter().map(|r| r.id.clone()).collect();
    for (a_idx, annotator) in annotators.iter().enumerate() {
        let mut rng = annotator_rng(spec.seed, a_idx);
        for (r_idx, rule_id) in rule_ids.iter().enumerate() {
            let decision = match spec.policy {
                AnnotatorPolicy::AcceptAll => Decision::Accept,
                AnnotatorPolicy::RejectAll => Decision::Reject,
                AnnotatorPolicy::Oracle => truth.as_ref().expect("oracle computed")[r_idx],
                AnnotatorPolicy::NoisyOracle { p_flip } => {
                    let d = truth.as_ref().expect("oracle computed")[r_idx];
                    if rng.random_bool(p_flip) {
                        flip(d)
                    } else {
                        d
                    }
                }
            };
            if session.decision(rule_id, annotator).is_none() {
                session.record_decision(rule_id, annotator, decision, None)?;
            }
        }
    }
    Ok(())
}

fn flip(d: Decision) -> Decision {
    match d {
        Decision::Accept => Decision::Reject,
        Decision::Reject => Decision::Accept,
    }
}
