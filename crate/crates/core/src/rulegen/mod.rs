//! Candidate rule proposal: large-error instances are rendered into prompts,
//! the `[MASK]` slot is filled, and each top prediction becomes a candidate
//! rule carrying the instance's gold label.

mod filler;
mod http;
mod template;

use std::collections::HashSet;

use thiserror::Error;

pub use filler::{
    normalize_predictions, validate_predictions, CorpusStatsFiller, FillError, FillRequest, MaskFiller,
    MaskPrediction,
};
pub use http::{http_lm_fill, HttpFillerConfig, HttpMaskFiller};
pub use template::{load_templates, RuleTemplate, TaskKind, MASK};

use crate::types::{ClassId, Instance, LabelSpace, Rule, RuleStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleGenError {
    #[error("template {id}: {reason}")]
    Template { id: String, reason: String },
    #[error("template file: {0}")]
    TemplateFile(String),
    #[error("relation template {template} needs an entity pair on instance {instance}")]
    MissingEntityPair { template: String, instance: String },
    #[error("instance {0} has an entity span outside its text")]
    BadEntitySpan(String),
    #[error("instance {0} already contains a [MASK] token")]
    MaskInInput(String),
    #[error("instance {0} has no gold label to propose rules for")]
    Unlabeled(String),
    #[error("candidates per instance ({per_instance}) exceeds k ({k})")]
    PerInstanceExceedsK { per_instance: usize, k: usize },
    #[error(transparent)]
    Fill(#[from] FillError),
}

/// Runs `fill` over every request, at most `filler.max_in_flight()` at a
/// time; results come back in request order.
pub fn fill_all(
    filler: &dyn MaskFiller,
    requests: &[FillRequest<'_>],
    k: usize,
) -> Vec<Result<Vec<MaskPrediction>, FillError>> {
    let width = filler.max_in_flight().max(1);
    if width == 1 || requests.len() < 2 {
        return requests.iter().map(|r| filler.fill(r, k)).collect();
    }
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(width) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|r| s.spawn(move || filler.fill(r, k))).collect();
            out.extend(handles.into_iter().map(|h| h.join().expect("mask filler panicked")));
        });
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct ProposalConfig {
    /// Predictions requested from the filler.
    pub k: usize,
    /// Candidate rules kept per instance (`≤ k`).
    pub per_instance: usize,
    pub iteration: usize,
}

/// One candidate rule per top prediction of every large-error instance, in
/// input order. Exact duplicates on (template, vocabulary, constraint, label)
/// keep the earliest.
pub fn assemble_candidates(
    large_error: &[&Instance],
    template: &RuleTemplate,
    filler: &dyn MaskFiller,
    cfg: ProposalConfig,
    labels: &LabelSpace,
) -> Result<Vec<Rule>, RuleGenError> {
    if cfg.per_instance > cfg.k {
        return Err(RuleGenError::PerInstanceExceedsK {
            per_instance: cfg.per_instance,
            k: cfg.k,
        });
    }
    let mut gold: Vec<ClassId> = Vec::with_capacity(large_error.len());
    let mut prompts = Vec::with_capacity(large_error.len());
    for x in large_error {
        gold.push(x.gold_label.ok_or_else(|| RuleGenError::Unlabeled(x.id.clone()))?);
        prompts.push(template.render_prompt(x)?);
    }
    let requests: Vec<FillRequest<'_>> = large_error
        .iter()
        .zip(&prompts)
        .zip(&gold)
        .map(|((x, prompt), label)| FillRequest {
            prompt,
            source: x,
            target: Some(*label),
        })
        .collect();
    let filled = fill_all(filler, &requests, cfg.k);

    let mut rules = Vec::new();
    let mut seen = HashSet::new();
    for ((x, prompt), (label, preds)) in large_error.iter().zip(&prompts).zip(gold.iter().zip(filled)) {
        let constraint = match template.task_kind {
            TaskKind::Relation => x.entity_pair.as_ref().map(|p| p.constraint()),
            TaskKind::Classification => None,
        };
        for p in preds?.into_iter().take(cfg.per_instance) {
            let mut rule = Rule {
                id: format!("it{}-r{:03}", cfg.iteration, rules.len()),
                template_id: template.id.clone(),
                mask_vocabulary: vec![p.token],
                entity_constraint: constraint.clone(),
                label: *label,
                source_instance_id: x.id.clone(),
                source_text: x.text.clone(),
                prompt: prompt.clone(),
                iteration: cfg.iteration,
                status: RuleStatus::Candidate,
                rule_text: String::new(),
            };
            if seen.insert(rule.dedup_key()) {
                rule.rule_text = rule.render(labels);
                rules.push(rule);
            }
        }
    }
    Ok(rules)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns `k` fixed tokens per prompt, independent of the input.
    struct Fixed(Vec<&'static str>);

    impl MaskFiller for Fixed {
        fn fill(&self, _r: &FillRequest<'_>, k: usize) -> Result<Vec<MaskPrediction>, FillError> {
            let n = self.0.len().min(k) as f64;
            Ok(self
                .0
                .iter()
                .take(k)
                .enumerate()
                .map(|(i, t)| MaskPrediction {
                    token: t.to_string(),
                    probability: (n - i as f64) / (n * (n + 1.0)),
                })
                .collect())
        }

        fn max_in_flight(&self) -> usize {
            3
        }
    }

    /// Echoes the instance's own tokens, one per prediction.
    struct Echo;

    impl MaskFiller for Echo {
        fn fill(&self, r: &FillRequest<'_>, k: usize) -> Result<Vec<MaskPrediction>, FillError> {
            let n = r.source.tokens.len().min(k);
            Ok(r.source
                .tokens
                .iter()
                .take(k)
                .map(|t| MaskPrediction {
                    token: t.clone(),
                    probability: 1.0 / n as f64,
                })
                .collect())
        }
    }

    fn labels() -> LabelSpace {
        LabelSpace::new(["world", "sports", "business", "tech"]).unwrap()
    }

    fn news() -> RuleTemplate {
        RuleTemplate::classification("news", "[MASK] News: [INPUT]").unwrap()
    }

    fn cfg(k: usize, per_instance: usize) -> ProposalConfig {
        ProposalConfig { k, per_instance, iteration: 1 }
    }

    #[test]
    fn ten_by_ten_gives_hundred() {
        let xs: Vec<Instance> = (0..10)
            .map(|i| {
                let text = (0..10).map(|j| format!("w{i}x{j}")).collect::<Vec<_>>().join(" ");
                Instance::new(format!("e{i}"), text, Some(1 + i % 4), None, 64).unwrap()
            })
            .collect();
        let refs: Vec<&Instance> = xs.iter().collect();
        let rules = assemble_candidates(&refs, &news(), &Echo, cfg(10, 10), &labels()).unwrap();
        assert_eq!(rules.len(), 100);
        for r in &rules {
            let src = xs.iter().find(|x| x.id == r.source_instance_id).unwrap();
            assert_eq!(Some(r.label), src.gold_label);
            assert_eq!(r.mask_vocabulary.len(), 1);
            assert_eq!(r.status, RuleStatus::Candidate);
        }
        // input order is preserved despite concurrent filling
        let order: Vec<&str> = rules.iter().step_by(10).map(|r| r.source_instance_id.as_str()).collect();
        assert_eq!(order, (0..10).map(|i| format!("e{i}")).collect::<Vec<_>>());
    }

    #[test]
    fn identical_rules_deduplicated() {
        let a = Instance::new("a", "x", Some(2), None, 16).unwrap();
        let b = Instance::new("b", "y", Some(2), None, 16).unwrap();
        let rules = assemble_candidates(&[&a, &b], &news(), &Fixed(vec!["football"]), cfg(10, 1), &labels()).unwrap();
        assert_eq!(rules.len(), 1);
        assert_eq!(rules[0].source_instance_id, "a");
        assert_eq!(rules[0].rule_text, "{[MASK] == football} & {score > sigma} -> sports");
    }

    #[test]
    fn minimal_case() {
        let a = Instance::new("a", "x", Some(3), None, 16).unwrap();
        let rules = assemble_candidates(&[&a], &news(), &Fixed(vec!["stocks", "bank"]), cfg(10, 1), &labels()).unwrap();
        assert_eq!(rules.len(), 1);
        assert_eq!(rules[0].label, 3);
        assert_eq!(rules[0].mask_vocabulary, vec!["stocks"]);
        assert_eq!(rules[0].prompt, "[MASK] News: x");
    }

    #[test]
    fn precondition_errors() {
        let a = Instance::new("a", "x", None, None, 16).unwrap();
        assert!(matches!(
            assemble_candidates(&[&a], &news(), &Echo, cfg(10, 1), &labels()),
            Err(RuleGenError::Unlabeled(_))
        ));
        assert!(matches!(
            assemble_candidates(&[], &news(), &Echo, cfg(2, 3), &labels()),
            Err(RuleGenError::PerInstanceExceedsK { .. })
        ));
    }

    #[test]
    fn relation_rules_copy_entity_constraint() {
        use crate::types::EntityPair;
        let t = RuleTemplate::relation("rel", "[INPUT] The Person [HEAD] [MASK] the Organization [TAIL].").unwrap();
        let text = "Microsoft is an American technology corporation founded by Bill Gates.";
        let pair = EntityPair {
            head_type: "Person".into(),
            tail_type: "Organization".into(),
            head: (59, 69),
            tail: (0, 9),
        };
        let x = Instance::new("a", text, Some(1), Some(pair), 16).unwrap();
        let rules = assemble_candidates(&[&x], &t, &Fixed(vec!["founded"]), cfg(10, 1), &labels()).unwrap();
        let c = rules[0].entity_constraint.as_ref().unwrap();
        assert_eq!((c.head_type.as_str(), c.tail_type.as_str()), ("Person", "Organization"));
    }
}
