//! Soft matching of accepted rules against unlabeled instances.
//!
//! A rule scores an instance with `alpha·s_a + (1 - alpha)·s_b`, where `s_a` is
//! the cosine between the instance features and the rule embedding, and
//! `s_b = |V_u ∩ V_r| / k` compares the instance's own top-k mask predictions
//! with the rule vocabulary. The best-scoring rule above `sigma` labels the
//! instance; otherwise it is left unlabeled.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{featurize, tokenize, FeatureError, SparseVector};
use crate::rulegen::{fill_all, FillError, FillRequest, MaskFiller, RuleGenError, RuleTemplate};
use crate::types::{ClassId, Dataset, DatasetKind, Instance, Rule, WeakLabelRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("invalid match config: {0}")]
    Config(String),
    #[error("instance vocabulary has {got} tokens, expected k = {k}")]
    VocabSize { got: usize, k: usize },
    #[error("rule vocabulary has {got} tokens, more than k = {k}")]
    RuleVocabSize { got: usize, k: usize },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Fill(#[from] FillError),
    #[error(transparent)]
    Prompt(#[from] RuleGenError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Weight of the embedding similarity.
    pub alpha: f64,
    /// Matching threshold; a rule matches only when its score is strictly above.
    pub sigma: f64,
    /// Size of the instance vocabulary.
    pub k: usize,
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(MatchError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(MatchError::Config(format!("sigma {} outside [0, 1]", self.sigma)));
        }
        if self.k == 0 {
            return Err(MatchError::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            sigma: 0.3,
            k: 10,
        }
    }
}

/// Cosine similarity clamped to [0, 1]; 0 when either side is the zero vector.
pub fn embedding_similarity(e_u: &SparseVector, e_r: &SparseVector) -> Result<f64, MatchError> {
    let dot = e_u.dot(e_r)?;
    if e_u.is_zero() || e_r.is_zero() {
        return Ok(0.0);
    }
    Ok((dot / (e_u.norm() * e_r.norm())).clamp(0.0, 1.0))
}

fn overlap_ratio(v_u: &BTreeSet<String>, v_r: &BTreeSet<String>, k: usize) -> f64 {
    v_u.intersection(v_r).count() as f64 / k as f64
}

/// `|V_u ∩ V_r| / k`, requiring `|V_u| = k` and `|V_r| ≤ k`.
pub fn vocab_similarity(v_u: &BTreeSet<String>, v_r: &BTreeSet<String>, k: usize) -> Result<f64, MatchError> {
    if v_u.len() != k {
        return Err(MatchError::VocabSize { got: v_u.len(), k });
    }
    if v_r.len() > k {
        return Err(MatchError::RuleVocabSize { got: v_r.len(), k });
    }
    Ok(overlap_ratio(v_u, v_r, k))
}

pub fn matching_score(s_a: f64, s_b: f64, alpha: f64) -> f64 {
    alpha * s_a + (1.0 - alpha) * s_b
}

/// Rule embedding: the hashed bag of its vocabulary tokens.
pub fn rule_embedding(rule: &Rule, space_size: usize) -> Result<SparseVector, MatchError> {
    let tokens: Vec<String> = rule.mask_vocabulary.iter().flat_map(|t| tokenize(t)).collect();
    Ok(featurize(&tokens, space_size)?)
}

/// An accepted rule with its precomputed embedding and vocabulary set.
#[derive(Debug, Clone)]
pub struct PreparedRule<'a> {
    pub rule: &'a Rule,
    pub embedding: SparseVector,
    pub vocabulary: BTreeSet<String>,
}

impl<'a> PreparedRule<'a> {
    pub fn new(rule: &'a Rule, space_size: usize) -> Result<Self, MatchError> {
        Ok(Self {
            rule,
            embedding: rule_embedding(rule, space_size)?,
            vocabulary: rule.mask_vocabulary.iter().cloned().collect(),
        })
    }
}

fn constraint_holds(rule: &Rule, x: &Instance) -> bool {
    match (&rule.entity_constraint, &x.entity_pair) {
        (None, _) => true,
        (Some(c), Some(p)) => c.head_type == p.head_type && c.tail_type == p.tail_type,
        (Some(_), None) => false,
    }
}

/// Scores closer than this are treated as equal, so rounding noise in the
/// cosine cannot decide a tie or push a score across the threshold.
pub const SCORE_TOLERANCE: f64 = 1e-12;

fn compare_scores(a: f64, b: f64) -> Ordering {
    if (a - b).abs() <= SCORE_TOLERANCE {
        Ordering::Equal
    } else {
        a.partial_cmp(&b).unwrap_or(Ordering::Equal)
    }
}

/// `score > sigma`, with scores within [`SCORE_TOLERANCE`] of sigma counted
/// as equal to it.
pub fn exceeds(score: f64, sigma: f64) -> bool {
    compare_scores(score, sigma) == Ordering::Greater
}

/// Higher score first, then older iteration, then smaller rule id.
fn better(a: (f64, &Rule), b: (f64, &Rule)) -> bool {
    match compare_scores(a.0, b.0) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => (a.1.iteration, &a.1.id) < (b.1.iteration, &b.1.id),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub weak_labeled: Dataset,
    pub records: Vec<WeakLabelRecord>,
    pub coverage: f64,
    /// Share of matched instances whose weak label equals the hidden gold
    /// label; `None` unless every matched instance carries one.
    pub rule_accuracy: Option<f64>,
}

/// Matching context: configuration, the prompt template, the mask filler and
/// a memo of instance vocabularies (a pure function of instance, template and
/// filler).
pub struct Matcher {
    cfg: MatchConfig,
    space_size: usize,
    template: RuleTemplate,
    filler: Arc<dyn MaskFiller>,
    vocab_cache: RwLock<HashMap<String, Arc<BTreeSet<String>>>>,
}

impl Matcher {
    pub fn new(
        cfg: MatchConfig,
        space_size: usize,
        template: RuleTemplate,
        filler: Arc<dyn MaskFiller>,
    ) -> Result<Self, MatchError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            space_size,
            template,
            filler,
            vocab_cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> MatchConfig {
        self.cfg
    }

    /// Same template, filler and cache under a different threshold.
    pub fn with_sigma(&self, sigma: f64) -> Result<Self, MatchError> {
        let cfg = MatchConfig { sigma, ..self.cfg };
        cfg.validate()?;
        let cache = self.vocab_cache.read().expect("vocab cache poisoned").clone();
        Ok(Self {
            cfg,
            space_size: self.space_size,
            template: self.template.clone(),
            filler: Arc::clone(&self.filler),
            vocab_cache: RwLock::new(cache),
        })
    }

    pub fn prepare<'a>(&self, rules: &'a [Rule]) -> Result<Vec<PreparedRule<'a>>, MatchError> {
        rules.iter().map(|r| PreparedRule::new(r, self.space_size)).collect()
    }

    fn cache_key(&self, x: &Instance) -> String {
        format!("{}\u{1f}{}", self.template.id, x.id)
    }

    /// Fills the vocabulary cache for every instance not yet in it.
    pub fn warm(&self, instances: &[Instance]) -> Result<(), MatchError> {
        let missing: Vec<&Instance> = {
            let cache = self.vocab_cache.read().expect("vocab cache poisoned");
            instances
                .iter()
                .filter(|x| !cache.contains_key(&self.cache_key(x)))
                .collect()
        };
        if missing.is_empty() {
            return Ok(());
        }
        let prompts = missing
            .iter()
            .map(|x| self.template.render_prompt(x))
            .collect::<Result<Vec<_>, _>>()?;
        let requests: Vec<FillRequest<'_>> = missing
            .iter()
            .zip(&prompts)
            .map(|(x, prompt)| FillRequest {
                prompt,
                source: x,
                target: None,
            })
            .collect();
        let filled = fill_all(self.filler.as_ref(), &requests, self.cfg.k);
        let mut cache = self.vocab_cache.write().expect("vocab cache poisoned");
        for (x, preds) in missing.iter().zip(filled) {
            let vocab: BTreeSet<String> = preds?.into_iter().map(|p| p.token).collect();
            cache.insert(self.cache_key(x), Arc::new(vocab));
        }
        Ok(())
    }

    /// Top-k mask predictions of the instance's prompt, as a token set.
    pub fn instance_vocab(&self, x: &Instance) -> Result<Arc<BTreeSet<String>>, MatchError> {
        if let Some(v) = self.vocab_cache.read().expect("vocab cache poisoned").get(&self.cache_key(x)) {
            return Ok(Arc::clone(v));
        }
        self.warm(std::slice::from_ref(x))?;
        Ok(Arc::clone(
            &self.vocab_cache.read().expect("vocab cache poisoned")[&self.cache_key(x)],
        ))
    }

    /// Combined score of one rule on one instance; 0 when the entity
    /// constraint does not hold.
    pub fn score(&self, x: &Instance, v_u: &BTreeSet<String>, rule: &PreparedRule<'_>) -> Result<f64, MatchError> {
        if !constraint_holds(rule.rule, x) {
            return Ok(0.0);
        }
        let s_a = embedding_similarity(&x.features, &rule.embedding)?;
        // A filler may return fewer than k predictions for a small pool; the
        // ratio keeps k as its denominator either way.
        let s_b = if v_u.len() == self.cfg.k {
            vocab_similarity(v_u, &rule.vocabulary, self.cfg.k)?
        } else {
            overlap_ratio(v_u, &rule.vocabulary, self.cfg.k)
        };
        Ok(matching_score(s_a, s_b, self.cfg.alpha))
    }

    /// Highest-scoring rule and its score, regardless of the threshold.
    pub fn best_rule<'r>(
        &self,
        x: &Instance,
        rules: &'r [PreparedRule<'r>],
    ) -> Result<Option<(f64, &'r Rule)>, MatchError> {
        if rules.is_empty() {
            return Ok(None);
        }
        let v_u = self.instance_vocab(x)?;
        let mut best: Option<(f64, &Rule)> = None;
        for r in rules {
            let s = self.score(x, &v_u, r)?;
            if best.is_none_or(|b| better((s, r.rule), b)) {
                best = Some((s, r.rule));
            }
        }
        Ok(best)
    }

    pub fn match_instance(&self, x: &Instance, rules: &[PreparedRule<'_>]) -> Result<Option<WeakLabelRecord>, MatchError> {
        Ok(self
            .best_rule(x, rules)?
            .filter(|(s, _)| exceeds(*s, self.cfg.sigma))
            .map(|(s, rule)| WeakLabelRecord {
                instance_id: x.id.clone(),
                label: rule.label,
                rule_id: rule.id.clone(),
                matching_score: s,
                iteration: rule.iteration,
            }))
    }

    /// Instances of `pool` matched by `rule` alone.
    pub fn rule_hits<'p>(&self, rule: &Rule, pool: &'p [Instance]) -> Result<Vec<&'p Instance>, MatchError> {
        self.warm(pool)?;
        let prepared = PreparedRule::new(rule, self.space_size)?;
        let mut hits = Vec::new();
        for x in pool {
            let v_u = self.instance_vocab(x)?;
            if exceeds(self.score(x, &v_u, &prepared)?, self.cfg.sigma) {
                hits.push(x);
            }
        }
        Ok(hits)
    }

    pub fn apply_rules(&self, unlabeled: &Dataset, rules: &[Rule]) -> Result<MatchOutcome, MatchError> {
        let prepared = self.prepare(rules)?;
        if !prepared.is_empty() {
            self.warm(&unlabeled.instances)?;
        }
        let mut records = Vec::new();
        for x in &unlabeled.instances {
            if let Some(rec) = self.match_instance(x, &prepared)? {
                records.push(rec);
            }
        }
        Ok(summarize(unlabeled, records))
    }
}

/// Builds the weak-labeled dataset and coverage statistics for `records`
/// (at most one per instance of `unlabeled`).
pub fn summarize(unlabeled: &Dataset, records: Vec<WeakLabelRecord>) -> MatchOutcome {
    let by_id: HashMap<&str, &WeakLabelRecord> = records.iter().map(|r| (r.instance_id.as_str(), r)).collect();
    let mut weak = Vec::with_capacity(records.len());
    let mut correct = 0usize;
    let mut graded = 0usize;
    for x in &unlabeled.instances {
        if let Some(rec) = by_id.get(x.id.as_str()) {
            if let Some(g) = x.gold_label {
                graded += 1;
                correct += usize::from(g == rec.label);
            }
            weak.push(x.clone().with_label(Some(rec.label)));
        }
    }
    let matched = weak.len();
    let coverage = if unlabeled.is_empty() {
        0.0
    } else {
        matched as f64 / unlabeled.len() as f64
    };
    let rule_accuracy = (matched > 0 && graded == matched).then(|| correct as f64 / matched as f64);
    MatchOutcome {
        weak_labeled: Dataset::new(DatasetKind::WeakLabeled, weak),
        records,
        coverage,
        rule_accuracy,
    }
}

/// Default threshold grid for [`sweep_sigma`]: 0.30, 0.35, ..., 0.90.
pub fn default_sigma_grid() -> Vec<f64> {
    (0..=12).map(|i| 0.30 + 0.05 * i as f64).map(|s| (s * 100.0).round() / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSweep {
    pub best_sigma: f64,
    pub best_f1: f64,
    /// `(sigma, precision, recall, f1)` per grid point.
    pub table: Vec<(f64, f64, f64, f64)>,
}

/// Picks the threshold maximizing weak-label F1 on a labeled dev set.
/// Precision is over matched instances, recall over all of `dev`; ties keep
/// the smaller threshold.
pub fn sweep_sigma(matcher: &Matcher, dev: &Dataset, rules: &[Rule], grid: &[f64]) -> Result<SigmaSweep, MatchError> {
    let prepared = matcher.prepare(rules)?;
    matcher.warm(&dev.instances)?;
    let mut best: Vec<Option<(f64, ClassId, Option<ClassId>)>> = Vec::with_capacity(dev.len());
    for x in &dev.instances {
        best.push(matcher.best_rule(x, &prepared)?.map(|(s, r)| (s, r.label, x.gold_label)));
    }
    let n = dev.len().max(1) as f64;
    let mut table = Vec::with_capacity(grid.len());
    let mut winner = (f64::NAN, -1.0);
    for &sigma in grid {
        let matched: Vec<_> = best.iter().flatten().filter(|(s, _, _)| exceeds(*s, sigma)).collect();
        let correct = matched.iter().filter(|(_, l, g)| Some(*l) == *g).count() as f64;
        let precision = if matched.is_empty() { 0.0 } else { correct / matched.len() as f64 };
        let recall = correct / n;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        table.push((sigma, precision, recall, f1));
        if f1 > winner.1 {
            winner = (sigma, f1);
        }
    }
    Ok(SigmaSweep {
        best_sigma: winner.0,
        best_f1: winner.1.max(0.0),
        table,
    })
}
