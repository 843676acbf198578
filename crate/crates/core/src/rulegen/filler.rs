//! Mask fillers: anything that returns the top-k `(token, probability)`
//! predictions for the `[MASK]` slot of a prompt.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::tokenize;
use crate::types::{ClassId, Instance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPrediction {
    pub token: String,
    pub probability: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FillError {
    #[error("no candidate tokens")]
    NoCandidates,
    #[error("mask filler corpus has no labeled records")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("connection to {endpoint} failed after {attempts} attempt(s): {message}")]
    Connection {
        endpoint: String,
        attempts: usize,
        message: String,
    },
    #[error("{endpoint} answered HTTP {status} after {attempts} attempt(s)")]
    Status {
        endpoint: String,
        status: u16,
        attempts: usize,
    },
    #[error("malformed response from {endpoint} after {attempts} attempt(s): {message}")]
    Malformed {
        endpoint: String,
        attempts: usize,
        message: String,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// What a filler sees: the rendered prompt plus the instance it came from.
///
/// `target` is the class the prediction should be conditioned on when it is
/// known (rule proposal on clean instances); matching never passes one.
#[derive(Debug, Clone, Copy)]
pub struct FillRequest<'a> {
    pub prompt: &'a str,
    pub source: &'a Instance,
    pub target: Option<ClassId>,
}

pub trait MaskFiller: Send + Sync {
    fn fill(&self, request: &FillRequest<'_>, k: usize) -> Result<Vec<MaskPrediction>, FillError>;

    /// Upper bound on concurrent `fill` calls.
    fn max_in_flight(&self) -> usize {
        1
    }
}

/// Checks the response invariants: 1..=k predictions, probabilities in
/// [0, 1], sorted descending, summing to at most 1 + 1e-6.
pub fn validate_predictions(preds: &[MaskPrediction], k: usize) -> Result<(), FillError> {
    if preds.is_empty() {
        return Err(FillError::Protocol("empty prediction list".into()));
    }
    if preds.len() > k {
        return Err(FillError::Protocol(format!("{} predictions for k={k}", preds.len())));
    }
    for p in preds {
        if !(0.0..=1.0).contains(&p.probability) {
            return Err(FillError::Protocol(format!(
                "probability {} for {:?} outside [0, 1]",
                p.probability, p.token
            )));
        }
        if p.token.trim().is_empty() {
            return Err(FillError::Protocol("empty token".into()));
        }
    }
    if preds.windows(2).any(|w| w[0].probability < w[1].probability) {
        return Err(FillError::Protocol("not sorted".into()));
    }
    let total: f64 = preds.iter().map(|p| p.probability).sum();
    if total > 1.0 + 1e-6 {
        return Err(FillError::Protocol(format!("probabilities sum to {total}")));
    }
    Ok(())
}

/// Maps raw model tokens through the crate tokenizer. Predictions that
/// normalize to nothing are dropped; later duplicates are dropped.
pub fn normalize_predictions(preds: Vec<MaskPrediction>) -> Vec<MaskPrediction> {
    let mut seen = BTreeSet::new();
    preds
        .into_iter()
        .filter_map(|p| {
            let token = tokenize(&p.token).join(" ");
            (!token.is_empty() && seen.insert(token.clone())).then_some(MaskPrediction {
                token,
                probability: p.probability,
            })
        })
        .collect()
}

/// Sort by probability descending, then token ascending.
fn rank(preds: &mut [MaskPrediction]) {
    preds.sort_by(|a, b| {
        b.probability
            .partial_cmp(&a.probability)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.token.cmp(&b.token))
    });
}

/// Deterministic filler driven by class-conditional token statistics of a
/// labeled corpus.
///
/// The candidate pool for an instance is its own tokens plus a small
/// class-indicative lexicon (the top tokens of every class). Each candidate is
/// scored by its add-one smoothed log-odds toward the target class, and the
/// scores are passed through a softmax. Without a target, the class is the
/// multinomial naive-Bayes reading of the instance under the same counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStatsFiller {
    num_classes: usize,
    counts: HashMap<String, Vec<u64>>,
    class_totals: Vec<u64>,
    class_docs: Vec<u64>,
    lexicon: Vec<String>,
}

impl CorpusStatsFiller {
    /// `corpus` yields `(tokens, label)` pairs with labels in `1..=num_classes`;
    /// other labels are ignored.
    pub fn new<'a>(
        corpus: impl IntoIterator<Item = (&'a [String], ClassId)>,
        num_classes: usize,
        lexicon_per_class: usize,
    ) -> Result<Self, FillError> {
        let mut counts: HashMap<String, Vec<u64>> = HashMap::new();
        let mut class_totals = vec![0u64; num_classes];
        let mut class_docs = vec![0u64; num_classes];
        for (tokens, label) in corpus {
            if label == 0 || label > num_classes {
                continue;
            }
            let c = label - 1;
            class_docs[c] += 1;
            for t in tokens {
                counts.entry(t.clone()).or_insert_with(|| vec![0; num_classes])[c] += 1;
                class_totals[c] += 1;
            }
        }
        if class_docs.iter().all(|d| *d == 0) {
            return Err(FillError::EmptyCorpus);
        }
        let mut filler = Self {
            num_classes,
            counts,
            class_totals,
            class_docs,
            lexicon: Vec::new(),
        };
        filler.lexicon = filler.build_lexicon(lexicon_per_class);
        Ok(filler)
    }

    fn build_lexicon(&self, per_class: usize) -> Vec<String> {
        let mut vocab: Vec<&String> = self.counts.keys().collect();
        vocab.sort();
        let mut lexicon = BTreeSet::new();
        for class in 1..=self.num_classes {
            let mut scored: Vec<(f64, &String)> = vocab
                .iter()
                .filter(|t| self.counts[**t][class - 1] > 0)
                .map(|t| (self.log_odds(t, class), *t))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1)));
            lexicon.extend(scored.into_iter().take(per_class).map(|(_, t)| t.clone()));
        }
        lexicon.into_iter().collect()
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }

    fn vocab_size(&self) -> f64 {
        self.counts.len().max(1) as f64
    }

    /// `ln P(t | c) - ln P(t | not c)`, both add-one smoothed.
    pub fn log_odds(&self, token: &str, class: ClassId) -> f64 {
        let c = class - 1;
        let v = self.vocab_size();
        let in_class = self.counts.get(token).map_or(0, |n| n[c]) as f64;
        let total = self.counts.get(token).map_or(0, |n| n.iter().sum::<u64>()) as f64;
        let n_c = self.class_totals[c] as f64;
        let n_rest = self.class_totals.iter().sum::<u64>() as f64 - n_c;
        ((in_class + 1.0) / (n_c + v)).ln() - ((total - in_class + 1.0) / (n_rest + v)).ln()
    }

    /// Multinomial naive-Bayes class of a token sequence; ties to the lowest id.
    pub fn infer_class(&self, tokens: &[String]) -> ClassId {
        let v = self.vocab_size();
        let docs: u64 = self.class_docs.iter().sum();
        let mut best = (f64::NEG_INFINITY, 1);
        for class in 1..=self.num_classes {
            let c = class - 1;
            let prior = ((self.class_docs[c] as f64 + 1.0) / (docs as f64 + self.num_classes as f64)).ln();
            let denom = self.class_totals[c] as f64 + v;
            let score = prior
                + tokens
                    .iter()
                    .map(|t| ((self.counts.get(t).map_or(0, |n| n[c]) as f64 + 1.0) / denom).ln())
                    .sum::<f64>();
            if score > best.0 {
                best = (score, class);
            }
        }
        best.1
    }

    /// Softmax over the whole candidate pool, ranked.
    pub fn distribution(&self, request: &FillRequest<'_>) -> Result<Vec<MaskPrediction>, FillError> {
        let source = request.source;
        let target = request
            .target
            .filter(|c| (1..=self.num_classes).contains(c))
            .unwrap_or_else(|| self.infer_class(&source.tokens));
        let pool: BTreeSet<&String> = source.tokens.iter().chain(&self.lexicon).collect();
        if pool.is_empty() {
            return Err(FillError::NoCandidates);
        }
        let scored: Vec<(&String, f64)> = pool.into_iter().map(|t| (t, self.log_odds(t, target))).collect();
        let max = scored.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scored.iter().map(|(_, s)| (s - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        let mut preds: Vec<MaskPrediction> = scored
            .iter()
            .zip(exp)
            .map(|((t, _), e)| MaskPrediction {
                token: (*t).clone(),
                probability: e / z,
            })
            .collect();
        rank(&mut preds);
        Ok(preds)
    }
}

impl MaskFiller for CorpusStatsFiller {
    fn fill(&self, request: &FillRequest<'_>, k: usize) -> Result<Vec<MaskPrediction>, FillError> {
        if k == 0 {
            return Err(FillError::ZeroK);
        }
        let mut preds = self.distribution(request)?;
        preds.truncate(k);
        Ok(preds)
    }

    fn max_in_flight(&self) -> usize {
        4
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(t: &str, p: f64) -> MaskPrediction {
        MaskPrediction {
            token: t.into(),
            probability: p,
        }
    }

    #[test]
    fn validation_rules() {
        assert!(validate_predictions(&[pred("a", 0.5), pred("b", 0.3)], 3).is_ok());
        assert_eq!(
            validate_predictions(&[pred("a", 0.2), pred("b", 0.5)], 3),
            Err(FillError::Protocol("not sorted".into()))
        );
        assert!(validate_predictions(&[], 3).is_err());
        assert!(validate_predictions(&[pred("a", 0.7), pred("b", 0.6)], 3).is_err());
        assert!(validate_predictions(&[pred("a", 0.5), pred("b", 0.3)], 1).is_err());
        assert!(validate_predictions(&[pred("a", 1.5)], 1).is_err());
        assert!(validate_predictions(&[pred(" ", 0.5)], 1).is_err());
    }

    #[test]
    fn normalization_lowercases_and_dedups() {
        let out = normalize_predictions(vec![pred("Sports", 0.5), pred("sports", 0.2), pred("!!", 0.1), pred("Team", 0.1)]);
        assert_eq!(out, vec![pred("sports", 0.5), pred("team", 0.1)]);
    }

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn ties_are_alphabetical_and_k_truncates() {
        let docs = [toks("alpha beta"), toks("gamma delta")];
        let corpus = vec![(docs[0].as_slice(), 1), (docs[1].as_slice(), 2)];
        let f = CorpusStatsFiller::new(corpus, 2, 0).unwrap();
        let x = Instance::new("x", "beta alpha", Some(1), None, 16).unwrap();
        let req = FillRequest {
            prompt: "",
            source: &x,
            target: Some(1),
        };
        let preds = f.fill(&req, 10).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].token, "alpha");
        assert_eq!(preds[1].token, "beta");
        assert_eq!(preds[0].probability, preds[1].probability);
    }

    #[test]
    fn empty_pool_and_empty_corpus() {
        let docs = [toks("alpha")];
        let f = CorpusStatsFiller::new(vec![(docs[0].as_slice(), 1)], 2, 0).unwrap();
        let x = Instance::new("x", "", Some(1), None, 16).unwrap();
        let req = FillRequest {
            prompt: "",
            source: &x,
            target: Some(1),
        };
        assert_eq!(f.fill(&req, 3), Err(FillError::NoCandidates));
        assert_eq!(
            CorpusStatsFiller::new(Vec::<(&[String], ClassId)>::new(), 2, 3).unwrap_err(),
            FillError::EmptyCorpus
        );
    }

    #[test]
    fn infers_class_without_target() {
        let docs = [toks("goal match team"), toks("stock market bank")];
        let f = CorpusStatsFiller::new(vec![(docs[0].as_slice(), 1), (docs[1].as_slice(), 2)], 2, 1).unwrap();
        assert_eq!(f.infer_class(&toks("the bank stock")), 2);
        assert_eq!(f.infer_class(&toks("team goal")), 1);
        assert_eq!(f.lexicon().len(), 2);
    }
}
