//! Probability-sum voting over the per-iteration weak models.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::{argmax_class, WeakModel};
use crate::types::{ClassId, Instance};

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("ensemble has no voting members")]
    Empty,
    #[error("degenerate ensemble: every member has alpha <= 0")]
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Members weighted by their boosting coefficient.
    AlphaWeighted,
    /// Every admitted member counts once.
    #[default]
    EqualWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub model: WeakModel,
    pub voting: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub mode: EnsembleMode,
    pub members: Vec<Member>,
}

impl EnsembleModel {
    pub fn new(mode: EnsembleMode) -> Self {
        Self {
            mode,
            members: Vec::new(),
        }
    }

    pub fn voting(&self) -> impl Iterator<Item = &WeakModel> {
        self.members.iter().filter(|m| m.voting).map(|m| &m.model)
    }

    pub fn voting_count(&self) -> usize {
        self.voting().count()
    }

    /// Appends `model`. In alpha-weighted mode it votes only when
    /// `alpha_t > 0`; in equal-weighted mode only when its dev accuracy (if
    /// given) beats chance, `1/K`.
    pub fn add_member(&self, model: WeakModel, dev_accuracy: Option<f64>) -> EnsembleModel {
        let voting = match self.mode {
            EnsembleMode::AlphaWeighted => model.alpha_t > 0.0,
            EnsembleMode::EqualWeighted => dev_accuracy.is_none_or(|a| a > 1.0 / model.k as f64),
        };
        let mut next = self.clone();
        next.members.push(Member { model, voting });
        next
    }

    fn coefficient(&self, m: &WeakModel) -> f64 {
        match self.mode {
            EnsembleMode::AlphaWeighted => m.alpha_t,
            EnsembleMode::EqualWeighted => 1.0,
        }
    }

    /// Normalized `Σ c_t·m_t(x)` over voting members.
    pub fn proba(&self, x: &Instance) -> Result<Vec<f64>, EnsembleError> {
        let mut members = self.voting().peekable();
        let Some(first) = members.peek() else {
            return Err(match (self.mode, self.members.is_empty()) {
                (EnsembleMode::AlphaWeighted, false) => EnsembleError::Degenerate,
                _ => EnsembleError::Empty,
            });
        };
        let mut acc = vec![0.0; first.k];
        let mut total = 0.0;
        for m in members {
            let c = self.coefficient(m);
            for (a, p) in acc.iter_mut().zip(m.proba_features(&x.features)) {
                *a += c * p;
            }
            total += c;
        }
        if total <= 0.0 {
            return Err(EnsembleError::Degenerate);
        }
        Ok(acc.into_iter().map(|a| a / total).collect())
    }

    pub fn predict(&self, x: &Instance) -> Result<ClassId, EnsembleError> {
        self.proba(x).map(|p| argmax_class(&p))
    }
}

pub fn ensemble_proba(e: &EnsembleModel, x: &Instance) -> Result<Vec<f64>, EnsembleError> {
    e.proba(x)
}

pub fn ensemble_predict(e: &EnsembleModel, x: &Instance) -> Result<ClassId, EnsembleError> {
    e.predict(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::predict_proba;
    use proptest::prelude::*;

    const DIM: usize = 8;

    /// Model whose prediction is `softmax(bias)` for every input.
    fn constant(probs: &[f64], alpha: f64) -> WeakModel {
        let mut m = WeakModel::zeros(probs.len(), DIM);
        m.bias = probs.iter().map(|p| p.ln()).collect();
        m.alpha_t = alpha;
        m
    }

    fn x() -> Instance {
        Instance::new("x", "anything", None, None, DIM).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(u, v)| (u - v).abs() < 1e-12)
    }

    #[test]
    fn single_member_matches_its_model() {
        let m = constant(&[0.2, 0.8], 1.0);
        for mode in [EnsembleMode::AlphaWeighted, EnsembleMode::EqualWeighted] {
            let e = EnsembleModel::new(mode).add_member(m.clone(), None);
            assert!(close(&e.proba(&x()).unwrap(), &predict_proba(&m, &x())));
        }
    }

    #[test]
    fn equal_alpha_averages() {
        let e = EnsembleModel::new(EnsembleMode::AlphaWeighted)
            .add_member(constant(&[0.9, 0.1], 0.7), None)
            .add_member(constant(&[0.5, 0.5], 0.7), None);
        assert!(close(&e.proba(&x()).unwrap(), &[0.7, 0.3]));
    }

    #[test]
    fn equal_weighted_hand_average() {
        let e = EnsembleModel::new(EnsembleMode::EqualWeighted)
            .add_member(constant(&[0.9, 0.1], 5.0), None)
            .add_member(constant(&[0.5, 0.5], 0.1), None);
        assert!(close(&e.proba(&x()).unwrap(), &[0.7, 0.3]));
        assert_eq!(e.predict(&x()).unwrap(), 1);
    }

    #[test]
    fn exact_tie_goes_to_class_one() {
        let e = EnsembleModel::new(EnsembleMode::EqualWeighted).add_member(constant(&[0.5, 0.5], 1.0), None);
        assert_eq!(e.predict(&x()).unwrap(), 1);
    }

    #[test]
    fn worse_than_chance_excluded_in_alpha_mode() {
        let e = EnsembleModel::new(EnsembleMode::AlphaWeighted).add_member(constant(&[0.9, 0.1], 1.0), None);
        let e2 = e.add_member(constant(&[0.1, 0.9], -0.5), None);
        assert_eq!(e2.members.len(), 2);
        assert_eq!(e2.voting_count(), 1);
        assert_eq!(e2.proba(&x()).unwrap(), e.proba(&x()).unwrap());

        let only_bad = EnsembleModel::new(EnsembleMode::AlphaWeighted).add_member(constant(&[0.1, 0.9], -0.5), None);
        assert_eq!(only_bad.proba(&x()), Err(EnsembleError::Degenerate));
        assert_eq!(EnsembleModel::new(EnsembleMode::EqualWeighted).proba(&x()), Err(EnsembleError::Empty));
    }

    #[test]
    fn equal_mode_dev_gate() {
        let e = EnsembleModel::new(EnsembleMode::EqualWeighted);
        let e = e.add_member(constant(&[0.6, 0.4], -1.0), Some(0.8));
        assert_eq!(e.voting_count(), 1);
        let e = e.add_member(constant(&[0.1, 0.9], 2.0), Some(0.5));
        assert_eq!(e.voting_count(), 1);
        assert_eq!(e.members.len(), 2);
    }

    #[test]
    fn dissenting_duplicate_can_flip_narrow_vote() {
        let a = constant(&[0.95, 0.05], 1.0);
        let b = constant(&[0.1, 0.9], 1.0);
        let e = EnsembleModel::new(EnsembleMode::EqualWeighted)
            .add_member(a, None)
            .add_member(b.clone(), None);
        assert_eq!(e.predict(&x()).unwrap(), 1);
        assert_eq!(e.add_member(b, None).predict(&x()).unwrap(), 2);
    }

    proptest! {
        #[test]
        fn alpha_scaling_preserves_predictions(
            rows in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0, 0.01f64..3.0), 1..6),
            scale in 0.01f64..50.0,
        ) {
            let mut a = EnsembleModel::new(EnsembleMode::AlphaWeighted);
            let mut b = EnsembleModel::new(EnsembleMode::AlphaWeighted);
            for (p, q, r, alpha) in &rows {
                let z = p + q + r;
                let probs = [p / z, q / z, r / z];
                a = a.add_member(constant(&probs, *alpha), None);
                b = b.add_member(constant(&probs, alpha * scale), None);
            }
            let pa = a.proba(&x()).unwrap();
            let pb = b.proba(&x()).unwrap();
            prop_assert!(close(&pa, &pb) || pa.iter().zip(&pb).all(|(u, v)| (u - v).abs() < 1e-9));
            prop_assert_eq!(a.predict(&x()).unwrap(), b.predict(&x()).unwrap());
        }

        #[test]
        fn equal_weighted_is_plain_mean(
            rows in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0), 1..6),
        ) {
            let mut e = EnsembleModel::new(EnsembleMode::EqualWeighted);
            let mut mean = [0.0, 0.0];
            for (p, q) in &rows {
                let probs = [p / (p + q), q / (p + q)];
                e = e.add_member(constant(&probs, -1.0), None);
                mean[0] += probs[0] / rows.len() as f64;
                mean[1] += probs[1] / rows.len() as f64;
            }
            let got = e.proba(&x()).unwrap();
            prop_assert!((got[0] - mean[0]).abs() < 1e-9 && (got[1] - mean[1]).abs() < 1e-9);
        }

        #[test]
        fn duplicate_member_keeps_strict_vote(
            rows in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0), 1..5),
            dup in 0usize..5,
        ) {
            let mut e = EnsembleModel::new(EnsembleMode::EqualWeighted);
            let mut models = Vec::new();
            for (p, q, r) in &rows {
                let z = p + q + r;
                let m = constant(&[p / z, q / z, r / z], 1.0);
                e = e.add_member(m.clone(), None);
                models.push(m);
            }
            let p = e.proba(&x()).unwrap();
            let mut sorted = p.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            let before = e.predict(&x()).unwrap();
            let m = models[dup % models.len()].clone();
            let after = e.add_member(m.clone(), None);
            // holds whenever the duplicated member votes for the current winner
            let member_class = argmax_class(&predict_proba(&m, &x()));
            if member_class == before {
                prop_assert_eq!(after.predict(&x()).unwrap(), before);
            }
        }
    }
}
