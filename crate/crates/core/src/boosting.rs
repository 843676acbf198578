//! Instance weighting on the clean set and multiclass (SAMME) model
//! coefficients.
//!
//! Each round misclassified clean instances are up-weighted by `e^alpha`,
//! where `alpha = ln((1 - err) / err) + ln(K - 1)` and `err` is the weighted
//! error of the newest weak model. The heaviest misclassified instances seed
//! the next round of rule discovery.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ClassId, Dataset, Instance};

/// Lower clamp for the error rate; `alpha` is singular at 0.
pub const ERR_EPSILON: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum BoostError {
    #[error("empty clean set")]
    EmptyCleanSet,
    #[error("length mismatch: {weights} weights, {predictions} predictions, {gold} gold labels")]
    LengthMismatch {
        weights: usize,
        predictions: usize,
        gold: usize,
    },
    #[error("model coefficient must be finite, got {0}")]
    NonFiniteAlpha(f64),
    #[error("invalid error rate {0}")]
    InvalidErrorRate(f64),
    #[error("K must be at least 2, got {0}")]
    TooFewClasses(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostRound {
    pub err: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostState {
    pub weights: Vec<f64>,
    pub iteration: usize,
    pub history: Vec<BoostRound>,
}

pub fn init_weights(n_clean: usize) -> Result<BoostState, BoostError> {
    if n_clean == 0 {
        return Err(BoostError::EmptyCleanSet);
    }
    Ok(BoostState {
        weights: vec![1.0 / n_clean as f64; n_clean],
        iteration: 0,
        history: Vec::new(),
    })
}

fn check_lengths(state: &BoostState, predictions: &[ClassId], gold: &[ClassId]) -> Result<(), BoostError> {
    let n = state.weights.len();
    if predictions.len() != n || gold.len() != n {
        return Err(BoostError::LengthMismatch {
            weights: n,
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    Ok(())
}

/// Weighted misclassification rate `Σ w_i·[y_i ≠ m(x_i)] / Σ w_i`.
pub fn weighted_error(state: &BoostState, predictions: &[ClassId], gold: &[ClassId]) -> Result<f64, BoostError> {
    check_lengths(state, predictions, gold)?;
    let total: f64 = state.weights.iter().sum();
    let wrong: f64 = state
        .weights
        .iter()
        .zip(predictions.iter().zip(gold))
        .filter(|(_, (p, g))| p != g)
        .fold(0.0, |acc, (w, _)| acc + w);
    Ok((wrong / total).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub alpha: f64,
    /// The error rate was clamped away from 0 or 1.
    pub clamped: bool,
    /// `err ≥ (K-1)/K`: the model is no better than chance and `alpha ≤ 0`.
    pub worse_than_chance: bool,
}

/// `alpha = ln((1 - err) / err) + ln(K - 1)`, natural log.
pub fn model_coefficient(err: f64, k: usize) -> Result<Coefficient, BoostError> {
    if k < 2 {
        return Err(BoostError::TooFewClasses(k));
    }
    if !(0.0..=1.0).contains(&err) {
        return Err(BoostError::InvalidErrorRate(err));
    }
    let clamped_err = err.clamp(ERR_EPSILON, 1.0 - ERR_EPSILON);
    let clamped = clamped_err != err;
    if clamped {
        log::warn!("error rate {err} clamped to {clamped_err}");
    }
    let kf = k as f64;
    let alpha = ((1.0 - clamped_err) / clamped_err).ln() + (kf - 1.0).ln();
    Ok(Coefficient {
        alpha,
        clamped,
        worse_than_chance: err >= (kf - 1.0) / kf,
    })
}

/// Applies `w_i ← w_i·e^{alpha·[y_i ≠ m(x_i)]}`, renormalizes to sum 1, and
/// records `(err, alpha)` where `err` is measured under the incoming weights.
pub fn update_weights(
    state: &BoostState,
    alpha: f64,
    predictions: &[ClassId],
    gold: &[ClassId],
) -> Result<BoostState, BoostError> {
    if !alpha.is_finite() {
        return Err(BoostError::NonFiniteAlpha(alpha));
    }
    let err = weighted_error(state, predictions, gold)?;
    let factor = alpha.exp();
    let mut weights: Vec<f64> = state
        .weights
        .iter()
        .zip(predictions.iter().zip(gold))
        .map(|(w, (p, g))| if p != g { w * factor } else { *w })
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    // Repeated large negative alphas can underflow a weight to zero.
    let floor = f64::MIN_POSITIVE;
    if weights.iter().any(|w| *w < floor) {
        for w in &mut weights {
            *w = w.max(floor);
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
    }
    let mut history = state.history.clone();
    history.push(BoostRound { err, alpha });
    Ok(BoostState {
        weights,
        iteration: state.iteration + 1,
        history,
    })
}

/// The `n` heaviest misclassified clean instances, padded with the heaviest
/// correctly classified ones when fewer than `n` are wrong. Ties go to the
/// smaller instance id.
pub fn top_n_large_error<'a>(
    state: &BoostState,
    clean: &'a Dataset,
    ensemble_predictions: &[ClassId],
    n: usize,
) -> Vec<&'a Instance> {
    let by_weight = |a: &(usize, &Instance), b: &(usize, &Instance)| {
        state.weights[b.0]
            .partial_cmp(&state.weights[a.0])
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.1.id.cmp(&b.1.id))
    };
    let (mut wrong, mut right): (Vec<_>, Vec<_>) = clean
        .instances
        .iter()
        .enumerate()
        .take(state.weights.len())
        .partition(|(i, x)| ensemble_predictions.get(*i).copied() != x.gold_label);
    wrong.sort_by(by_weight);
    right.sort_by(by_weight);
    wrong
        .into_iter()
        .chain(right)
        .take(n)
        .map(|(_, x)| x)
        .collect()
}
