//! Multiclass logistic-regression weak learner.
//!
//! Training minimizes mean cross-entropy on weak labels; self-training then
//! minimizes mean `KL(ỹ ‖ m(x))` on unmatched instances, where `ỹ` are the
//! model's own predictions sharpened by `q²/f` and renormalized. Both losses
//! share one soft-target objective: cross-entropy against a one-hot target is
//! the KL divergence from that target.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::SparseVector;
use crate::types::{ClassId, Dataset, Instance};

#[derive(Debug, Error, PartialEq)]
pub enum LearnError {
    #[error("empty training set")]
    EmptyDataset,
    #[error("instance {id} has label {label:?} outside 1..={k}")]
    BadLabel { id: String, label: Option<ClassId>, k: usize },
    #[error("instance {id} has feature space {got}, model expects {expected}")]
    FeatureSpace { id: String, got: usize, expected: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("pseudo-label matrix row {0} is not a probability vector")]
    BadRow(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub self_train_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            epochs: 20,
            batch_size: 32,
            l2: 1e-4,
            self_train_epochs: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LearnError::Config(format!("learning_rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(LearnError::Config("batch_size must be positive".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(LearnError::Config(format!("l2 {}", self.l2)));
        }
        Ok(())
    }
}

/// Linear softmax model. `weights` is K×F, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakModel {
    #[serde(rename = "K")]
    pub k: usize,
    pub feature_space_size: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub err_t: f64,
    pub alpha_t: f64,
    pub iteration: usize,
}

impl WeakModel {
    pub fn zeros(k: usize, feature_space_size: usize) -> Self {
        Self {
            k,
            feature_space_size,
            weights: vec![0.0; k * feature_space_size],
            bias: vec![0.0; k],
            err_t: 0.0,
            alpha_t: 0.0,
            iteration: 0,
        }
    }

    fn row(&self, c: usize) -> &[f64] {
        &self.weights[c * self.feature_space_size..(c + 1) * self.feature_space_size]
    }

    pub fn logits(&self, x: &SparseVector) -> Vec<f64> {
        (0..self.k).map(|c| x.dot_dense(self.row(c)) + self.bias[c]).collect()
    }

    pub fn proba_features(&self, x: &SparseVector) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    /// Euclidean distance between the parameter vectors of two models.
    pub fn param_distance(&self, other: &WeakModel) -> f64 {
        self.params()
            .zip(other.params())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest entry plus one; ties go to the lowest class id.
pub fn argmax_class(p: &[f64]) -> ClassId {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best + 1
}

pub fn predict_proba(m: &WeakModel, x: &Instance) -> Vec<f64> {
    m.proba_features(&x.features)
}

pub fn predict(m: &WeakModel, x: &Instance) -> ClassId {
    argmax_class(&predict_proba(m, x))
}

/// `KL(p ‖ q) = Σ p_j ln(p_j / q_j)`, with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pj, _)| **pj > 0.0)
        .map(|(pj, qj)| pj * (pj / qj).ln())
        .sum()
}

/// Objective gradient, laid out like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Mean `KL(target ‖ m(x))` plus `l2/2·‖W‖²`, and its gradient.
pub fn soft_target_loss(
    m: &WeakModel,
    xs: &[&SparseVector],
    targets: &[Vec<f64>],
    l2: f64,
) -> (f64, Gradient) {
    let f = m.feature_space_size;
    let mut grad = Gradient {
        weights: vec![0.0; m.weights.len()],
        bias: vec![0.0; m.k],
    };
    let n = xs.len().max(1) as f64;
    let mut loss = 0.0;
    for (x, t) in xs.iter().zip(targets) {
        let q = m.proba_features(x);
        loss += kl_divergence(t, &q);
        for c in 0..m.k {
            let d = (q[c] - t[c]) / n;
            grad.bias[c] += d;
            for (i, v) in x.entries() {
                grad.weights[c * f + *i as usize] += d * v;
            }
        }
    }
    loss /= n;
    if l2 > 0.0 {
        loss += 0.5 * l2 * m.weights.iter().map(|w| w * w).sum::<f64>();
        for (g, w) in grad.weights.iter_mut().zip(&m.weights) {
            *g += l2 * w;
        }
    }
    (loss, grad)
}

pub fn one_hot(label: ClassId, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[label - 1] = 1.0;
    v
}

/// Mean cross-entropy on hard labels plus the L2 term, and its gradient.
pub fn ce_loss(m: &WeakModel, xs: &[&SparseVector], labels: &[ClassId], l2: f64) -> (f64, Gradient) {
    let targets: Vec<Vec<f64>> = labels.iter().map(|l| one_hot(*l, m.k)).collect();
    soft_target_loss(m, xs, &targets, l2)
}

/// Mean `KL(ỹ ‖ m(x))` plus the L2 term, and its gradient.
pub fn kl_loss(m: &WeakModel, xs: &[&SparseVector], pseudo: &[Vec<f64>], l2: f64) -> (f64, Gradient) {
    soft_target_loss(m, xs, pseudo, l2)
}

/// `ỹ_ij = (q_ij² / f_j) / Σ_j' (q_ij'² / f_j')` with `f_j = Σ_i q_ij`.
/// Classes with `f_j = 0` contribute nothing.
pub fn sharpen_pseudo_labels(q: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, LearnError> {
    let Some(k) = q.first().map(Vec::len) else {
        return Ok(Vec::new());
    };
    for (i, row) in q.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.len() != k || (s - 1.0).abs() > 1e-6 || row.iter().any(|v| *v < 0.0) {
            return Err(LearnError::BadRow(i));
        }
    }
    let mut freq = vec![0.0; k];
    for row in q {
        for (f, v) in freq.iter_mut().zip(row) {
            *f += v;
        }
    }
    Ok(q.iter()
        .map(|row| {
            let raw: Vec<f64> = row
                .iter()
                .zip(&freq)
                .map(|(v, f)| if *f > 0.0 { v * v / f } else { 0.0 })
                .collect();
            let z: f64 = raw.iter().sum();
            if z > 0.0 {
                raw.into_iter().map(|v| v / z).collect()
            } else {
                vec![1.0 / k as f64; k]
            }
        })
        .collect())
}

fn check_rows(data: &Dataset, dim: usize) -> Result<Vec<&SparseVector>, LearnError> {
    data.instances
        .iter()
        .map(|x| {
            if x.features.dim() != dim {
                return Err(LearnError::FeatureSpace {
                    id: x.id.clone(),
                    got: x.features.dim(),
                    expected: dim,
                });
            }
            Ok(&x.features)
        })
        .collect()
}

fn sgd_epoch(
    m: &mut WeakModel,
    xs: &[&SparseVector],
    targets: &[Vec<f64>],
    order: &[usize],
    lr: f64,
    cfg: &TrainConfig,
) {
    for batch in order.chunks(cfg.batch_size) {
        let bx: Vec<&SparseVector> = batch.iter().map(|i| xs[*i]).collect();
        let bt: Vec<Vec<f64>> = batch.iter().map(|i| targets[*i].clone()).collect();
        let (_, g) = soft_target_loss(m, &bx, &bt, cfg.l2);
        for (w, d) in m.weights.iter_mut().zip(&g.weights) {
            *w -= lr * d;
        }
        for (b, d) in m.bias.iter_mut().zip(&g.bias) {
            *b -= lr * d;
        }
    }
}

const MAX_BACKTRACKS: usize = 8;

/// Full-batch objective after each epoch, starting with the initial value.
/// An epoch that would raise the objective is retried with half the step
/// size, so the sequence never increases.
fn descend(
    m: &mut WeakModel,
    xs: &[&SparseVector],
    targets: &[Vec<f64>],
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut lr = cfg.learning_rate;
    let mut trace = vec![soft_target_loss(m, xs, targets, cfg.l2).0];
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        let before = *trace.last().expect("trace starts non-empty");
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let mut trial = m.clone();
            sgd_epoch(&mut trial, xs, targets, &order, lr, cfg);
            let after = soft_target_loss(&trial, xs, targets, cfg.l2).0;
            if after.is_finite() && after <= before {
                accepted = Some((trial, after));
                break;
            }
            lr *= 0.5;
        }
        match accepted {
            Some((trial, after)) => {
                *m = trial;
                trace.push(after);
            }
            None => trace.push(before),
        }
    }
    trace
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub model: WeakModel,
    /// Objective before training and after every epoch.
    pub losses: Vec<f64>,
}

pub fn train_ce_traced(data: &Dataset, k: usize, dim: usize, cfg: &TrainConfig) -> Result<TrainTrace, LearnError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(LearnError::EmptyDataset);
    }
    let xs = check_rows(data, dim)?;
    let targets = data
        .instances
        .iter()
        .map(|x| match x.gold_label {
            Some(l) if (1..=k).contains(&l) => Ok(one_hot(l, k)),
            label => Err(LearnError::BadLabel {
                id: x.id.clone(),
                label,
                k,
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut model = WeakModel::zeros(k, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let losses = descend(&mut model, &xs, &targets, cfg.epochs, cfg, &mut rng);
    Ok(TrainTrace { model, losses })
}

/// Cross-entropy training on a labeled (weak or clean) dataset.
pub fn train_ce(data: &Dataset, k: usize, dim: usize, cfg: &TrainConfig) -> Result<WeakModel, LearnError> {
    train_ce_traced(data, k, dim, cfg).map(|t| t.model)
}

#[derive(Debug, Clone)]
pub struct SelfTrainTrace {
    pub model: WeakModel,
    /// `(before, after)` objective per epoch, both on that epoch's pseudo-labels.
    pub epochs: Vec<(f64, f64)>,
}

pub fn self_train_traced(m: &WeakModel, unmatched: &Dataset, cfg: &TrainConfig) -> Result<SelfTrainTrace, LearnError> {
    cfg.validate()?;
    let mut model = m.clone();
    let mut epochs = Vec::new();
    if unmatched.is_empty() {
        return Ok(SelfTrainTrace { model, epochs });
    }
    let xs = check_rows(unmatched, m.feature_space_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e1f_7a1e);
    for _ in 0..cfg.self_train_epochs {
        let q: Vec<Vec<f64>> = xs.iter().map(|x| model.proba_features(x)).collect();
        let pseudo = sharpen_pseudo_labels(&q)?;
        let trace = descend(&mut model, &xs, &pseudo, 1, cfg, &mut rng);
        epochs.push((trace[0], trace[1]));
    }
    Ok(SelfTrainTrace { model, epochs })
}

/// Self-training on unmatched instances; an empty set returns `m` unchanged.
pub fn self_train(m: &WeakModel, unmatched: &Dataset, cfg: &TrainConfig) -> Result<WeakModel, LearnError> {
    self_train_traced(m, unmatched, cfg).map(|t| t.model)
}

/// Fraction of `data` whose gold label equals the model prediction.
pub fn accuracy(m: &WeakModel, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data
        .instances
        .iter()
        .filter(|x| x.gold_label == Some(predict(m, x)))
        .count();
    correct as f64 / data.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::DatasetKind;

    fn data(rows: &[(&str, ClassId)], dim: usize) -> Dataset {
        let xs = rows
            .iter()
            .enumerate()
            .map(|(i, (t, l))| Instance::new(format!("x{i}"), *t, Some(*l), None, dim).unwrap())
            .collect();
        Dataset::new(DatasetKind::WeakLabeled, xs)
    }

    #[test]
    fn proba_examples() {
        let x = Instance::new("x", "a b", None, None, 8).unwrap();
        let m = WeakModel::zeros(4, 8);
        assert_eq!(predict_proba(&m, &x), vec![0.25; 4]);
        let p = softmax(&[3f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        let mut m = WeakModel::zeros(3, 8);
        m.bias = vec![5.0, -2.0, 0.3];
        m.weights[3] = 7.0;
        let s: f64 = predict_proba(&m, &x).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax_class(&[0.5, 0.5]), 1);
        assert_eq!(argmax_class(&[0.2, 0.3, 0.5]), 3);
    }

    #[test]
    fn separable_fixture_reaches_full_accuracy() {
        let rows = [
            ("goal team match", 1),
            ("team win goal", 1),
            ("match coach team", 1),
            ("stock bank market", 2),
            ("bank loan stock", 2),
            ("market trade bank", 2),
        ];
        let d = data(&rows, 256);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let trace = train_ce_traced(&d, 2, 256, &cfg).unwrap();
        assert_eq!(accuracy(&trace.model, &d), 1.0);
        assert!(trace.losses.last().unwrap() <= &trace.losses[0]);
        assert!(trace.losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn single_instance_descends_monotonically() {
        let d = data(&[("lonely token", 2)], 32);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let trace = train_ce_traced(&d, 3, 32, &cfg).unwrap();
        assert!(trace.losses.windows(2).all(|w| w[1] < w[0]), "{:?}", trace.losses);
    }

    #[test]
    fn training_is_deterministic() {
        let d = data(&[("a b", 1), ("c d", 2), ("a d", 1), ("c b", 2)], 64);
        let cfg = TrainConfig::default();
        assert_eq!(train_ce(&d, 2, 64, &cfg).unwrap(), train_ce(&d, 2, 64, &cfg).unwrap());
    }

    #[test]
    fn training_errors() {
        let empty = Dataset::new(DatasetKind::WeakLabeled, vec![]);
        assert_eq!(train_ce(&empty, 2, 8, &TrainConfig::default()), Err(LearnError::EmptyDataset));
        let bad = data(&[("a", 3)], 8);
        assert!(matches!(
            train_ce(&bad, 2, 8, &TrainConfig::default()),
            Err(LearnError::BadLabel { .. })
        ));
        let wrong_dim = data(&[("a", 1)], 8);
        assert!(matches!(
            train_ce(&wrong_dim, 2, 16, &TrainConfig::default()),
            Err(LearnError::FeatureSpace { .. })
        ));
    }

    #[test]
    fn l2_bounds_weight_norm() {
        let d = data(&[("a b", 1), ("c d", 2), ("a", 1), ("d", 2)], 16);
        let mut norms = Vec::new();
        for epochs in [10, 50, 200] {
            let cfg = TrainConfig {
                epochs,
                l2: 0.01,
                batch_size: 2,
                ..TrainConfig::default()
            };
            norms.push(train_ce(&d, 2, 16, &cfg).unwrap().weight_norm());
        }
        // ‖W‖² ≤ 2·L(0)/l2 = 2·ln 2 / 0.01
        let bound = (2.0 * 2f64.ln() / 0.01).sqrt();
        assert!(norms.iter().all(|n| *n <= bound), "{norms:?}");
    }

    #[test]
    fn sharpen_examples() {
        let q = vec![vec![0.3, 0.7]];
        assert_eq!(sharpen_pseudo_labels(&q).unwrap(), q);

        let q = vec![vec![0.9, 0.1], vec![0.5, 0.5]];
        let y = sharpen_pseudo_labels(&q).unwrap();
        // f = (1.4, 0.6); row 1: (0.81/1.4, 0.01/0.6) normalized
        let a = 0.81 / 1.4;
        let b = 0.01 / 0.6;
        assert!((y[0][0] - a / (a + b)).abs() < 1e-12);
        assert!((y[0][0] - 0.972).abs() < 1e-3);
        assert!((y[0][1] - 0.028).abs() < 1e-3);

        let u = vec![vec![0.25; 4]; 3];
        for row in sharpen_pseudo_labels(&u).unwrap() {
            for v in row {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sharpen_zero_mass_class() {
        let q = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(sharpen_pseudo_labels(&q).unwrap(), q);
        assert_eq!(sharpen_pseudo_labels(&[vec![0.5, 0.6]]), Err(LearnError::BadRow(0)));
    }

    #[test]
    fn kl_identities() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p), 0.0);
        assert!(kl_divergence(&p, &[0.5, 0.3, 0.2]) > 0.0);
        assert_eq!(kl_divergence(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn self_train_empty_is_noop() {
        let m = WeakModel::zeros(2, 8);
        let empty = Dataset::new(DatasetKind::Unlabeled, vec![]);
        assert_eq!(self_train(&m, &empty, &TrainConfig::default()).unwrap(), m);
    }

    #[test]
    fn self_train_confident_model_barely_moves() {
        let dim = 64;
        let xs: Vec<Instance> = ["alpha one", "beta two", "alpha three", "beta four"]
            .iter()
            .enumerate()
            .map(|(i, t)| Instance::new(format!("u{i}"), *t, None, None, dim).unwrap())
            .collect();
        let mut m = WeakModel::zeros(2, dim);
        let a = crate::features::feature_id("alpha", dim) as usize;
        let b = crate::features::feature_id("beta", dim) as usize;
        m.weights[a] = 60.0;
        m.weights[dim + b] = 60.0;
        let d = Dataset::new(DatasetKind::Unlabeled, xs);
        let cfg = TrainConfig {
            l2: 0.0,
            self_train_epochs: 1,
            ..TrainConfig::default()
        };
        let out = self_train_traced(&m, &d, &cfg).unwrap();
        assert!(out.model.param_distance(&m) < 1e-6);
        assert!(out.epochs[0].0 < 1e-9);
    }

    #[test]
    fn self_train_objective_non_increasing() {
        let dim = 128;
        let texts = ["a b c", "a b", "c d e", "d e", "a e", "b c d", "e a b", "c"];
        let xs: Vec<Instance> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Instance::new(format!("u{i}"), *t, None, None, dim).unwrap())
            .collect();
        let labeled = data(&[("a b", 1), ("d e", 2), ("c", 3)], dim);
        let cfg = TrainConfig {
            self_train_epochs: 5,
            ..TrainConfig::default()
        };
        let m = train_ce(&labeled, 3, dim, &cfg).unwrap();
        let out = self_train_traced(&m, &Dataset::new(DatasetKind::Unlabeled, xs.clone()), &cfg).unwrap();
        assert_eq!(out.epochs.len(), 5);
        for (before, after) in &out.epochs {
            assert!(after <= before);
        }
        let again = self_train(&m, &Dataset::new(DatasetKind::Unlabeled, xs), &cfg).unwrap();
        assert_eq!(again, out.model);
    }
}
