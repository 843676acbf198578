//! Independent oracles shared by the integration tests and the acceptance
//! run.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ruleboost::features::{feature_id, SparseVector};
use ruleboost::learner::{ce_loss, kl_loss, softmax, WeakModel};
use ruleboost::matching::{MatchConfig, Matcher};
use ruleboost::rulegen::{FillError, FillRequest, MaskFiller, MaskPrediction, RuleTemplate};
use ruleboost::types::{EntityConstraint, EntityPair, Instance, Rule, RuleStatus, WeakLabelRecord};

pub const WORDS: [&str; 12] = [
    "apple", "ball", "cat", "dog", "egg", "fig", "goal", "hat", "ink", "jam", "kite", "lamp",
];
const TYPES: [&str; 2] = ["PER", "ORG"];
const TOL: f64 = 1e-12;

/// Returns the instance's distinct tokens in first-seen order, at most `k`,
/// with probabilities 1/2, 1/4, ... so they stay sorted.
pub struct FirstTokens;

impl MaskFiller for FirstTokens {
    fn fill(&self, r: &FillRequest<'_>, k: usize) -> Result<Vec<MaskPrediction>, FillError> {
        let mut seen = Vec::new();
        for t in &r.source.tokens {
            if !seen.contains(t) {
                seen.push(t.clone());
            }
        }
        if seen.is_empty() {
            return Err(FillError::NoCandidates);
        }
        Ok(seen
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, token)| MaskPrediction {
                token,
                probability: 0.5f64.powi(i as i32 + 1),
            })
            .collect())
    }
}

pub struct MatchFixture {
    pub cfg: MatchConfig,
    pub space: usize,
    pub instances: Vec<Instance>,
    pub rules: Vec<Rule>,
}

fn typed_pair(rng: &mut ChaCha8Rng) -> EntityPair {
    EntityPair {
        head_type: TYPES[rng.random_range(0..2)].into(),
        tail_type: TYPES[rng.random_range(0..2)].into(),
        head: (0, 1),
        tail: (1, 2),
    }
}

/// Up to 50 instances and 10 rules over a 12-word vocabulary, so overlaps,
/// ties and entity-type mismatches all occur.
pub fn match_fixture(seed: u64) -> MatchFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=6);
    let cfg = MatchConfig {
        alpha: [0.0, 0.25, 0.5, 1.0, rng.random()][rng.random_range(0..5)],
        sigma: [0.0, 0.1, 0.2, 0.25, 0.5, rng.random()][rng.random_range(0..6)],
        k,
    };
    let space = [4, 16, 64][rng.random_range(0..3)];
    let n = rng.random_range(1..=50);
    let instances = (0..n)
        .map(|i| {
            let len = rng.random_range(1..=8);
            let text: Vec<&str> = (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            let pair = rng.random_bool(0.5).then(|| typed_pair(&mut rng));
            let gold = Some(rng.random_range(1..=3));
            Instance::new(format!("u{i:02}"), text.join(" "), gold, pair, space).unwrap()
        })
        .collect();
    let m = rng.random_range(0..=10);
    let rules = (0..m)
        .map(|j| {
            let size = rng.random_range(1..=k);
            let vocab: BTreeSet<String> = (0..size).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect();
            let constraint = rng.random_bool(0.3).then(|| typed_pair(&mut rng).constraint());
            Rule {
                id: format!("r{:02}", rng.random_range(0..20)) + &format!("-{j}"),
                template_id: "t".into(),
                mask_vocabulary: vocab.into_iter().collect(),
                entity_constraint: constraint,
                label: rng.random_range(1..=3),
                source_instance_id: "src".into(),
                source_text: String::new(),
                prompt: String::new(),
                iteration: rng.random_range(1..=3),
                status: RuleStatus::Accepted,
                rule_text: String::new(),
            }
        })
        .collect();
    MatchFixture {
        cfg,
        space,
        instances,
        rules,
    }
}

impl MatchFixture {
    pub fn matcher(&self) -> Matcher {
        let template = RuleTemplate::classification("t", "[MASK] : [INPUT]").unwrap();
        Matcher::new(self.cfg, self.space, template, Arc::new(FirstTokens)).unwrap()
    }
}

fn dense(space: usize, x: &SparseVector) -> Vec<f64> {
    let mut v = vec![0.0; space];
    for (i, w) in x.entries() {
        v[*i as usize] += w;
    }
    v
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

/// Scores every (instance, rule) pair from first principles and keeps the
/// best rule strictly above sigma; ties go to (iteration, id) ascending.
/// Scores within `TOL` count as equal.
pub fn brute_force_matches(f: &MatchFixture) -> Vec<Option<WeakLabelRecord>> {
    let k = f.cfg.k;
    f.instances
        .iter()
        .map(|x| {
            let mut v_u: Vec<&String> = Vec::new();
            for t in &x.tokens {
                if !v_u.contains(&t) && v_u.len() < k {
                    v_u.push(t);
                }
            }
            let e_u = dense(f.space, &x.features);
            let mut best: Option<(f64, &Rule)> = None;
            for r in &f.rules {
                let gate = match (&r.entity_constraint, &x.entity_pair) {
                    (None, _) => true,
                    (Some(EntityConstraint { head_type, tail_type }), Some(p)) => {
                        *head_type == p.head_type && *tail_type == p.tail_type
                    }
                    (Some(_), None) => false,
                };
                let s = if gate {
                    let mut e_r = vec![0.0; f.space];
                    for t in &r.mask_vocabulary {
                        e_r[feature_id(t, f.space) as usize] += 1.0;
                    }
                    let shared = r.mask_vocabulary.iter().filter(|t| v_u.contains(t)).count();
                    let s_b = shared as f64 / k as f64;
                    f.cfg.alpha * cosine(&e_u, &e_r) + (1.0 - f.cfg.alpha) * s_b
                } else {
                    0.0
                };
                let wins = match best {
                    None => true,
                    Some((bs, br)) => {
                        s > bs + TOL || ((s - bs).abs() <= TOL && (r.iteration, &r.id) < (br.iteration, &br.id))
                    }
                };
                if wins {
                    best = Some((s, r));
                }
            }
            best.filter(|(s, _)| *s > f.cfg.sigma + TOL).map(|(s, r)| WeakLabelRecord {
                instance_id: x.id.clone(),
                label: r.label,
                rule_id: r.id.clone(),
                matching_score: s,
                iteration: r.iteration,
            })
        })
        .collect()
}

/// Number of instances where the library and the oracle disagree on label,
/// rule or score (beyond 1e-9).
pub fn matching_disagreements(f: &MatchFixture) -> usize {
    let matcher = f.matcher();
    let prepared = matcher.prepare(&f.rules).unwrap();
    let oracle = brute_force_matches(f);
    f.instances
        .iter()
        .zip(oracle)
        .filter(|(x, want)| {
            let got = matcher.match_instance(x, &prepared).unwrap();
            match (got, want) {
                (None, None) => false,
                (Some(g), Some(w)) => {
                    g.label != w.label
                        || g.rule_id != w.rule_id
                        || g.instance_id != w.instance_id
                        || (g.matching_score - w.matching_score).abs() > 1e-9
                }
                _ => true,
            }
        })
        .count()
}

/// A small random model and batch for gradient checks.
pub struct GradFixture {
    pub model: WeakModel,
    pub xs: Vec<SparseVector>,
    pub labels: Vec<usize>,
    pub pseudo: Vec<Vec<f64>>,
    pub l2: f64,
}

pub fn grad_fixture(seed: u64) -> GradFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=4);
    let f = rng.random_range(1..=8);
    let n = rng.random_range(1..=5);
    let mut model = WeakModel::zeros(k, f);
    for w in model.weights.iter_mut().chain(model.bias.iter_mut()) {
        *w = rng.random_range(-1.0..1.0);
    }
    let xs = (0..n)
        .map(|_| {
            let mut pairs: Vec<(u32, f64)> = Vec::new();
            for i in 0..f as u32 {
                if rng.random_bool(0.6) {
                    pairs.push((i, rng.random_range(-1.0..1.0)));
                }
            }
            SparseVector::from_pairs(f, pairs).unwrap()
        })
        .collect();
    let labels = (0..n).map(|_| rng.random_range(1..=k)).collect();
    let pseudo = (0..n)
        .map(|_| softmax(&(0..k).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>()))
        .collect();
    GradFixture {
        model,
        xs,
        labels,
        pseudo,
        l2: [0.0, 1e-3, 0.1][rng.random_range(0..3)],
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

type Objective<'a> = dyn Fn(&WeakModel) -> (f64, ruleboost::learner::Gradient) + 'a;

/// Largest relative error between the analytic gradient and central
/// differences, over every parameter of both objectives.
pub fn max_gradient_error(fx: &GradFixture) -> f64 {
    let xs: Vec<&SparseVector> = fx.xs.iter().collect();
    let ce = |m: &WeakModel| ce_loss(m, &xs, &fx.labels, fx.l2);
    let kl = |m: &WeakModel| kl_loss(m, &xs, &fx.pseudo, fx.l2);
    let objectives: [&Objective; 2] = [&ce, &kl];
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for obj in objectives {
        let (_, g) = obj(&fx.model);
        let analytic: Vec<f64> = g.weights.iter().chain(&g.bias).copied().collect();
        let n_w = fx.model.weights.len();
        for (p, a) in analytic.iter().enumerate() {
            let bump = |d: f64| {
                let mut m = fx.model.clone();
                if p < n_w {
                    m.weights[p] += d;
                } else {
                    m.bias[p - n_w] += d;
                }
                obj(&m).0
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            // both near zero: compare absolutely
            let e = if a.abs() + numeric.abs() < 1e-7 {
                (a - numeric).abs()
            } else {
                rel_err(*a, numeric)
            };
            worst = worst.max(e);
        }
    }
    worst
}
