use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::annotation::Agreement;
use crate::ensemble::EnsembleModel;
use crate::types::{ClassId, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    /// Micro-averaged F1 where `null_class` earns no credit as a prediction
    /// or as a gold label.
    MicroF1 { null_class: ClassId },
}

/// Scores predicted against gold class ids.
pub fn score(predicted: &[ClassId], gold: &[ClassId], metric: Metric) -> Result<f64, PipelineError> {
    if gold.is_empty() {
        return Err(PipelineError::EmptyEvaluation);
    }
    if predicted.len() != gold.len() {
        return Err(PipelineError::Config(format!(
            "{} predictions for {} gold labels",
            predicted.len(),
            gold.len()
        )));
    }
    Ok(match metric {
        Metric::Accuracy => {
            predicted.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
        }
        Metric::MicroF1 { null_class } => {
            let tp = predicted
                .iter()
                .zip(gold)
                .filter(|(p, g)| p == g && **p != null_class)
                .count() as f64;
            let pred_pos = predicted.iter().filter(|p| **p != null_class).count() as f64;
            let gold_pos = gold.iter().filter(|g| **g != null_class).count() as f64;
            let precision = if pred_pos > 0.0 { tp / pred_pos } else { 0.0 };
            let recall = if gold_pos > 0.0 { tp / gold_pos } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        }
    })
}

pub fn evaluate(ensemble: &EnsembleModel, test: &Dataset, metric: Metric) -> Result<f64, PipelineError> {
    if test.is_empty() {
        return Err(PipelineError::EmptyEvaluation);
    }
    let mut predicted = Vec::with_capacity(test.len());
    let mut gold = Vec::with_capacity(test.len());
    for x in &test.instances {
        let g = x.gold_label.ok_or_else(|| PipelineError::MissingGold(x.id.clone()))?;
        predicted.push(ensemble.predict(x)?);
        gold.push(g);
    }
    score(&predicted, &gold, metric)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub err_t: f64,
    pub alpha_t: f64,
    /// Whether the new model was admitted to the voting set.
    pub voting: bool,
    pub rules_proposed: usize,
    pub rules_accepted: usize,
    /// Accepted rules after merging, over all iterations.
    pub cumulative_rules: usize,
    pub weak_labeled: usize,
    pub coverage: f64,
    /// Accuracy of all weak labels against hidden gold.
    pub rule_accuracy: Option<f64>,
    /// Same, restricted to weak labels from annotated rules.
    pub accepted_rule_accuracy: Option<f64>,
    pub model_accuracy_dev: f64,
    pub ensemble_accuracy_dev: f64,
    pub ensemble_accuracy_test: Option<f64>,
    pub kappa: Option<Agreement>,
    pub wall_time_ms: u64,
}

impl IterationReport {
    /// JSON with the timing field removed, for run-to-run comparisons.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_time_ms");
        }
        serde_json::to_string(&v).expect("value serializes")
    }
}
