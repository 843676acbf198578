use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::annotation::ScriptedAnnotatorSpec;
use crate::ensemble::EnsembleMode;
use crate::learner::TrainConfig;
use crate::matching::MatchConfig;
use crate::rulegen::HttpFillerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Class names in id order (id 1 first).
    pub labels: Vec<String>,
    pub clean: PathBuf,
    pub unlabeled: PathBuf,
    pub dev: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Keyword rules providing the initial weak labels.
    pub seed_rules: PathBuf,
    pub templates: PathBuf,
    /// Template to use; the first one in the file when absent.
    #[serde(default)]
    pub template_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FillerSpec {
    CorpusStats {
        #[serde(default = "default_lexicon")]
        lexicon_per_class: usize,
    },
    HttpLm(HttpFillerConfig),
}

fn default_lexicon() -> usize {
    0
}

impl Default for FillerSpec {
    fn default() -> Self {
        FillerSpec::CorpusStats {
            lexicon_per_class: default_lexicon(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Accuracy,
    MicroF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub iterations: usize,
    pub top_n: usize,
    pub candidates_per_instance: usize,
    /// Candidate rules shown to annotators per iteration.
    pub budget: usize,
    pub annotators: usize,
    pub seed: u64,
    pub feature_space_size: usize,
    /// Drive the instance-weight update with the ensemble instead of the
    /// newest weak model.
    pub ensemble_weight_update: bool,
    /// Add the clean set to every weak model's training data.
    pub include_clean: bool,
    pub self_training: bool,
    pub metric: MetricKind,
    /// Class excluded from micro-F1 credit, by name.
    pub null_class: Option<String>,
    pub ensemble_mode: EnsembleMode,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
    pub train: TrainConfig,
    pub filler: FillerSpec,
    pub annotator: ScriptedAnnotatorSpec,
    /// Seconds an HTTP annotation session may stay open; none waits forever.
    pub session_timeout_secs: Option<u64>,
    pub checkpoint_dir: PathBuf,
    pub data: Option<DataPaths>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            top_n: 10,
            candidates_per_instance: 10,
            budget: 100,
            annotators: 3,
            seed: 0,
            feature_space_size: 1 << 14,
            ensemble_weight_update: false,
            include_clean: false,
            self_training: true,
            metric: MetricKind::Accuracy,
            null_class: None,
            ensemble_mode: EnsembleMode::EqualWeighted,
            matching: MatchConfig::default(),
            train: TrainConfig::default(),
            filler: FillerSpec::default(),
            annotator: ScriptedAnnotatorSpec::default(),
            session_timeout_secs: None,
            checkpoint_dir: PathBuf::from("run"),
            data: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a TOML config; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.checkpoint_dir);
        if let Some(d) = &mut self.data {
            fix(&mut d.clean);
            fix(&mut d.unlabeled);
            fix(&mut d.dev);
            if let Some(t) = &mut d.test {
                fix(t);
            }
            fix(&mut d.seed_rules);
            fix(&mut d.templates);
        }
    }

    pub fn to_toml_string(&self) -> Result<String, PipelineError> {
        toml::to_string_pretty(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.iterations == 0 {
            return err("iterations must be at least 1".into());
        }
        if self.top_n == 0 || self.candidates_per_instance == 0 {
            return err("top_n and candidates_per_instance must be positive".into());
        }
        if self.top_n * self.candidates_per_instance > self.budget {
            return err(format!(
                "top_n × candidates_per_instance = {} exceeds budget {}",
                self.top_n * self.candidates_per_instance,
                self.budget
            ));
        }
        if self.candidates_per_instance > self.matching.k {
            return err(format!(
                "candidates_per_instance {} exceeds k {}",
                self.candidates_per_instance, self.matching.k
            ));
        }
        if self.annotators == 0 {
            return err("annotators must be at least 1".into());
        }
        if self.feature_space_size == 0 {
            return err("feature_space_size must be positive".into());
        }
        self.matching.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.annotator.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.metric == MetricKind::MicroF1 && self.null_class.is_none() {
            return err("micro_f1 needs null_class".into());
        }
        Ok(())
    }
}
