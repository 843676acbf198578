//! Synthetic keyword corpus for end-to-end runs.
//!
//! Every class owns several subtopics, each with its own keywords. A document
//! picks a class and a subtopic, draws a few of that subtopic's keywords,
//! sometimes one keyword of a different class, and fills the rest with
//! Zipf-distributed background words. Seed rules cover only the first few
//! subtopics of each class, so the initial weak labels leave most of the
//! corpus unmatched.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::{write_dataset, write_json, IoError};
use crate::matching::MatchConfig;
use crate::pipeline::{DataPaths, Experiment, PipelineConfig, PipelineError, SeedRule};
use crate::rulegen::{RuleTemplate, TaskKind};
use crate::types::{ClassId, Dataset, DatasetKind, Instance, LabelSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub classes: Vec<String>,
    pub subtopics_per_class: usize,
    pub keywords_per_subtopic: usize,
    /// Subtopics per class that the seed rules know about.
    pub seeded_subtopics: usize,
    pub seed_keywords_per_subtopic: usize,
    pub background_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_keywords: usize,
    pub max_keywords: usize,
    /// Chance that a document also carries one keyword of another class.
    pub noise: f64,
    pub n_unlabeled: usize,
    pub n_clean: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub feature_space_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: ["world", "sports", "business", "tech"].map(String::from).to_vec(),
            subtopics_per_class: 6,
            keywords_per_subtopic: 8,
            seeded_subtopics: 2,
            seed_keywords_per_subtopic: 3,
            background_vocab: 400,
            min_len: 14,
            max_len: 24,
            min_keywords: 2,
            max_keywords: 4,
            noise: 0.3,
            n_unlabeled: 5000,
            n_clean: 100,
            n_dev: 100,
            n_test: 1000,
            feature_space_size: 1 << 12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub labels: LabelSpace,
    /// `keywords[c][s]`: keywords of subtopic `s` of class `c + 1`.
    pub keywords: Vec<Vec<Vec<String>>>,
    pub clean: Dataset,
    /// Carries hidden gold labels.
    pub unlabeled: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub seed_rules: Vec<SeedRule>,
    pub template: RuleTemplate,
}

fn keyword(class: &str, subtopic: usize, j: usize) -> String {
    let stem: String = class.chars().filter(char::is_ascii_alphanumeric).take(3).collect();
    format!("{stem}{subtopic}k{j}")
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    keywords: &'a [Vec<Vec<String>>],
    background: Vec<String>,
    zipf: WeightedIndex<f64>,
}

impl Generator<'_> {
    fn document(&self, rng: &mut ChaCha8Rng) -> (String, ClassId) {
        let cfg = self.cfg;
        let k = self.keywords.len();
        let c = rng.random_range(0..k);
        let s = rng.random_range(0..cfg.subtopics_per_class);
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let n_kw = rng.random_range(cfg.min_keywords..=cfg.max_keywords);
        let mut words: Vec<String> = (0..n_kw)
            .map(|_| self.keywords[c][s][rng.random_range(0..cfg.keywords_per_subtopic)].clone())
            .collect();
        if rng.random_bool(cfg.noise) {
            let other = (c + rng.random_range(1..k)) % k;
            let os = rng.random_range(0..cfg.subtopics_per_class);
            words.push(self.keywords[other][os][rng.random_range(0..cfg.keywords_per_subtopic)].clone());
        }
        while words.len() < len {
            words.push(self.background[self.zipf.sample(rng)].clone());
        }
        words.shuffle(rng);
        (words.join(" "), c + 1)
    }

    fn dataset(
        &self,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        n: usize,
        kind: DatasetKind,
    ) -> Result<Dataset, PipelineError> {
        let mut xs = Vec::with_capacity(n);
        for i in 0..n {
            let (text, label) = self.document(rng);
            xs.push(Instance::new(
                format!("{prefix}{i:05}"),
                text,
                Some(label),
                None,
                self.cfg.feature_space_size,
            )?);
        }
        Ok(Dataset::new(kind, xs))
    }
}

impl SynthCorpus {
    pub fn generate(cfg: &SynthConfig) -> Result<Self, PipelineError> {
        let labels = LabelSpace::new(cfg.classes.clone())?;
        if cfg.subtopics_per_class == 0
            || cfg.keywords_per_subtopic == 0
            || cfg.background_vocab == 0
            || cfg.min_len > cfg.max_len
            || cfg.min_keywords > cfg.max_keywords
            || cfg.min_keywords == 0
            || cfg.seeded_subtopics > cfg.subtopics_per_class
            || cfg.seed_keywords_per_subtopic > cfg.keywords_per_subtopic
            || !(0.0..=1.0).contains(&cfg.noise)
        {
            return Err(PipelineError::Config("inconsistent synthetic corpus settings".into()));
        }
        let keywords: Vec<Vec<Vec<String>>> = cfg
            .classes
            .iter()
            .map(|name| {
                (0..cfg.subtopics_per_class)
                    .map(|s| (0..cfg.keywords_per_subtopic).map(|j| keyword(name, s, j)).collect())
                    .collect()
            })
            .collect();
        let background: Vec<String> = (0..cfg.background_vocab).map(|i| format!("w{i}")).collect();
        let zipf = WeightedIndex::new((0..cfg.background_vocab).map(|r| 1.0 / (r as f64 + 1.0)))
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let gen = Generator {
            cfg,
            keywords: &keywords,
            background,
            zipf,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let clean = gen.dataset(&mut rng, "c", cfg.n_clean, DatasetKind::CleanLabeled)?;
        let dev = gen.dataset(&mut rng, "d", cfg.n_dev, DatasetKind::Dev)?;
        let unlabeled = gen.dataset(&mut rng, "u", cfg.n_unlabeled, DatasetKind::Unlabeled)?;
        let test = gen.dataset(&mut rng, "t", cfg.n_test, DatasetKind::Dev)?;

        let mut seed_rules = Vec::new();
        for (c, subtopics) in keywords.iter().enumerate() {
            for (s, words) in subtopics.iter().take(cfg.seeded_subtopics).enumerate() {
                seed_rules.push(SeedRule {
                    id: format!("seed-{}-{s}", c + 1),
                    keywords: words.iter().take(cfg.seed_keywords_per_subtopic).cloned().collect(),
                    label: c + 1,
                });
            }
        }
        let template = RuleTemplate::new("news", "[MASK] News: [INPUT]", TaskKind::Classification)?;
        Ok(Self {
            config: cfg.clone(),
            labels,
            keywords,
            clean,
            unlabeled,
            dev,
            test,
            seed_rules,
            template,
        })
    }

    /// Stock pipeline settings with σ lowered to 0.1 and the feature space
    /// of this corpus. Candidate rules carry single keywords, which caps the
    /// vocabulary term at `1/k` and leaves the stock σ unreachable.
    pub fn pipeline_config(&self) -> PipelineConfig {
        let base = PipelineConfig::default();
        PipelineConfig {
            feature_space_size: self.config.feature_space_size,
            matching: MatchConfig {
                sigma: 0.1,
                ..base.matching
            },
            ..base
        }
    }

    /// Class owning `token`, if it is a keyword.
    pub fn keyword_class(&self, token: &str) -> Option<ClassId> {
        self.keywords
            .iter()
            .position(|subs| subs.iter().any(|ws| ws.iter().any(|w| w == token)))
            .map(|c| c + 1)
    }

    /// An experiment over this corpus; `config.feature_space_size` is taken
    /// from the corpus.
    pub fn experiment(&self, mut config: PipelineConfig) -> Result<Experiment, PipelineError> {
        config.feature_space_size = self.config.feature_space_size;
        Experiment::new(
            config,
            self.labels.clone(),
            self.clean.clone(),
            self.unlabeled.clone(),
            self.dev.clone(),
            Some(self.test.clone()),
            self.seed_rules.clone(),
            self.template.clone(),
        )
    }

    /// Writes the datasets, seed rules, template file and a run config
    /// pointing at them.
    pub fn write(&self, dir: &Path, config: &PipelineConfig) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_dataset(&dir.join("clean.jsonl"), &self.clean)?;
        write_dataset(&dir.join("unlabeled.jsonl"), &self.unlabeled)?;
        write_dataset(&dir.join("dev.jsonl"), &self.dev)?;
        write_dataset(&dir.join("test.jsonl"), &self.test)?;
        write_json(&dir.join("seed_rules.json"), &self.seed_rules)?;
        write_json(&dir.join("templates.json"), &[&self.template])?;
        let mut cfg = config.clone();
        cfg.feature_space_size = self.config.feature_space_size;
        cfg.checkpoint_dir = "run".into();
        cfg.data = Some(DataPaths {
            labels: self.labels.class_names().to_vec(),
            clean: "clean.jsonl".into(),
            unlabeled: "unlabeled.jsonl".into(),
            dev: "dev.jsonl".into(),
            test: Some("test.jsonl".into()),
            seed_rules: "seed_rules.json".into(),
            templates: "templates.json".into(),
            template_id: Some(self.template.id.clone()),
        });
        let text = cfg.to_toml_string()?;
        std::fs::write(dir.join("config.toml"), text).map_err(|source| IoError::Io {
            path: dir.join("config.toml"),
            source,
        })?;
        Ok(())
    }
}
