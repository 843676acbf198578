//! The iterative loop: large errors → candidate rules → annotation → rule
//! matching → weak model training → self-training → ensemble, with a
//! checkpoint after every iteration.

mod config;
mod metrics;
mod seed;
mod state;

use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

pub use config::{DataPaths, FillerSpec, MetricKind, PipelineConfig};
pub use metrics::{evaluate, score, IterationReport, Metric};
pub use seed::{apply_seed_rules, load_seed_rules, SeedRule};
pub use state::{EnsembleManifest, MemberRef, RunPaths, RunState};

use crate::annotation::{scripted_annotate, AnnotationError, AnnotationSession, ScriptedAnnotatorSpec};
use crate::boosting::{init_weights, model_coefficient, top_n_large_error, update_weights, weighted_error, BoostError};
use crate::ensemble::{EnsembleError, EnsembleModel};
use crate::io::{read_dataset, write_weak_labels, IoError};
use crate::learner::{predict, self_train, train_ce, LearnError, TrainConfig, WeakModel};
use crate::matching::{summarize, sweep_sigma, MatchError, Matcher, SigmaSweep};
use crate::rulegen::{
    assemble_candidates, load_templates, CorpusStatsFiller, FillError, HttpMaskFiller, MaskFiller, ProposalConfig,
    RuleGenError, RuleTemplate,
};
use crate::types::{
    validate_dataset, ClassId, Dataset, DatasetKind, EntityConstraint, Instance, LabelSpace, Rule, TypeError,
    WeakLabelRecord,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("invalid {name} dataset: {violations:?}")]
    InvalidDataset { name: String, violations: Vec<String> },
    #[error("no weak labels to train iteration {0} on")]
    NoWeakLabels(usize),
    #[error("evaluation set is empty")]
    EmptyEvaluation,
    #[error("instance {0} has no gold label")]
    MissingGold(String),
    #[error("annotation session for iteration {0} timed out")]
    SessionTimeout(usize),
    #[error("annotation aborted: {0}")]
    Aborted(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Boost(#[from] BoostError),
    #[error(transparent)]
    RuleGen(#[from] RuleGenError),
    #[error(transparent)]
    Fill(#[from] FillError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

/// What an annotator source gets besides the session.
pub struct AnnotationContext<'a> {
    pub matcher: &'a Matcher,
    /// Gold-labeled pool used by oracle policies.
    pub pool: &'a [Instance],
    pub labels: &'a LabelSpace,
}

/// Produces decisions for an open session.
pub trait AnnotatorSource {
    /// Returns the session with its quorum met.
    fn annotate(
        &mut self,
        session: AnnotationSession,
        ctx: &AnnotationContext<'_>,
    ) -> Result<AnnotationSession, PipelineError>;

    /// Called after each iteration's checkpoint is written.
    fn on_report(&mut self, _report: &IterationReport) {}
}

/// Every annotator follows one scripted policy; the noise stream is
/// reseeded per iteration.
#[derive(Debug, Clone)]
pub struct ScriptedAnnotators {
    pub spec: ScriptedAnnotatorSpec,
}

impl AnnotatorSource for ScriptedAnnotators {
    fn annotate(
        &mut self,
        mut session: AnnotationSession,
        ctx: &AnnotationContext<'_>,
    ) -> Result<AnnotationSession, PipelineError> {
        let spec = ScriptedAnnotatorSpec {
            seed: self.spec.seed.wrapping_add(1_000_003 * session.iteration as u64),
            ..self.spec
        };
        scripted_annotate(&mut session, &spec, Some((ctx.matcher, ctx.pool)))?;
        Ok(session)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue from the checkpoint in `checkpoint_dir` when there is one.
    pub resume: bool,
    /// Return after this iteration has been checkpointed.
    pub stop_after: Option<usize>,
}

/// Datasets, label space, template and seed rules of one experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: PipelineConfig,
    pub labels: LabelSpace,
    pub clean: Dataset,
    pub unlabeled: Dataset,
    pub dev: Dataset,
    pub test: Option<Dataset>,
    pub seed_rules: Vec<SeedRule>,
    pub template: RuleTemplate,
}

fn check(name: &str, d: &Dataset, labels: &LabelSpace) -> Result<(), PipelineError> {
    let violations = validate_dataset(d, labels);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::InvalidDataset {
            name: name.to_string(),
            violations,
        })
    }
}

impl Experiment {
    /// Reads every file named in `config.data`.
    pub fn load(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let data = config
            .data
            .clone()
            .ok_or_else(|| PipelineError::Config("missing [data] section".into()))?;
        let labels = LabelSpace::new(data.labels.clone())?;
        let f = config.feature_space_size;
        let clean = read_dataset(&data.clean, DatasetKind::CleanLabeled, f)?;
        let unlabeled = read_dataset(&data.unlabeled, DatasetKind::Unlabeled, f)?;
        let dev = read_dataset(&data.dev, DatasetKind::Dev, f)?;
        let test = data
            .test
            .as_ref()
            .map(|p| read_dataset(p, DatasetKind::Dev, f))
            .transpose()?;
        let seed_rules = load_seed_rules(&data.seed_rules, &labels)?;
        let templates = load_templates(&data.templates)?;
        let template = match &data.template_id {
            Some(id) => templates.into_iter().find(|t| &t.id == id),
            None => templates.into_iter().next(),
        }
        .ok_or_else(|| PipelineError::Config("template not found".into()))?;
        Self::new(config, labels, clean, unlabeled, dev, test, seed_rules, template)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: PipelineConfig,
        labels: LabelSpace,
        clean: Dataset,
        unlabeled: Dataset,
        dev: Dataset,
        test: Option<Dataset>,
        seed_rules: Vec<SeedRule>,
        template: RuleTemplate,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        check("clean", &clean, &labels)?;
        check("unlabeled", &unlabeled, &labels)?;
        check("dev", &dev, &labels)?;
        if let Some(t) = &test {
            check("test", t, &labels)?;
        }
        if clean.is_empty() {
            return Err(BoostError::EmptyCleanSet.into());
        }
        for d in [&clean, &unlabeled, &dev].into_iter().chain(test.as_ref()) {
            if let Some(x) = d.instances.iter().find(|x| x.features.dim() != config.feature_space_size) {
                return Err(PipelineError::Config(format!(
                    "instance {} has feature dimension {}, config says {}",
                    x.id,
                    x.features.dim(),
                    config.feature_space_size
                )));
            }
        }
        Ok(Self {
            config,
            labels,
            clean,
            unlabeled,
            dev,
            test,
            seed_rules,
            template,
        })
    }

    pub fn metric(&self) -> Result<Metric, PipelineError> {
        Ok(match self.config.metric {
            MetricKind::Accuracy => Metric::Accuracy,
            MetricKind::MicroF1 => {
                let name = self.config.null_class.as_deref().unwrap_or_default();
                let null_class = self
                    .labels
                    .id_of(name)
                    .ok_or_else(|| PipelineError::Config(format!("unknown null class {name}")))?;
                Metric::MicroF1 { null_class }
            }
        })
    }

    /// Initial weak labels from the seed rules.
    pub fn initial_records(&self) -> Vec<WeakLabelRecord> {
        apply_seed_rules(&self.seed_rules, &self.unlabeled)
    }

    /// The configured mask filler. The corpus-statistics filler learns from
    /// the clean set plus the initial weak labels, so it stays fixed for the
    /// whole run.
    pub fn filler(&self, initial: &[WeakLabelRecord]) -> Result<Arc<dyn MaskFiller>, PipelineError> {
        Ok(match &self.config.filler {
            FillerSpec::CorpusStats { lexicon_per_class } => {
                let mut corpus: Vec<(&[String], ClassId)> = self
                    .clean
                    .instances
                    .iter()
                    .filter_map(|x| x.gold_label.map(|l| (x.tokens.as_slice(), l)))
                    .collect();
                for r in initial {
                    if let Some(x) = self.unlabeled.get(&r.instance_id) {
                        corpus.push((x.tokens.as_slice(), r.label));
                    }
                }
                Arc::new(CorpusStatsFiller::new(corpus, self.labels.k(), *lexicon_per_class)?)
            }
            FillerSpec::HttpLm(cfg) => Arc::new(HttpMaskFiller::new(cfg.clone())),
        })
    }

    pub fn matcher(&self, filler: Arc<dyn MaskFiller>) -> Result<Matcher, PipelineError> {
        Ok(Matcher::new(
            self.config.matching,
            self.config.feature_space_size,
            self.template.clone(),
            filler,
        )?)
    }

    /// Pool the scripted oracle grades rules on: unlabeled instances with
    /// hidden gold, or else the clean and dev sets.
    pub fn oracle_pool(&self) -> Vec<Instance> {
        let hidden: Vec<Instance> = self
            .unlabeled
            .instances
            .iter()
            .filter(|x| x.gold_label.is_some())
            .cloned()
            .collect();
        if !hidden.is_empty() {
            return hidden;
        }
        self.clean.instances.iter().chain(&self.dev.instances).cloned().collect()
    }

    /// Dev-set threshold sweep for a rule set.
    pub fn sweep_sigma(&self, rules: &[Rule], grid: &[f64]) -> Result<SigmaSweep, PipelineError> {
        let filler = self.filler(&self.initial_records())?;
        let matcher = self.matcher(filler)?;
        Ok(sweep_sigma(&matcher, &self.dev, rules, grid)?)
    }
}

/// Candidate identity across iterations: template, single token, entity
/// constraint and label.
type CandidateKey = (String, String, Option<EntityConstraint>, ClassId);

fn candidate_keys(rule: &Rule) -> impl Iterator<Item = CandidateKey> + '_ {
    rule.mask_vocabulary.iter().map(move |tok| {
        (
            rule.template_id.clone(),
            tok.clone(),
            rule.entity_constraint.clone(),
            rule.label,
        )
    })
}

struct Runner<'a> {
    exp: &'a Experiment,
    matcher: Matcher,
    filler: Arc<dyn MaskFiller>,
    pool: Vec<Instance>,
    metric: Metric,
    paths: RunPaths,
}

impl Runner<'_> {
    fn cfg(&self) -> &PipelineConfig {
        &self.exp.config
    }

    fn train_config(&self, t: usize) -> TrainConfig {
        TrainConfig {
            seed: self
                .cfg()
                .train
                .seed
                .wrapping_add(self.cfg().seed.wrapping_mul(0x9e37_79b9))
                .wrapping_add(t as u64),
            ..self.cfg().train.clone()
        }
    }

    fn train_weak_model(&self, records: &[WeakLabelRecord], t: usize) -> Result<WeakModel, PipelineError> {
        let labeled: HashMap<&str, ClassId> = records.iter().map(|r| (r.instance_id.as_str(), r.label)).collect();
        let mut weak: Vec<Instance> = self
            .exp
            .unlabeled
            .instances
            .iter()
            .filter_map(|x| labeled.get(x.id.as_str()).map(|l| x.clone().with_label(Some(*l))))
            .collect();
        if self.cfg().include_clean {
            weak.extend(self.exp.clean.instances.iter().cloned());
        }
        if weak.is_empty() {
            return Err(PipelineError::NoWeakLabels(t));
        }
        let tc = self.train_config(t);
        let k = self.exp.labels.k();
        let mut model = train_ce(
            &Dataset::new(DatasetKind::WeakLabeled, weak),
            k,
            self.cfg().feature_space_size,
            &tc,
        )?;
        if self.cfg().self_training {
            let unmatched: Vec<Instance> = self
                .exp
                .unlabeled
                .instances
                .iter()
                .filter(|x| !labeled.contains_key(x.id.as_str()))
                .map(|x| x.clone().with_label(None))
                .collect();
            model = self_train(&model, &Dataset::new(DatasetKind::Unlabeled, unmatched), &tc)?;
        }
        model.iteration = t;
        Ok(model)
    }

    fn clean_gold(&self) -> Vec<ClassId> {
        self.exp
            .clean
            .instances
            .iter()
            .map(|x| x.gold_label.expect("validated clean set"))
            .collect()
    }

    fn ensemble_predictions(&self, e: &EnsembleModel, fallback: &WeakModel) -> Vec<ClassId> {
        self.exp
            .clean
            .instances
            .iter()
            .map(|x| e.predict(x).unwrap_or_else(|_| predict(fallback, x)))
            .collect()
    }

    fn dev_score(&self, f: impl Fn(&Instance) -> Result<ClassId, PipelineError>) -> Result<f64, PipelineError> {
        let mut pred = Vec::with_capacity(self.exp.dev.len());
        let mut gold = Vec::with_capacity(self.exp.dev.len());
        for x in &self.exp.dev.instances {
            pred.push(f(x)?);
            gold.push(x.gold_label.ok_or_else(|| PipelineError::MissingGold(x.id.clone()))?);
        }
        score(&pred, &gold, self.metric)
    }

    /// Boosting update, ensemble admission and the iteration report.
    #[allow(clippy::too_many_arguments)]
    fn finish_iteration(
        &self,
        state: &mut RunState,
        mut model: WeakModel,
        t: usize,
        rules_proposed: usize,
        rules_accepted: usize,
        kappa: Option<crate::annotation::Agreement>,
        started: Instant,
    ) -> Result<IterationReport, PipelineError> {
        let gold = self.clean_gold();
        let own: Vec<ClassId> = self.exp.clean.instances.iter().map(|x| predict(&model, x)).collect();
        let err = weighted_error(&state.boost, &own, &gold)?;
        let coef = model_coefficient(err, self.exp.labels.k())?;
        model.err_t = err;
        model.alpha_t = coef.alpha;

        let model_dev = self.dev_score(|x| Ok(predict(&model, x)))?;
        let ensemble = state.ensemble.add_member(model.clone(), Some(model_dev));
        let voting = ensemble.members.last().is_some_and(|m| m.voting);

        let indicator = if self.cfg().ensemble_weight_update {
            self.ensemble_predictions(&ensemble, &model)
        } else {
            own
        };
        state.boost = update_weights(&state.boost, coef.alpha, &indicator, &gold)?;
        state.ensemble = ensemble;

        let ensemble_dev = self.dev_score(|x| Ok(state.ensemble.predict(x)?))?;
        let ensemble_test = match &self.exp.test {
            Some(test) if test.instances.iter().all(|x| x.gold_label.is_some()) && !test.is_empty() => {
                Some(evaluate(&state.ensemble, test, self.metric)?)
            }
            _ => None,
        };
        let all = summarize(&self.exp.unlabeled, state.records.clone());
        let annotated = summarize(
            &self.exp.unlabeled,
            state.records.iter().filter(|r| r.iteration > 0).cloned().collect(),
        );
        Ok(IterationReport {
            iteration: t,
            err_t: err,
            alpha_t: coef.alpha,
            voting,
            rules_proposed,
            rules_accepted,
            cumulative_rules: state.accepted_rules.len(),
            weak_labeled: state.records.len(),
            coverage: all.coverage,
            rule_accuracy: all.rule_accuracy,
            accepted_rule_accuracy: annotated.rule_accuracy,
            model_accuracy_dev: model_dev,
            ensemble_accuracy_dev: ensemble_dev,
            ensemble_accuracy_test: ensemble_test,
            kappa,
            wall_time_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn bootstrap(&self) -> Result<RunState, PipelineError> {
        let started = Instant::now();
        let mut state = RunState {
            completed: 0,
            boost: init_weights(self.exp.clean.len())?,
            ensemble: EnsembleModel::new(self.cfg().ensemble_mode),
            accepted_rules: Vec::new(),
            rejected_rules: Vec::new(),
            records: self.exp.initial_records(),
            reports: Vec::new(),
            sessions: Vec::new(),
        };
        let model = self.train_weak_model(&state.records, 0)?;
        let report = self.finish_iteration(&mut state, model, 0, 0, 0, None, started)?;
        state.reports.push(report);
        Ok(state)
    }

    /// Candidate rules from the `top_n` heaviest large-error instances that
    /// still yield a candidate not covered by an accepted rule or rejected
    /// before. Instances whose every prediction is stale are skipped in favour
    /// of the next one in weight order. Capped at the budget.
    fn propose(&self, state: &RunState, ens_pred: &[ClassId], t: usize) -> Result<Vec<Rule>, PipelineError> {
        let cfg = self.cfg();
        let mut seen: HashSet<CandidateKey> = state
            .accepted_rules
            .iter()
            .chain(&state.rejected_rules)
            .flat_map(candidate_keys)
            .collect();
        let ranked = top_n_large_error(&state.boost, &self.exp.clean, ens_pred, self.exp.clean.len());
        let proposal = ProposalConfig {
            k: cfg.matching.k,
            per_instance: cfg.candidates_per_instance,
            iteration: t,
        };
        let mut out: Vec<Rule> = Vec::new();
        let mut used = 0;
        for chunk in ranked.chunks(cfg.top_n) {
            let candidates = assemble_candidates(chunk, &self.exp.template, self.filler.as_ref(), proposal, &self.exp.labels)?;
            for x in chunk {
                if used == cfg.top_n {
                    break;
                }
                let fresh: Vec<Rule> = candidates
                    .iter()
                    .filter(|r| r.source_instance_id == x.id)
                    .filter(|r| candidate_keys(r).all(|k| !seen.contains(&k)))
                    .cloned()
                    .collect();
                if fresh.is_empty() {
                    continue;
                }
                used += 1;
                seen.extend(fresh.iter().flat_map(candidate_keys));
                out.extend(fresh);
            }
            if used == cfg.top_n {
                break;
            }
        }
        out.truncate(cfg.budget);
        for (i, r) in out.iter_mut().enumerate() {
            r.id = format!("it{t}-r{i:03}");
        }
        Ok(out)
    }

    fn iterate(&self, state: &mut RunState, t: usize, source: &mut dyn AnnotatorSource) -> Result<(), PipelineError> {
        let started = Instant::now();
        let cfg = self.cfg();
        let newest = &state.ensemble.members.last().expect("bootstrapped").model;
        let ens_pred = self.ensemble_predictions(&state.ensemble, newest);
        let candidates = self.propose(state, &ens_pred, t)?;
        let proposed = candidates.len();

        let annotators = (1..=cfg.annotators).map(|i| format!("annotator-{i}")).collect();
        let session = AnnotationSession::open(format!("iteration-{t}"), candidates, annotators, t, cfg.matching.k)?;
        let ctx = AnnotationContext {
            matcher: &self.matcher,
            pool: &self.pool,
            labels: &self.exp.labels,
        };
        let mut session = source.annotate(session, &ctx)?;
        let vote = session.close_and_vote(&self.exp.labels)?;
        log::info!(
            "iteration {t}: {proposed} candidates, {} accepted, {} merged rules",
            vote.accepted_candidates,
            vote.accepted.len()
        );
        state
            .rejected_rules
            .extend(session.candidates.iter().filter(|r| r.status == crate::types::RuleStatus::Rejected).cloned());
        state.sessions.push(session);

        let outcome = self.matcher.apply_rules(&self.exp.unlabeled, &vote.accepted)?;
        merge_records(&mut state.records, outcome.records, &self.exp.unlabeled);
        state.accepted_rules.extend(vote.accepted);

        let model = self.train_weak_model(&state.records, t)?;
        let report = self.finish_iteration(state, model, t, proposed, vote.accepted_candidates, vote.agreement, started)?;
        state.reports.push(report);
        state.completed = t;
        Ok(())
    }

    fn checkpoint(&self, state: &RunState) -> Result<(), PipelineError> {
        write_weak_labels(&self.paths.weak_labels(), &self.exp.unlabeled, &state.records)?;
        self.paths.save(state)
    }
}

/// New records replace existing ones only with a strictly higher score;
/// the result follows the unlabeled-set order.
fn merge_records(records: &mut Vec<WeakLabelRecord>, new: Vec<WeakLabelRecord>, unlabeled: &Dataset) {
    let mut by_id: HashMap<String, WeakLabelRecord> =
        records.drain(..).map(|r| (r.instance_id.clone(), r)).collect();
    for r in new {
        match by_id.get(&r.instance_id) {
            Some(old) if old.matching_score >= r.matching_score => {}
            _ => {
                by_id.insert(r.instance_id.clone(), r);
            }
        }
    }
    records.extend(unlabeled.instances.iter().filter_map(|x| by_id.remove(&x.id)));
}

/// Runs (or resumes) the loop and returns the report of every completed
/// iteration; report 0 belongs to the model trained on the seed labels.
pub fn run(
    exp: &Experiment,
    source: &mut dyn AnnotatorSource,
    opts: RunOptions,
) -> Result<Vec<IterationReport>, PipelineError> {
    let initial = exp.initial_records();
    let filler = exp.filler(&initial)?;
    let runner = Runner {
        exp,
        matcher: exp.matcher(Arc::clone(&filler))?,
        filler,
        pool: exp.oracle_pool(),
        metric: exp.metric()?,
        paths: RunPaths::new(&exp.config.checkpoint_dir),
    };
    let mut state = if opts.resume && runner.paths.has_state() {
        let s = runner.paths.load_state()?;
        log::info!("resuming after iteration {}", s.completed);
        s
    } else {
        let s = runner.bootstrap()?;
        runner.checkpoint(&s)?;
        source.on_report(s.reports.last().expect("bootstrap report"));
        s
    };
    if opts.stop_after == Some(state.completed) {
        return Ok(state.reports);
    }
    for t in state.completed + 1..=exp.config.iterations {
        runner.iterate(&mut state, t, source)?;
        runner.checkpoint(&state)?;
        source.on_report(state.reports.last().expect("iteration report"));
        if opts.stop_after == Some(t) {
            break;
        }
    }
    Ok(state.reports)
}
