use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ruleboost::io::{read_rules, write_rules};
use ruleboost::matching::default_sigma_grid;
use ruleboost::pipeline::{
    evaluate, run, AnnotatorSource, Experiment, IterationReport, PipelineConfig, RunOptions, RunPaths,
    ScriptedAnnotators,
};
use ruleboost::synth::{SynthConfig, SynthCorpus};
use ruleboost_service::{spawn, HttpAnnotators, SessionStore};

#[derive(Parser)]
#[command(name = "ruleboost", version, about = "Interactive rule boosting for weak supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AnnotatorKind {
    Scripted,
    Http,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Dev,
    Test,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RuleFormat {
    Json,
    Text,
}

#[derive(clap::Args)]
struct HttpArgs {
    /// Address of the annotation service.
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Overrides `session_timeout_secs` from the config.
    #[arg(long)]
    session_timeout: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run or resume the iterative loop.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "scripted")]
        annotators: AnnotatorKind,
        #[arg(long)]
        resume: bool,
        /// Stop after this iteration has been checkpointed.
        #[arg(long)]
        stop_after: Option<usize>,
        #[command(flatten)]
        http: HttpArgs,
    },
    /// Run with HTTP annotators, resuming any checkpoint, and keep serving
    /// metrics after the last iteration.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        http: HttpArgs,
    },
    /// Weak-label F1 on the dev set for a grid of matching thresholds.
    SweepSigma {
        #[arg(long)]
        config: PathBuf,
        /// Rule file; defaults to the run's accepted rules.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Score the checkpointed ensemble.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Write the accepted rules.
    ExportRules {
        #[arg(long)]
        config: PathBuf,
        /// Standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: RuleFormat,
    },
    /// Print the iteration reports of a run.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic corpus and a config that runs on it.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        unlabeled: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

/// Failure of the loop itself, reported with its own exit code.
#[derive(Debug)]
struct Aborted(ruleboost::pipeline::PipelineError);

impl std::fmt::Display for Aborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "iteration aborted, last checkpoint kept: {}", self.0)
    }
}

impl std::error::Error for Aborted {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Aborted>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn load_config(path: &Path) -> Result<PipelineConfig> {
    PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_experiment(path: &Path) -> Result<Experiment> {
    Ok(Experiment::load(load_config(path)?)?)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            annotators,
            resume,
            stop_after,
            http,
        } => {
            let exp = load_experiment(&config)?;
            let opts = RunOptions { resume, stop_after };
            match annotators {
                AnnotatorKind::Scripted => {
                    let mut source = ScriptedAnnotators {
                        spec: exp.config.annotator,
                    };
                    execute(&exp, &mut source, opts)
                }
                AnnotatorKind::Http => {
                    let (mut source, _service) = http_source(&exp, &http)?;
                    execute(&exp, &mut source, opts)
                }
            }
        }
        Command::Serve { config, http } => {
            let exp = load_experiment(&config)?;
            let (mut source, service) = http_source(&exp, &http)?;
            execute(
                &exp,
                &mut source,
                RunOptions {
                    resume: true,
                    stop_after: None,
                },
            )?;
            log::info!("run complete; still serving on http://{}", service.addr);
            service.serve_forever()
        }
        Command::SweepSigma { config, rules, grid } => {
            let exp = load_experiment(&config)?;
            let path = rules.unwrap_or_else(|| RunPaths::new(&exp.config.checkpoint_dir).accepted_rules());
            let rules = read_rules(&path)?;
            let grid = grid.unwrap_or_else(default_sigma_grid);
            let sweep = exp.sweep_sigma(&rules, &grid)?;
            println!("{}", serde_json::to_string_pretty(&sweep)?);
            Ok(())
        }
        Command::Evaluate { config, split } => {
            let exp = load_experiment(&config)?;
            let ensemble = RunPaths::new(&exp.config.checkpoint_dir).load_ensemble()?;
            let (name, data) = match split {
                Split::Dev => ("dev", &exp.dev),
                Split::Test => ("test", exp.test.as_ref().context("config has no test set")?),
            };
            let value = evaluate(&ensemble, data, exp.metric()?)?;
            let out = serde_json::json!({ "split": name, "metric": exp.config.metric, "value": value });
            println!("{out}");
            Ok(())
        }
        Command::ExportRules { config, out, format } => {
            let cfg = load_config(&config)?;
            let rules = read_rules(&RunPaths::new(&cfg.checkpoint_dir).accepted_rules())?;
            match (format, out) {
                (RuleFormat::Json, Some(path)) => write_rules(&path, &rules)?,
                (RuleFormat::Json, None) => println!("{}", serde_json::to_string_pretty(&rules)?),
                (RuleFormat::Text, out) => {
                    let text: String = rules.iter().map(|r| format!("{}\t{}\n", r.id, r.rule_text)).collect();
                    match out {
                        Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                        None => print!("{text}"),
                    }
                }
            }
            Ok(())
        }
        Command::Report { config, json } => {
            let cfg = load_config(&config)?;
            let reports = read_reports(&RunPaths::new(&cfg.checkpoint_dir).reports())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            } else {
                print!("{}", report_table(&reports));
            }
            Ok(())
        }
        Command::Generate {
            out,
            seed,
            unlabeled,
            iterations,
        } => {
            let defaults = SynthConfig::default();
            let synth = SynthConfig {
                seed,
                n_unlabeled: unlabeled.unwrap_or(defaults.n_unlabeled),
                ..defaults
            };
            let corpus = SynthCorpus::generate(&synth)?;
            let mut cfg = corpus.pipeline_config();
            cfg.seed = seed;
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            corpus.write(&out, &cfg)?;
            println!("{}", out.join("config.toml").display());
            Ok(())
        }
    }
}

fn http_source(exp: &Experiment, http: &HttpArgs) -> Result<(HttpAnnotators, ruleboost_service::ServiceHandle)> {
    let paths = RunPaths::new(&exp.config.checkpoint_dir);
    let store = SessionStore::new(exp.labels.class_names().to_vec(), Some(paths.root.join("sessions")));
    if paths.has_state() {
        let state = paths.load_state()?;
        store.seed_history(state.reports, state.sessions);
    }
    let service = spawn(http.bind, store.clone()).with_context(|| format!("binding {}", http.bind))?;
    println!("annotation service on http://{}", service.addr);
    let timeout = http.session_timeout.or(exp.config.session_timeout_secs).map(Duration::from_secs);
    Ok((HttpAnnotators { store, timeout }, service))
}

fn execute(exp: &Experiment, source: &mut dyn AnnotatorSource, opts: RunOptions) -> Result<()> {
    let reports = run(exp, source, opts).map_err(Aborted)?;
    print!("{}", report_table(&reports));
    Ok(())
}

fn read_reports(path: &Path) -> Result<Vec<IterationReport>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing {}", path.display())))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

fn report_table(reports: &[IterationReport]) -> String {
    let mut s = String::from("iter  err_t  alpha_t  proposed  accepted  rules  coverage  rule_acc  dev_acc  test_acc  kappa\n");
    for r in reports {
        s += &format!(
            "{:>4}  {:.3}  {:>7.3}  {:>8}  {:>8}  {:>5}  {:>8.3}  {:>8}  {:>7.3}  {:>8}  {:>5}\n",
            r.iteration,
            r.err_t,
            r.alpha_t,
            r.rules_proposed,
            r.rules_accepted,
            r.cumulative_rules,
            r.coverage,
            opt(r.rule_accuracy),
            r.ensemble_accuracy_dev,
            opt(r.ensemble_accuracy_test),
            opt(r.kappa.map(|k| k.kappa)),
        );
    }
    s
}
