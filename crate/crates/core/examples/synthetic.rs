//! Runs the loop on a generated corpus with scripted annotators and prints
//! one line per iteration.
//!
//! `cargo run --release -p ruleboost --example synthetic -- [iterations] [seed] [sigma]`

use ruleboost::matching::MatchConfig;
use ruleboost::pipeline::{run, PipelineConfig, RunOptions, ScriptedAnnotators};
use ruleboost::synth::{SynthConfig, SynthCorpus};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let sigma = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.1);
    let corpus = SynthCorpus::generate(&SynthConfig { seed, ..Default::default() })?;
    let dir = tempfile_dir();
    let config = PipelineConfig {
        iterations,
        seed,
        checkpoint_dir: dir.clone(),
        ..corpus.pipeline_config()
    };
    let config = PipelineConfig {
        matching: MatchConfig { sigma, ..config.matching },
        ..config
    };
    let exp = corpus.experiment(config.clone())?;
    let mut source = ScriptedAnnotators { spec: config.annotator };
    let start = std::time::Instant::now();
    let reports = run(&exp, &mut source, RunOptions::default())?;
    for r in &reports {
        println!(
            "t={:2} err={:.3} alpha={:.3} vote={} proposed={:3} accepted={:3} cov={:.3} rule_acc={:.3} acc_rule_acc={} dev={:.3} test={:.3}",
            r.iteration,
            r.err_t,
            r.alpha_t,
            r.voting,
            r.rules_proposed,
            r.rules_accepted,
            r.coverage,
            r.rule_accuracy.unwrap_or(f64::NAN),
            r.accepted_rule_accuracy.map_or("-".into(), |a| format!("{a:.3}")),
            r.ensemble_accuracy_dev,
            r.ensemble_accuracy_test.unwrap_or(f64::NAN),
        );
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    std::env::temp_dir().join(format!("ruleboost-synthetic-{}", std::process::id()))
}
