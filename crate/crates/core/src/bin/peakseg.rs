use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use peakseg::config::{extract_overrides, PipelineConfig};
use peakseg::pipeline::{Comparison, Pipeline, Stage};
use peakseg::Error;

/// Weakly supervised instance segmentation on synthetic scenes.
///
/// Any configuration key can be overridden with a dotted flag, for example
/// `--segmenter.lr=0.01` or `--scene.num_train 50`.
#[derive(Parser)]
#[command(name = "peakseg", version)]
struct Cli {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Proceed even if an input artifact was built from a different configuration.
    #[arg(long, global = true)]
    allow_stale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Render the synthetic dataset and proposal galleries.
    Generate,
    /// Train the peak-stimulated classifier on image-level labels.
    TrainClassifier,
    /// Write one draw of pseudo masks for the training split.
    MakePseudo,
    /// Train the segmenter on resampled pseudo masks.
    TrainSegmenter,
    /// Predict on both splits, with and without proposal refinement.
    Predict,
    /// Score predictions and pseudo masks against ground truth.
    Evaluate,
    /// Summarize pseudo masks, segmenter and refined segmenter side by side.
    Report,
    /// Run every stage in order.
    All,
}

fn stage_of(c: Command) -> Option<Stage> {
    Some(match c {
        Command::Generate => Stage::Generate,
        Command::TrainClassifier => Stage::TrainClassifier,
        Command::MakePseudo => Stage::MakePseudo,
        Command::TrainSegmenter => Stage::TrainSegmenter,
        Command::Predict => Stage::Predict,
        Command::Evaluate => Stage::Evaluate,
        Command::Report => Stage::Report,
        Command::All => return None,
    })
}

fn print_comparison(p: &Pipeline) -> Result<(), Error> {
    let bytes = std::fs::read(p.paths.comparison())?;
    let c: Comparison = serde_json::from_slice(&bytes)?;
    let pct = |v: Option<f64>| v.map(|x| format!("{:6.2}", 100.0 * x)).unwrap_or_else(|| "     -".into());
    println!("{:<14}{:<7}{:>8}{:>8}{:>8}{:>8}{:>10}", "method", "split", "mAP25", "mAP50", "mAP75", "ABO", "countMAE");
    for r in &c.rows {
        println!(
            "{:<14}{:<7}{:>8}{:>8}{:>8}{:>8}{:>10}",
            r.method,
            r.split,
            pct(r.map25),
            pct(r.map50),
            pct(r.map75),
            pct(r.abo),
            r.count_mae.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
        );
    }
    println!("ground-truth reads during training: {}", c.gt_accesses_during_training);
    Ok(())
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), Error> {
    let mut config = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    let out = cli.out.clone().unwrap_or_else(|| config.output.dir.clone());
    config.output.dir = out.clone();
    let mut pipeline = Pipeline::new(config, &out, cli.allow_stale);
    let stages: Vec<Stage> = match stage_of(cli.command) {
        Some(s) => vec![s],
        None => Stage::ALL.to_vec(),
    };
    for s in stages {
        let t = std::time::Instant::now();
        pipeline.run(s)?;
        eprintln!("{:<17} done in {:.1}s", s.name(), t.elapsed().as_secs_f64());
    }
    if matches!(cli.command, Command::Report | Command::All) {
        print_comparison(&pipeline)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (rest, overrides) = extract_overrides(&args);
    let cli = Cli::parse_from(rest);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
