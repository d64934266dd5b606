use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kgc_core::pipeline::{self, Run, Stage};
use kgc_core::synth::SynthConfig;
use kgc_core::config::PipelineConfig;
use kgc_core::{Error, ScorerError};

#[derive(Parser)]
#[command(name = "kgc", version, about = "Prompt-based knowledge graph completion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set retrieval.delta=1.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
    /// Global seed, same as `--set seed=S`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    Ingest(RunArgs),
    Split(RunArgs),
    Subcorpus(RunArgs),
    Mine(RunArgs),
    Select(RunArgs),
    Optimize(RunArgs),
    Index(RunArgs),
    Negatives(RunArgs),
    Assemble(RunArgs),
    Train(RunArgs),
    Predict(RunArgs),
    Evaluate(RunArgs),
    /// Run every stage in order.
    All(RunArgs),
    /// Write the synthetic fixture world and a config for it.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 55)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingArtifact { .. } => 3,
        Error::Scorer(ScorerError::Transport(_)) => 4,
        _ => 1,
    }
}

fn run_stage(stage: Option<Stage>, args: RunArgs) -> Result<(), Error> {
    let mut overrides = args.set;
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    let config = PipelineConfig::load(&args.config, &overrides)?;
    let run = Run::new(config);
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let manifests = pipeline::with_threads(threads, || match stage {
        Some(s) => run.run(s).map(|m| vec![m]),
        None => run.run_all(),
    })??;
    for m in manifests {
        eprintln!("{}: {} outputs", m.stage, m.outputs.len());
    }
    if stage.is_none() || stage == Some(Stage::Evaluate) {
        let report = run.artifact(Stage::Evaluate, "report.json");
        if let Ok(text) = std::fs::read_to_string(&report) {
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => run_stage(Some(Stage::Ingest), a),
        Command::Split(a) => run_stage(Some(Stage::Split), a),
        Command::Subcorpus(a) => run_stage(Some(Stage::Subcorpus), a),
        Command::Mine(a) => run_stage(Some(Stage::Mine), a),
        Command::Select(a) => run_stage(Some(Stage::Select), a),
        Command::Optimize(a) => run_stage(Some(Stage::Optimize), a),
        Command::Index(a) => run_stage(Some(Stage::Index), a),
        Command::Negatives(a) => run_stage(Some(Stage::Negatives), a),
        Command::Assemble(a) => run_stage(Some(Stage::Assemble), a),
        Command::Train(a) => run_stage(Some(Stage::Train), a),
        Command::Predict(a) => run_stage(Some(Stage::Predict), a),
        Command::Evaluate(a) => run_stage(Some(Stage::Evaluate), a),
        Command::All(a) => run_stage(None, a),
        Command::Synth { out, seed } => std::fs::create_dir_all(&out)
            .map_err(|e| Error::io(&out, e))
            .and_then(|_| {
                let config = SynthConfig {
                    seed,
                    ..SynthConfig::default()
                };
                pipeline::write_synthetic_fixture(&out, &config)
            })
            .map(|p| println!("{}", p.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
