use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use spt::config::Config;
use spt::error::SptError;
use spt::pipeline;
use spt::trainer::Phase;

/// Schema-as-parameterized-tools: train schema tokens on a frozen tiny LM
/// and run dual-mode constrained extraction.
#[derive(Parser)]
#[command(name = "spt", version)]
struct Cli {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Track {
    Retrieval,
    Extraction,
    Generation,
    Bench,
}

impl Track {
    fn name(self) -> &'static str {
        match self {
            Track::Retrieval => "retrieval",
            Track::Extraction => "extraction",
            Track::Generation => "generation",
            Track::Bench => "bench",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the schema pool and train/test splits.
    GenData {
        /// Output directory (alias for --run-dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the frozen base model on the demo corpus.
    Pretrain,
    /// Run the compositional schedule on top of the base checkpoint.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
    },
    /// Evaluate a trained model on one track.
    Eval {
        #[arg(value_enum)]
        track: Track,
    },
    /// Extract structured output for one query and print the trace.
    Extract {
        #[arg(long)]
        query: String,
    },
}

fn load_config(cli: &Cli) -> Result<Config, SptError> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.data.seed = seed;
    }
    if let Some(dir) = &cli.run_dir {
        cfg.paths.run_dir = dir.clone();
    }
    Ok(cfg)
}

fn print_records(records: &[spt::trainer::MetricRecord], json: bool) {
    if json {
        println!("{}", serde_json::to_string(records).expect("serializable"));
        return;
    }
    for r in records {
        let extras: Vec<String> = r
            .metrics
            .iter()
            .map(|(k, v)| format!("{k}={v:.4}"))
            .collect();
        println!(
            "{} epoch {:>3}  loss {:.4}  {}",
            r.phase,
            r.epoch,
            r.loss,
            extras.join("  ")
        );
    }
}

fn run(cli: &Cli) -> Result<(), SptError> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData { out } => {
            if let Some(dir) = out {
                cfg.paths.run_dir = dir.clone();
            }
            let stats = pipeline::gen_data(&cfg)?;
            if cli.json {
                println!("{stats}");
            } else {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            }
        }
        Command::Pretrain => {
            let records = pipeline::pretrain(&cfg)?;
            print_records(&records, cli.json);
        }
        Command::Train { phase } => {
            let records = match phase {
                PhaseArg::One => pipeline::train_phase(&cfg, Phase::P1)?,
                PhaseArg::Two => pipeline::train_phase(&cfg, Phase::P2)?,
                PhaseArg::Three => pipeline::train_phase(&cfg, Phase::P3)?,
                PhaseArg::All => pipeline::train_all(&cfg)?,
            };
            print_records(&records, cli.json);
        }
        Command::Eval { track } => {
            let report = pipeline::evaluate(&cfg, track.name())?;
            if cli.json {
                println!("{}", serde_json::to_string(&report)?);
            } else {
                print!("{}", report.render_table());
            }
        }
        Command::Extract { query } => {
            let trace = pipeline::extract(&cfg, query)?;
            if cli.json {
                println!("{}", serde_json::to_string(&trace)?);
            } else {
                println!("{}", serde_json::to_string_pretty(&trace)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                SptError::Spec(_) => 2,
                SptError::PhaseOrder(_) => 3,
                SptError::MissingCheckpoint(_) => 4,
                SptError::Numerical(_) => 5,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
