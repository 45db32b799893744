use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cpc_core::harness::{
    cmd_ablate, cmd_eval_mi, cmd_gen_data, cmd_gradcheck, cmd_probe, cmd_train, csv_header, AblationAxis,
    ExperimentConfig, MetricRow, Split,
};
use cpc_core::CpcError;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cpc-lab", version, about = "Contrastive predictive coding on synthetic tasks with known structure")]
struct Cli {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides training.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the effective config as JSON and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the configured task.
    Train {
        #[arg(long)]
        quiet: bool,
    },
    /// Mutual-information bound on held-out pairs.
    EvalMi {
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score with the true density ratio.
        #[arg(long)]
        oracle: bool,
    },
    /// Train and probe one model per setting of an axis.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
    },
    /// Linear probes on frozen features of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck,
    /// Dump Markov sequences of one split.
    GenData {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long, default_value_t = 16)]
        sequences: usize,
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Steps,
    Negatives,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    Probe,
}

enum Failure {
    Error(CpcError),
    Violation,
}

impl From<CpcError> for Failure {
    fn from(e: CpcError) -> Self {
        Failure::Error(e)
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CpcError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print(text: &str) -> Result<(), CpcError> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<(), CpcError> {
    print(&serde_json::to_string_pretty(v)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        print(&cfg.to_json_pretty()?)?;
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CpcError::Config(vec!["no subcommand given (see --help)".into()]).into());
    };
    match command {
        Command::Train { quiet } => {
            let horizons = if cfg.is_sequence_task() { cfg.model.horizons } else { 1 };
            let mut log = |r: &MetricRow| eprintln!("{}", r.csv_line());
            if !quiet {
                eprintln!("{}", csv_header(horizons));
            }
            let progress: Option<&mut dyn FnMut(&MetricRow)> = if quiet { None } else { Some(&mut log) };
            print_json(&cmd_train(&cfg, progress)?)?;
        }
        Command::EvalMi { checkpoint, oracle } => {
            print_json(&cmd_eval_mi(&cfg, checkpoint.as_deref(), oracle)?)?;
        }
        Command::Ablate { axis } => {
            let axis = match axis {
                AxisArg::Steps => AblationAxis::Steps,
                AxisArg::Negatives => AblationAxis::Negatives,
            };
            print_json(&cmd_ablate(&cfg, axis)?)?;
        }
        Command::Probe { checkpoint } => print_json(&cmd_probe(&cfg, &checkpoint)?)?,
        Command::Gradcheck => {
            let report = cmd_gradcheck(cfg.training.seed)?;
            print_json(&report)?;
            if !report.passed {
                for c in report.checks.iter().filter(|c| !c.passed) {
                    eprintln!("FAIL {}: max relative error {:.3e}", c.name, c.max_rel_error);
                }
                return Err(Failure::Violation);
            }
        }
        Command::GenData { split, sequences, output } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
                SplitArg::Probe => Split::Probe,
            };
            cmd_gen_data(&cfg, split, sequences, Path::new(&output))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Violation) => ExitCode::from(3),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            match e {
                CpcError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
