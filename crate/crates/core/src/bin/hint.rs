//! Command-line driver. Every subcommand prints one JSON document on success,
//! or a single `{"error": .., "message": ..}` line on stderr and exits 1.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hint::envs::Preset;
use hint::orchestrator::{self, EvalTarget, HintConfig, OrchestratorError};

#[derive(Parser)]
#[command(name = "hint", version, about = "Teacher-student distillation for cooperative multi-agent tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config layered over its preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, help = "Preset: marine-easy, marine-medium, marine-hard, fc-easy, fc-medium or fc-hard")]
    preset: Option<Preset>,
    /// Use the full table budgets instead of the 10% desk scale.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; every artifact path is relative to it.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Student,
    Teacher,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the hierarchical teacher.
    PretrainTeacher(Common),
    /// Run the aggregate, distill, refine loop.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the latest student or the teacher.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
        /// Number of evaluation seeds, numbered from 0.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, value_enum, default_value = "student")]
        target: Target,
    },
    /// Train the full, no-filter, no-pseudo and neither variants.
    Ablate(Common),
    /// Teacher versus student state-distribution KL.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Summarize the aggregated dataset of a run.
    InspectDataset(Common),
}

fn config(c: &Common) -> Result<HintConfig, OrchestratorError> {
    let mut table: toml::Table = match &c.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| OrchestratorError::Config(format!("cannot read {}: {e}", p.display())))?
            .parse()
            .map_err(|e: toml::de::Error| OrchestratorError::Config(e.to_string()))?,
        None => toml::Table::new(),
    };
    if let Some(p) = c.preset {
        let named = table.get("preset").and_then(|v| v.as_str()).map(str::to_string);
        if named.is_some_and(|n| n != p.to_string()) {
            return Err(OrchestratorError::Config("--preset disagrees with the config file".into()));
        }
        table.insert("preset".into(), p.to_string().into());
    }
    if c.paper_scale {
        table.insert("paper_scale".into(), true.into());
    }
    if let Some(s) = c.seed {
        table.insert("seed".into(), (s as i64).into());
    }
    HintConfig::from_toml(&table.to_string())
}

fn emit<T: Serialize>(v: &T) -> Result<(), OrchestratorError> {
    println!("{}", serde_json::to_string_pretty(v).map_err(|e| OrchestratorError::Serde(e.to_string()))?);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    out: String,
    epochs: usize,
    timestep: u64,
    final_success_rate: Option<f64>,
    final_steps_taken: Option<f64>,
}

fn run(cli: Cli) -> Result<(), OrchestratorError> {
    match cli.command {
        Command::PretrainTeacher(c) => emit(&orchestrator::pretrain(&config(&c)?, &c.out)?),
        Command::Train { common: c, resume } => {
            let m = orchestrator::train_hint(&config(&c)?, &c.out, resume)?;
            emit(&TrainSummary {
                out: c.out.display().to_string(),
                epochs: m.rows.len(),
                timestep: m.rows.last().map_or(0, |r| r.timestep),
                final_success_rate: m.final_eval.as_ref().map(|e| e.success_rate),
                final_steps_taken: m.final_eval.as_ref().map(|e| e.steps_taken),
            })
        }
        Command::Eval { common: c, episodes, seeds, target } => {
            let cfg = config(&c)?;
            let episodes = episodes.unwrap_or(cfg.eval.final_episodes);
            let seeds: Vec<u64> = match seeds {
                Some(n) => (0..n as u64).collect(),
                None => cfg.eval.final_seeds.clone(),
            };
            let target = match target {
                Target::Student => EvalTarget::Student,
                Target::Teacher => EvalTarget::Teacher,
            };
            emit(&orchestrator::eval_run(&cfg, &c.out, target, episodes, &seeds)?)
        }
        Command::Ablate(c) => emit(&orchestrator::ablate(&config(&c)?, &c.out)?),
        Command::Diagnose { common: c, samples } => emit(&orchestrator::diagnose(&config(&c)?, &c.out, samples)?),
        Command::InspectDataset(c) => {
            config(&c)?;
            emit(&orchestrator::inspect_dataset(&c.out)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
