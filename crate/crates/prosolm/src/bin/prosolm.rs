//! Experiment runner CLI: `run`, `validate`, `report`, and `sweep` over the
//! library's config-driven pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prosolm::pipeline::config::{ExperimentConfig, SweepAxis};
use prosolm::pipeline::{report, run, run_sweep};

#[derive(Parser)]
#[command(name = "prosolm", version, about = "prosody-aware speech LM experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Fields may be overridden through
    /// PROSOLM_<SECTION>__<FIELD> environment variables.
    #[arg(long)]
    config: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> prosolm::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_path(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
            cfg.validate()?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execute the pipeline stages into an artifact directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Artifact directory.
        #[arg(long)]
        out: PathBuf,
        /// Re-run stages even when completion markers match.
        #[arg(long)]
        force: bool,
        /// Comma-separated subset of stages to run (pipeline order is kept).
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
    },
    /// Parse and validate a config, printing the canonical form.
    Validate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render the summary report for a run or sweep directory.
    Report {
        /// Artifact directory (a run, or a sweep parent with sweep_* runs).
        #[arg(long)]
        dir: PathBuf,
    },
    /// Expand sweep axes over a base config and run every combination.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Sweep axis, e.g. --set kd.alpha=0,0.5,1 (repeatable).
        #[arg(long = "set", required = true)]
        axes: Vec<String>,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> prosolm::Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            force,
            stages,
        } => {
            let cfg = config.load()?;
            let outcome = run(&cfg, &out, force, stages.as_deref())?;
            for stage in &outcome.executed {
                println!("ran     {stage}");
            }
            for stage in &outcome.skipped {
                println!("skipped {stage}");
            }
            println!("artifacts: {}", out.display());
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = config.load()?;
            println!("ok");
            print!("{}", cfg.to_toml_string());
            Ok(())
        }
        Command::Report { dir } => {
            let is_sweep = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .any(|e| e.file_name().to_string_lossy().starts_with("sweep_"));
            let text = if is_sweep {
                report::render_sweep(&dir, true)?
            } else {
                report::render_run(&dir, true, true)?
            };
            print!("{text}");
            Ok(())
        }
        Command::Sweep {
            config,
            out,
            axes,
            force,
        } => {
            let axes: prosolm::Result<Vec<SweepAxis>> =
                axes.iter().map(|a| SweepAxis::parse(a)).collect();
            let axes = axes?;
            let mut text = std::fs::read_to_string(&config.config)?;
            if let Some(seed) = config.seed {
                text.push_str(&format!("\nmaster_seed = {seed}\n"));
            }
            let outcomes = run_sweep(&text, &axes, &out, force)?;
            println!("ran {} sweep cells into {}", outcomes.len(), out.display());
            Ok(())
        }
    }
}
