use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use freebrw_core::experiment::{self, ExperimentConfig, ExperimentError};

#[derive(Parser)]
#[command(name = "freebrw", version, about = "Branching random walks on free products of finite groups")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the experiment selected in a config.
    Run(RunArgs),
    /// Summarize a result directory as markdown.
    Report {
        /// Directory holding a manifest.json.
        dir: PathBuf,
        /// Also write the summary to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `master_seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// `name=value` for a field of `[caps]`; repeatable.
    #[arg(long = "cap-override", value_name = "NAME=VALUE")]
    cap_override: Vec<String>,
}

fn load(path: &PathBuf, seed: Option<u64>, caps: &[String]) -> Result<experiment::Experiment, ExperimentError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let mut config = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = seed {
        config.master_seed = s;
    }
    for c in caps {
        let (name, value) = c
            .split_once('=')
            .ok_or_else(|| ExperimentError::Parse(format!("--cap-override expects NAME=VALUE, got '{c}'")))?;
        config.override_cap(name.trim(), value.trim())?;
    }
    experiment::validate(config).map_err(ExperimentError::Validation)
}

fn fail(e: ExperimentError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match load(&config, None, &[]) {
            Ok(exp) => {
                for n in &exp.notices {
                    eprintln!("notice: {n}");
                }
                println!(
                    "ok: {} on a free product of {} factors, config digest {}",
                    exp.config.experiment.name(),
                    exp.group.rank(),
                    exp.config.digest()
                );
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Run(args) => {
            let exp = match load(&args.config, args.seed, &args.cap_override) {
                Ok(e) => e,
                Err(e) => return fail(e),
            };
            for n in &exp.notices {
                eprintln!("notice: {n}");
            }
            let out = args
                .out
                .or_else(|| exp.config.output_dir.clone().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("results").join(exp.config.experiment.name()));
            match experiment::run(&exp, &out, args.threads) {
                Ok(outcome) => {
                    for c in &outcome.manifest.caps_hit {
                        eprintln!("cap hit in {}: {}", c.module, c.detail);
                    }
                    for c in &outcome.manifest.cell_errors {
                        eprintln!("cell {} failed: {}", c.cell, c.error);
                    }
                    println!(
                        "wrote {} files to {} in {:.1} s",
                        outcome.manifest.files.len() + 1,
                        out.display(),
                        outcome.manifest.wall_clock_seconds
                    );
                    ExitCode::from(outcome.exit_code as u8)
                }
                Err(e) => fail(e),
            }
        }
        Command::Report { dir, output } => match experiment::report(&dir) {
            Ok((text, problems)) => {
                print!("{text}");
                if let Some(path) = output {
                    if let Err(e) = std::fs::write(&path, &text) {
                        return fail(e.into());
                    }
                }
                if problems.is_empty() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(3)
                }
            }
            Err(e) => fail(e),
        },
    }
}
