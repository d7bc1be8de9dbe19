use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lmc_rl::harness::{self, RunConfig, SweepGrid};
use lmc_rl::par::Execution;

#[derive(Parser)]
#[command(name = "lmc", version, about = "Langevin Monte Carlo exploration experiments")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set agent.updates=16`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Print the records to stdout instead of writing files.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run a hyperparameter grid over several seeds.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Check the sampler against the closed-form posterior.
    VerifyPosterior {
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
    /// Print the optimal value function of an environment.
    Oracle {
        /// `name:key=value,...` or a path to an `env.json` snapshot.
        #[arg(long)]
        env: String,
    },
    /// Aggregate `episodes.jsonl` files.
    Report {
        #[arg(long)]
        glob: String,
    },
}

fn parse_set(raw: &str) -> Result<(String, String)> {
    match raw.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => bail!("expected KEY=VALUE, got `{raw}`"),
    }
}

/// Writes to stdout; a closed pipe (`lmc ... | head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.command {
        Command::Run { config, set, dry_run } => {
            let overrides = set.iter().map(|s| parse_set(s)).collect::<Result<Vec<_>>>()?;
            let cfg = RunConfig::load(&config, &overrides).with_context(|| format!("loading {}", config.display()))?;
            if dry_run {
                let (record, _) = harness::run_experiment_with(&cfg, exec)?;
                emit(&format!("{}\n", serde_json::to_string(&record)?))?;
            } else {
                let (record, dir) = harness::run_and_save(&cfg, exec)?;
                emit(&format!("{}\n{}", dir.display(), harness::summary_csv(std::slice::from_ref(&record))))?;
            }
        }
        Command::Sweep { grid } => {
            let g = SweepGrid::load(&grid).with_context(|| format!("loading {}", grid.display()))?;
            let (summary, _) = harness::sweep(&g, exec, true)?;
            let csv = summary.to_csv();
            let root = match g.cells().first() {
                Some(cell) => g.config(cell, g.seeds[0])?.out_root(),
                None => PathBuf::from("out"),
            };
            std::fs::create_dir_all(&root)?;
            let stem = grid.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
            std::fs::write(root.join(format!("sweep-{stem}.csv")), &csv)?;
            emit(&csv)?;
        }
        Command::VerifyPosterior { fixture } => {
            let report = harness::verify_posterior_cmd(fixture.as_deref(), exec)?;
            emit(&format!("{}\n", serde_json::to_string_pretty(&report)?))?;
            if !report.pass {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Oracle { env } => {
            let mdp = harness::load_env(&env)?;
            emit(&format!("{}\n", serde_json::to_string(&harness::oracle_report(&mdp))?))?;
        }
        Command::Report { glob } => {
            let mut records = Vec::new();
            let mut paths: Vec<PathBuf> = glob::glob(&glob)?.collect::<Result<_, _>>()?;
            paths.sort();
            if paths.is_empty() {
                bail!("no files match `{glob}`");
            }
            for p in &paths {
                records.extend(harness::parse_report(p).with_context(|| format!("reading {}", p.display()))?);
            }
            emit(&harness::aggregate_csv(&harness::aggregate(&records)))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
