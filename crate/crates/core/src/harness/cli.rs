//! `imel` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::svg::write_svg;
use super::{load_config, read_metrics, render_svg, run_experiment, ExperimentConfig, Series};
use crate::agent::{Algorithm, ImelRunner};
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "imel",
    version,
    about = "Reinforcement learning by improving memories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Number of iterations K.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one algorithm over all seeds.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// imel-np, imel-mki or reinforce; defaults to the first configured.
        #[arg(long)]
        algo: Option<String>,
    },
    /// Load a checkpoint and report deterministic evaluation returns.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Render metrics CSVs as one SVG.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Defaults to curve.svg next to the first CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated legend labels, one per CSV.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
        #[arg(long, default_value = "learning curves")]
        title: String,
    },
    /// Run several algorithms and overlay their curves.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated algorithms; defaults to all three.
        #[arg(long, value_delimiter = ',')]
        algo: Option<Vec<String>>,
    },
    /// Quick randomized self-checks of the core math.
    Selftest {
        #[arg(long, default_value_t = 200)]
        cases: usize,
    },
}

fn load(run: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = load_config(run.config.as_deref())?;
    if let Some(seeds) = &run.seeds {
        cfg.experiment.seeds = seeds.clone();
    }
    if let Some(k) = run.iterations {
        cfg.run.iterations = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn label_for(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, algo } => {
            let mut cfg = load(&run)?;
            let algorithm = match algo {
                Some(a) => Algorithm::from_name(&a)?,
                None => cfg.experiment.algorithms[0],
            };
            cfg.experiment.algorithms = vec![algorithm];
            let res = run_experiment(&cfg, algorithm, &run.out)?;
            if let Some(last) = res.curves.last() {
                println!(
                    "{algorithm}: k={} mean={:.4} p20={:.4} p80={:.4} -> {}",
                    last.k,
                    last.mean,
                    last.p20,
                    last.p80,
                    run.out.join(super::METRICS_FILE).display()
                );
            }
        }
        Command::Eval {
            checkpoint,
            episodes,
        } => {
            let mut runner = ImelRunner::load_checkpoint(&checkpoint)?;
            if let Some(n) = episodes {
                runner.config.run.eval_episodes = n.max(1);
            }
            let returns = runner.evaluate()?;
            for (i, r) in returns.iter().enumerate() {
                println!("episode {i}: {r}");
            }
            println!(
                "mean {}",
                returns.iter().sum::<f64>() / returns.len() as f64
            );
        }
        Command::Plot {
            csv,
            out,
            labels,
            title,
        } => {
            if let Some(l) = &labels {
                if l.len() != csv.len() {
                    return Err(Error::Config(format!(
                        "{} labels for {} CSV files",
                        l.len(),
                        csv.len()
                    )));
                }
            }
            let series = csv
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    Ok(Series {
                        label: labels
                            .as_ref()
                            .map(|l| l[i].clone())
                            .unwrap_or_else(|| label_for(p)),
                        points: read_metrics(p)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let out =
                out.unwrap_or_else(|| csv[0].parent().unwrap_or(Path::new(".")).join("curve.svg"));
            write_svg(&out, &render_svg(&series, &title)?)?;
            println!("{}", out.display());
        }
        Command::Compare { run, algo } => {
            let mut cfg = load(&run)?;
            let algorithms = match algo {
                Some(list) => list
                    .iter()
                    .map(|a| Algorithm::from_name(a))
                    .collect::<Result<Vec<_>>>()?,
                None => Algorithm::ALL.to_vec(),
            };
            cfg.experiment.algorithms = algorithms.clone();
            let mut series = Vec::new();
            for a in algorithms {
                let res = run_experiment(&cfg, a, &run.out.join(a.name()))?;
                series.push(Series {
                    label: a.name().to_string(),
                    points: res.curves,
                });
            }
            let out = run.out.join("compare.svg");
            write_svg(
                &out,
                &render_svg(&series, &format!("{} comparison", cfg.run.env))?,
            )?;
            println!("{}", out.display());
        }
        Command::Selftest { cases } => {
            let failures = super::selftest::run(cases);
            if failures > 0 {
                return Err(Error::Config(format!("{failures} self-check(s) failed")));
            }
        }
    }
    Ok(())
}

/// Entry point; returns the process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
