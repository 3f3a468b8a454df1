//! Experiment orchestration: configuration, seed replicas, percentile
//! curves, CSV and SVG output, and the command-line front end.

pub mod cli;
mod config;
mod csvio;
mod selftest;
mod svg;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::{
    apply_overrides, load_config, parse_config, ExperimentConfig, ExperimentSection, ENV_PREFIX,
};
pub use csvio::{read_metrics, write_metrics, write_records, write_timing, METRICS_FILE};
pub use svg::{render_svg, Series};

use crate::agent::{run_algorithm, Algorithm, IterationRecord};
use crate::error::{Error, Result};

/// Empirical quantile with linear interpolation between order statistics:
/// sort `x`, take `h = (n - 1) p` and return
/// `x[floor h] + (h - floor h) (x[floor h + 1] - x[floor h])`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Across-seed statistics at one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub k: u64,
    /// `(seed, eval mean return)` in ascending seed order.
    pub returns: Vec<(u64, f64)>,
    pub mean: f64,
    pub p20: f64,
    pub p80: f64,
}

/// One curve point per iteration from per-seed records. Every seed must
/// report the same iteration grid.
pub fn aggregate_curves(per_seed: &[(u64, Vec<IterationRecord>)]) -> Result<Vec<CurvePoint>> {
    let mut runs: Vec<&(u64, Vec<IterationRecord>)> = per_seed.iter().collect();
    runs.sort_by_key(|(s, _)| *s);
    let Some((_, first)) = runs.first() else {
        return Ok(Vec::new());
    };
    let grid: Vec<u64> = first.iter().map(|r| r.k).collect();
    for (seed, recs) in &runs {
        let ks: Vec<u64> = recs.iter().map(|r| r.k).collect();
        if ks != grid {
            return Err(Error::RaggedGrid {
                seed: *seed,
                detail: format!("{} iterations where {} were expected", ks.len(), grid.len()),
            });
        }
    }
    Ok(grid
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let returns: Vec<(u64, f64)> = runs.iter().map(|(s, r)| (*s, r[i].eval_mean)).collect();
            let values: Vec<f64> = returns.iter().map(|(_, v)| *v).collect();
            CurvePoint {
                k,
                mean: values.iter().sum::<f64>() / values.len() as f64,
                p20: percentile(&values, 0.2),
                p80: percentile(&values, 0.8),
                returns,
            }
        })
        .collect())
}

/// Output of one algorithm over all seeds.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub algorithm: Algorithm,
    pub per_seed: Vec<(u64, Vec<IterationRecord>)>,
    pub curves: Vec<CurvePoint>,
    pub out_dir: PathBuf,
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        b = b.num_threads(workers);
    }
    b.build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Runs every seed of `algorithm` in parallel and writes into `out`:
/// `config.toml`, `metrics.csv`, `timing.csv` and `seed_<s>/records.csv`
/// (plus checkpoints when enabled).
pub fn run_experiment(
    config: &ExperimentConfig,
    algorithm: Algorithm,
    out: &Path,
) -> Result<ExperimentResult> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    config.write_snapshot(&out.join("config.toml"))?;

    let pool = build_pool(config.experiment.workers)?;
    let interval = config.experiment.checkpoint_interval;
    let run = config.run_config();
    let results: Vec<Result<(u64, Vec<IterationRecord>)>> = pool.install(|| {
        use rayon::prelude::*;
        config
            .experiment
            .seeds
            .par_iter()
            .map(|&seed| {
                let seed_dir = out.join(format!("seed_{seed}"));
                fs::create_dir_all(&seed_dir).map_err(|e| Error::io(&seed_dir, e))?;
                let ckpt = (interval > 0).then_some((seed_dir.as_path(), interval));
                let outcome = run_algorithm(algorithm, &run, seed, ckpt, |r| {
                    log::info!(
                        "{algorithm} seed {seed} k {} eval {:.3} ({:.2}s)",
                        r.k,
                        r.eval_mean,
                        r.wall_clock
                    )
                })?;
                if let Some(why) = &outcome.diverged {
                    log::warn!("{algorithm} seed {seed} truncated: {why}");
                }
                write_records(&seed_dir.join("records.csv"), &outcome.records)?;
                Ok((seed, outcome.records))
            })
            .collect()
    });
    let per_seed = results.into_iter().collect::<Result<Vec<_>>>()?;
    let curves = aggregate_curves(&per_seed)?;
    write_metrics(&out.join(METRICS_FILE), &curves)?;
    write_timing(&out.join("timing.csv"), &per_seed)?;
    Ok(ExperimentResult {
        algorithm,
        per_seed,
        curves,
        out_dir: out.to_path_buf(),
    })
}
