//! Checkpoint directory layout:
//!
//! ```text
//! config.toml   run configuration
//! state.txt     "imel-state 1" / "seed <u64>" / "k <u64>" / "sigma <f64>..."
//! memory.bin    replay memory dump
//! model.txt     interpolator checkpoint (imel-np or imel-mki)
//! value.txt     value net snapshot
//! ```
//!
//! Optimizer moments are not stored.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::{ImelRunner, Interpolator, RunConfig};
use crate::error::{Error, Result};
use crate::improve::ValueNet;
use crate::memory::ReplayMemory;
use crate::mki::MkiModel;
use crate::np::NpModel;

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub(super) fn save(runner: &ImelRunner, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = toml::to_string(&runner.config).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg).map_err(|e| Error::io(&path, e))?;

    let path = dir.join("state.txt");
    let mut w = create(&path)?;
    let sigma: Vec<String> = runner.sigma.iter().map(|s| format!("{s:?}")).collect();
    write!(
        w,
        "imel-state 1\nseed {}\nk {}\nsigma {}\n",
        runner.seed,
        runner.k,
        sigma.join(" ")
    )
    .and_then(|_| w.flush())
    .map_err(|e| Error::io(&path, e))?;

    let path = dir.join("memory.bin");
    let mut w = create(&path)?;
    runner
        .memory
        .write_to(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))?;

    let path = dir.join("model.txt");
    let mut w = create(&path)?;
    match &runner.model {
        Interpolator::Np(m) => m.write_checkpoint(&mut w),
        Interpolator::Mki(m) => m.write_checkpoint(&mut w),
    }
    .and_then(|_| w.flush())
    .map_err(|e| Error::io(&path, e))?;

    let path = dir.join("value.txt");
    let mut w = create(&path)?;
    runner
        .value
        .write_snapshot(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))
}

fn state_value<'a>(text: &'a str, key: &str) -> Result<&'a str> {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .ok_or_else(|| Error::format("checkpoint state", format!("missing `{key}`")))
}

pub(super) fn load(dir: &Path) -> Result<ImelRunner> {
    let path = dir.join("config.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;

    let path = dir.join("state.txt");
    let state = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    if state.lines().next() != Some("imel-state 1") {
        return Err(Error::format("checkpoint state", "bad header"));
    }
    let parse_err = |e: std::num::ParseIntError| Error::format("checkpoint state", e.to_string());
    let seed: u64 = state_value(&state, "seed")?.parse().map_err(parse_err)?;
    let k: u64 = state_value(&state, "k")?.parse().map_err(parse_err)?;
    let sigma = state_value(&state, "sigma")?
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(|e| Error::format("checkpoint state", e.to_string()))?;

    let mut runner = ImelRunner::new(&config, seed)?;
    let memory = ReplayMemory::read_from(&mut open(&dir.join("memory.bin"))?)?;
    let mut model_reader = open(&dir.join("model.txt"))?;
    let model = match runner.model {
        Interpolator::Np(_) => Interpolator::Np(NpModel::read_checkpoint(&mut model_reader)?),
        Interpolator::Mki(_) => Interpolator::Mki(MkiModel::read_checkpoint(&mut model_reader)?),
    };
    let value = ValueNet::read_snapshot(&mut open(&dir.join("value.txt"))?)?;
    if sigma.len() != runner.sigma.len() {
        return Err(Error::format(
            "checkpoint state",
            "sigma has the wrong dimension",
        ));
    }
    runner.memory = memory;
    runner.model = model;
    runner.value = value;
    runner.sigma = sigma;
    runner.k = k;
    Ok(runner)
}
