use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{Algorithm, RunConfig};
use crate::error::{Error, Result};

/// Environment variables `IMEL__<SECTION>__<KEY>=<value>` override config
/// entries; the value is read as a TOML literal, falling back to a string.
pub const ENV_PREFIX: &str = "IMEL__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    /// Parallel seed replicas; 0 lets the pool decide.
    pub workers: usize,
    /// Checkpoint every N iterations; 0 disables.
    pub checkpoint_interval: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seeds: vec![0, 1, 2, 3, 4],
            algorithms: vec![Algorithm::ImelMki],
            workers: 0,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub run: crate::agent::RunSection,
    pub memory: crate::agent::MemorySection,
    pub improve: crate::improve::ImproveConfig,
    pub train: crate::agent::TrainSection,
    pub np: crate::np::NpConfig,
    pub mki: crate::mki::MkiConfig,
    pub reinforce: crate::agent::ReinforceSection,
}

impl ExperimentConfig {
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            run: self.run.clone(),
            memory: self.memory.clone(),
            improve: self.improve.clone(),
            train: self.train.clone(),
            np: self.np.clone(),
            mki: self.mki.clone(),
            reinforce: self.reinforce.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        let mut seen = self.experiment.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.experiment.seeds.len() {
            return Err(Error::Config("experiment.seeds contains duplicates".into()));
        }
        if self.experiment.algorithms.is_empty() {
            return Err(Error::Config(
                "experiment.algorithms must not be empty".into(),
            ));
        }
        self.run_config().validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

/// Writes `IMEL__SECTION__KEY=value` pairs into `doc`.
pub fn apply_overrides<I>(doc: &mut toml::Table, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    for (name, raw) in vars {
        let Some(path) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let parts: Vec<String> = path.split("__").map(|p| p.to_ascii_lowercase()).collect();
        if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!(
                "override `{name}` must look like {ENV_PREFIX}<SECTION>__<KEY>"
            )));
        }
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(toml::Value::String(raw.clone()));
        let section = doc
            .entry(parts[0].clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match section {
            toml::Value::Table(t) => {
                t.insert(parts[1].clone(), value);
            }
            _ => {
                return Err(Error::Config(format!("`{}` is not a section", parts[0])));
            }
        }
    }
    Ok(())
}

/// Parses a config document after applying overrides. Unknown sections and
/// keys are errors naming the key.
pub fn parse_config<I>(text: &str, vars: I) -> Result<ExperimentConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    apply_overrides(&mut doc, vars)?;
    for (section, value) in &doc {
        if !value.is_table() {
            return Err(Error::Config(format!(
                "top-level key `{section}` must be a section"
            )));
        }
    }
    ExperimentConfig::deserialize(toml::Value::Table(doc))
        .map_err(|e| Error::Config(e.message().to_string()))
}

/// Reads `path` (or the defaults when `None`) plus the process environment.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config(&text, std::env::vars())
}
