//! Experiment configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::ScoreScaling;
use crate::experiment::Variant;
use crate::synthgen::SuiteSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub variant: Variant,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub score_scaling: ScoreScaling,
    /// Number of sources per High-m / Low-m task.
    pub task_m: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            variant: Variant::Full,
            out_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2, 3, 4],
            score_scaling: ScoreScaling::MinMax,
            task_m: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub suite: SuiteSpec,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    /// Parses TOML; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::Parse {
                path: origin.to_string(),
                line,
                reason: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::missing("config file", path)),
            Err(e) => return Err(Error::io(path, e)),
        };
        ExperimentConfig::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.suite.validate()?;
        self.train.validate()?;
        let seeds = &self.experiment.seeds;
        if seeds.is_empty() {
            return Err(Error::config("experiment.seeds", "need at least one seed"));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::config("experiment.seeds", "seeds must be distinct"));
        }
        if self.experiment.task_m == 0 {
            return Err(Error::config("experiment.task_m", "must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the canonical serialization; unaffected by formatting,
    /// comments or key order of the source file.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
