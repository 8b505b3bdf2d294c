//! One TOML file configures every subcommand.
//!
//! ```toml
//! seed = 7
//! steps = 1000
//! workers = 4
//! out = "run"
//!
//! [network.connectome]
//! kind = "ring"
//! voxels = 8
//!
//! [partition]
//! method = "greedy"
//!
//! [engine]
//! transport = "threads"
//! ```
//!
//! Sections absent from the file take their defaults. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assim::{AssimConfig, TwinConfig};
use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::netgen::NetworkConfig;
use crate::partition::{Capacity, PartitionMethod};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    #[default]
    Greedy,
    Sequential,
    Exact,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSettings {
    pub method: MethodName,
    /// Required when `method = "file"`.
    pub file: Option<PathBuf>,
    pub capacity: Capacity,
    /// Uniform firing-rate prior (Hz) for the traffic estimate.
    pub rate_estimate: f64,
}

impl Default for PartitionSettings {
    fn default() -> Self {
        PartitionSettings {
            method: MethodName::default(),
            file: None,
            capacity: Capacity::default(),
            rate_estimate: 7.0,
        }
    }
}

impl PartitionSettings {
    pub fn method(&self) -> Result<PartitionMethod> {
        Ok(match self.method {
            MethodName::Greedy => PartitionMethod::Greedy,
            MethodName::Sequential => PartitionMethod::Sequential,
            MethodName::Exact => PartitionMethod::Exact,
            MethodName::File => PartitionMethod::File {
                path: self
                    .file
                    .clone()
                    .ok_or_else(|| Error::config("partition method `file` needs `partition.file`"))?,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct AssimSettings {
    #[serde(flatten)]
    pub filter: AssimConfig,
    /// Observed BOLD CSV; without it `assimilate` runs a twin experiment.
    pub observed: Option<PathBuf>,
    pub twin: TwinConfig,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: u64,
    pub workers: usize,
    pub out: PathBuf,
    /// Trailing steps the timing report averages over.
    pub stats_window: u64,
    /// External-current CSV (`step,voxel,pa`).
    pub injection: Option<PathBuf>,
    pub network: NetworkConfig,
    pub partition: PartitionSettings,
    pub engine: EngineConfig,
    pub experiment: ExperimentConfig,
    pub assimilation: AssimSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            steps: 1000,
            workers: 1,
            out: PathBuf::from("out"),
            stats_window: 800,
            injection: None,
            network: NetworkConfig::default(),
            partition: PartitionSettings::default(),
            engine: EngineConfig::default(),
            experiment: ExperimentConfig::default(),
            assimilation: AssimSettings::default(),
        }
    }
}

fn require_file(what: &str, path: &Option<PathBuf>) -> Result<()> {
    match path {
        Some(p) if !p.is_file() => Err(Error::config(format!("{what} {} does not exist", p.display()))),
        _ => Ok(()),
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize configuration: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers must be at least 1"));
        }
        if self.stats_window == 0 {
            return Err(Error::config("stats_window must be at least 1"));
        }
        if !(self.partition.rate_estimate > 0.0 && self.partition.rate_estimate.is_finite()) {
            return Err(Error::config("partition.rate_estimate must be positive"));
        }
        require_file("injection file", &self.injection)?;
        require_file("microcolumn file", &self.network.microcolumn_file)?;
        require_file("observed BOLD file", &self.assimilation.observed)?;
        if let PartitionMethod::File { path } = self.partition.method()? {
            require_file("partition file", &Some(path))?;
        }
        self.network.validate()?;
        self.engine.validate()?;
        self.experiment.validate()?;
        self.assimilation.filter.validate()
    }

    /// The engine configuration with the run seed applied.
    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            seed: self.seed,
            ..self.engine.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text, Path::new("x.toml")).unwrap(), cfg);
    }

    #[test]
    fn nested_sections_round_trip() {
        let text = r#"
            seed = 9
            workers = 3
            [network]
            scale = { total = 5000 }
            [network.connectome]
            kind = "dti_like"
            voxels = 12
            sparsity = 0.1
            [partition]
            method = "sequential"
            [partition.capacity]
            slack = 1.2
            [engine]
            transport = "threads"
            [engine.clock]
            mode = "measured"
            [assimilation]
            members = 4
            [assimilation.twin]
            amplitude = 30.0
        "#;
        let cfg = RunConfig::parse(text, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.workers, 3);
        assert_eq!(cfg.partition.method, MethodName::Sequential);
        assert_eq!(cfg.assimilation.filter.members, 4);
        assert_eq!(cfg.assimilation.twin.amplitude, 30.0);
        let again = RunConfig::parse(&cfg.to_toml().unwrap(), Path::new("y.toml")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_key_names_its_line() {
        let err = RunConfig::parse("seed = 1\n\nbogus = 2\n", Path::new("c.toml")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unknown_assimilation_key_is_rejected() {
        assert!(RunConfig::parse("[assimilation]\nmembers = 4\nbogus = 1\n", Path::new("c.toml")).is_err());
    }

    #[test]
    fn missing_files_fail_validation() {
        let cfg = RunConfig {
            injection: Some(PathBuf::from("/nonexistent/stim.csv")),
            ..Default::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("/nonexistent/stim.csv"), "{msg}");
    }
}
