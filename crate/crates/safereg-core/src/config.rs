//! Experiment configuration: the JSON document binding an environment, a
//! causal graph file, a specification, learner settings, and a seed list.
//!
//! Configs are schema-validated before any run (unknown keys are rejected)
//! and content-hashed so every output file can name the exact configuration
//! that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::DatasetError;
use crate::env::{CsvReplayEnvironment, Environment, ExampleSystem, Row, Scenario};
use crate::learner::{ColConfig, LearnerError};
use crate::spec::parse_spec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field `{field}`: {message}")]
    InvalidField { field: String, message: String },
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Where trajectories come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvironmentConfig {
    /// Built-in simulated edge service; `id` selects the stationary (1) or
    /// drifting (2) dynamics.
    Scenario { id: u8 },
    /// Replays a recorded CSV log. Interventions are unavailable, so only
    /// passive operations (prior estimation, graph validation) apply.
    CsvReplay { path: String },
}

impl EnvironmentConfig {
    /// Instantiates the environment for one seeded run.
    pub fn build(&self, seed: u64) -> Result<Box<dyn Environment>, ConfigError> {
        match self {
            EnvironmentConfig::Scenario { id } => {
                let scenario =
                    Scenario::from_id(*id).ok_or_else(|| ConfigError::InvalidField {
                        field: "environment.id".to_string(),
                        message: format!("unknown scenario {id}; available ids are 1 and 2"),
                    })?;
                Ok(Box::new(ExampleSystem::new(scenario, seed)))
            }
            EnvironmentConfig::CsvReplay { path } => {
                let rows = load_replay_rows(Path::new(path))?;
                Ok(Box::new(CsvReplayEnvironment::new(rows)))
            }
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        match self {
            EnvironmentConfig::Scenario { id } => {
                if Scenario::from_id(*id).is_none() {
                    return Err(ConfigError::InvalidField {
                        field: "environment.id".to_string(),
                        message: format!("unknown scenario {id}; available ids are 1 and 2"),
                    });
                }
            }
            EnvironmentConfig::CsvReplay { path } => {
                if path.is_empty() {
                    return Err(ConfigError::InvalidField {
                        field: "environment.path".to_string(),
                        message: "must not be empty".to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Reads a replay log into environment rows. A column named `t` supplies the
/// clock when present (values are truncated to integers); otherwise rows are
/// clocked by their position. All other columns become observed values.
fn load_replay_rows(path: &Path) -> Result<Vec<Row>, ConfigError> {
    let file = std::fs::File::open(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| DatasetError::from(e))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    let dataset = crate::dataset::load_csv(path, &headers)?;
    let mut rows = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let time = if dataset.has_column("t") {
            dataset.value("t", i)? as u64
        } else {
            i as u64
        };
        let values = headers
            .iter()
            .filter(|h| h.as_str() != "t")
            .map(|h| Ok((h.clone(), dataset.value(h, i)?)))
            .collect::<Result<_, DatasetError>>()?;
        rows.push(Row { time, values });
    }
    Ok(rows)
}

fn default_output_dir() -> String {
    "out".to_string()
}

/// One experiment: an environment, a graph file, a specification, learner
/// settings, an output directory, and the seeds to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub environment: EnvironmentConfig,
    /// Path to the causal-graph JSON document.
    pub graph: String,
    /// Specification text, e.g. `always[H=1](Y < 50)`.
    pub spec: String,
    pub col: ColConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    pub seeds: Vec<u64>,
}

impl RunConfig {
    /// Loads and parses a config file. Validation is a separate step so
    /// callers can report schema and semantic problems distinctly.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<RunConfig, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks every field, naming the offending one on failure. Learner
    /// fields are reported with a `col.` prefix so the message locates them
    /// in the document.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.environment.validate()?;
        if self.graph.is_empty() {
            return Err(ConfigError::InvalidField {
                field: "graph".to_string(),
                message: "must not be empty".to_string(),
            });
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::InvalidField {
                field: "seeds".to_string(),
                message: "must list at least one seed".to_string(),
            });
        }
        let formula = parse_spec(&self.spec).map_err(|e| ConfigError::InvalidField {
            field: "spec".to_string(),
            message: e.to_string(),
        })?;
        self.col.validate().map_err(prefix_col_field)?;
        if formula.horizon != self.col.horizon {
            return Err(ConfigError::InvalidField {
                field: "col.horizon".to_string(),
                message: format!(
                    "must match the specification horizon {}, got {}",
                    formula.horizon, self.col.horizon
                ),
            });
        }
        Ok(())
    }

    /// Rewrites relative paths (graph, replay data, output directory) to be
    /// absolute against `base_dir`, normally the directory holding the
    /// config file. Call after [`RunConfig::hash`] so the hash reflects the
    /// document as written, not where it was loaded from.
    pub fn anchor(&mut self, base_dir: &Path) {
        self.graph = resolve_against(base_dir, &self.graph);
        if let EnvironmentConfig::CsvReplay { path } = &mut self.environment {
            *path = resolve_against(base_dir, path);
        }
        self.output_dir = resolve_against(base_dir, &self.output_dir);
    }

    /// Hex SHA-256 of the canonical JSON form. The output directory is
    /// excluded so relocating results does not change run identity.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value
            .as_object_mut()
            .expect("config is a JSON object")
            .remove("output_dir");
        content_hash(&value)
    }
}

/// Hex SHA-256 of a JSON value's canonical serialization. Used to stamp
/// output files with the settings that produced them.
pub fn content_hash(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(value).expect("JSON value serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

fn resolve_against(base: &Path, path: &str) -> String {
    let p = Path::new(path);
    if p.is_absolute() {
        path.to_string()
    } else {
        base.join(p).display().to_string()
    }
}

fn prefix_col_field(err: LearnerError) -> ConfigError {
    match err {
        LearnerError::InvalidConfig { field, message } => ConfigError::InvalidField {
            field: format!("col.{field}"),
            message,
        },
        other => ConfigError::InvalidField {
            field: "col".to_string(),
            message: other.to_string(),
        },
    }
}
