//! The `--config` file: TOML, every key optional, flags take precedence.
//!
//! ```toml
//! seed = 42
//! workers = 4
//!
//! [synth]
//! n = 10000
//! preset = "default"      # or "recovery"
//! format = "jsonl"        # or "csv"
//!
//! [train]
//! steps = 4000
//! learning_rate = 0.02
//! split_ratio = 0.8
//!
//! [eval]
//! threshold = 0.5
//! bins = 10
//! predictive = { mode = "draws", draws = 100, seed = 0 }
//!
//! [query]
//! n_sequences = 10000
//! n_posterior_draws = 50
//!
//! [serve]
//! bind = "127.0.0.1"
//! port = 8080
//! ```

use std::net::IpAddr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use genhai::eval::{Predictive, DEFAULT_BINS, DEFAULT_THRESHOLD};
use genhai::svi::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Realistic marginals.
    #[default]
    Default,
    /// Balanced covariates and moderate effects, for parameter recovery.
    Recovery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Jsonl,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n: usize,
    pub preset: Preset,
    pub format: Format,
    pub max_events: Option<usize>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n: 10_000,
            preset: Preset::Default,
            format: Format::Jsonl,
            max_events: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    #[serde(flatten)]
    pub svi: TrainConfig,
    /// Fraction of records used for training; the rest is written out as
    /// the held-out corpus.
    pub split_ratio: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            svi: TrainConfig::default(),
            split_ratio: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
    pub bins: usize,
    pub predictive: Predictive,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            bins: DEFAULT_BINS,
            predictive: Predictive::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuerySection {
    pub n_sequences: Option<usize>,
    pub n_posterior_draws: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub bind: IpAddr,
    pub port: u16,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            bind: IpAddr::from([127, 0, 0, 1]),
            port: 8080,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub query: QuerySection,
    pub serve: ServeSection,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}
