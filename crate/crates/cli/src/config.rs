//! Experiment configuration, read from TOML.
//!
//! Every section is optional and every key has a default; unknown keys are
//! rejected. Running `imago config` (or reading [`ExperimentConfig::default`])
//! shows the full set of defaults.

use std::fs;
use std::path::{Path, PathBuf};

use imago_core::preprocess::PreprocessConfig;
use imago_core::ridgemap::{LambdaChoice, WindowSpec, LAMBDA_GRID};
use imago_core::synth::SynthConfig;
use imago_core::PairingMode;
use imago_nnet::loso::LosoConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const OUT_ENV: &str = "IMAGO_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Root for every stage directory; `IMAGO_OUT` takes precedence.
    pub root: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            root: PathBuf::from("imago_out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RidgeConfig {
    pub window_ms: f64,
    pub step_ms: f64,
    pub lambda: f64,
    /// Pick lambda per fold from the fixed grid by an inner leave-one-out.
    pub nested: bool,
    pub pairing: PairingMode,
    pub null_seed: u64,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        RidgeConfig {
            window_ms: 500.0,
            step_ms: 100.0,
            lambda: imago_core::ridgemap::DEFAULT_LAMBDA,
            nested: false,
            pairing: PairingMode::default(),
            null_seed: 0,
        }
    }
}

impl RidgeConfig {
    pub fn window_spec(&self, sample_rate_hz: f64) -> Result<WindowSpec> {
        Ok(WindowSpec::new(self.window_ms, self.step_ms, sample_rate_hz)?)
    }

    pub fn lambda_choice(&self) -> LambdaChoice {
        if self.nested {
            LambdaChoice::Nested(&LAMBDA_GRID)
        } else {
            LambdaChoice::Fixed(self.lambda)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub histogram_bins: usize,
    pub histogram_range: (f64, f64),
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            histogram_bins: 40,
            histogram_range: (-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output: OutputConfig,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub ridge: RidgeConfig,
    pub cnn: LosoConfig,
    pub report: ReportConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Sets every seed in the configuration to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.ridge.null_seed = seed;
        self.cnn.train.seed = seed;
        self.cnn.null_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.cnn.arch.validate()?;
        self.cnn.train.validate()?;
        self.cnn.loss.validate()?;
        if !(self.ridge.lambda >= 0.0 && self.ridge.lambda.is_finite()) {
            return Err(CliError::Config("ridge.lambda must be a non-negative number".into()));
        }
        if self.report.histogram_bins == 0 || self.report.histogram_range.0 >= self.report.histogram_range.1 {
            return Err(CliError::Config("report histogram needs bins > 0 and lo < hi".into()));
        }
        Ok(())
    }

    /// Output root, honoring `IMAGO_OUT`.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output.root.clone(),
        }
    }
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn hash_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes to JSON");
    hex::encode(Sha256::digest(json))
}
