//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use theraloop_core::consensus::IntegrationMode;
use theraloop_core::extraction::ExtractionMode;
use theraloop_core::gateway::GatewayConfig;
use theraloop_core::pipeline::{Ablation, RunConfig};
use theraloop_core::reasoning::{PredictionMode, ReasonConfig};

pub const API_KEY_ENV: &str = "THERALOOP_API_KEY";
/// Config tuned to the synthetic cohort generator.
pub const SYNTHETIC_TOML: &str = include_str!("../configs/synthetic.toml");

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Deterministic,
    Model,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    /// Offline rule-driven answers for every template.
    #[default]
    Stub,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub backend: BackendChoice,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub retries: u32,
    pub max_inflight: usize,
    pub call_budget: Option<u64>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
}

impl Default for GatewaySection {
    fn default() -> Self {
        GatewaySection {
            backend: BackendChoice::Stub,
            endpoint: None,
            model: None,
            retries: GatewayConfig::default().retries,
            max_inflight: 4,
            call_budget: None,
            temperature: 0.0,
            max_tokens: 1024,
            timeout_secs: 60,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub mode: Mode,
    pub seed: u64,
    pub k: usize,
    pub top_n: usize,
    pub min_support: u32,
    pub folds: usize,
    /// Worker threads for per-patient evaluation; 0 means one per core.
    pub workers: usize,
    pub gateway: GatewaySection,
    pub memory: PathSection,
    pub index: PathSection,
    pub reason: ReasonConfig,
    pub ablation: Ablation,
}

impl Default for FileConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        FileConfig {
            mode: Mode::Deterministic,
            seed: run.seed,
            k: run.k,
            top_n: run.top_n,
            min_support: run.min_support,
            folds: run.folds,
            workers: 0,
            gateway: GatewaySection::default(),
            memory: PathSection::default(),
            index: PathSection::default(),
            reason: run.reason,
            ablation: run.ablation,
        }
    }
}

impl FileConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<FileConfig, ConfigError> {
        let cfg: FileConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_path_buf(), source: Box::new(e) })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<FileConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        FileConfig::parse(&text, path)
    }

    pub fn synthetic() -> FileConfig {
        FileConfig::parse(SYNTHETIC_TOML, Path::new("configs/synthetic.toml")).expect("shipped config parses")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.k == 0 || self.top_n == 0 {
            return bad("k and top_n must be at least 1");
        }
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if !(self.reason.lambda.is_finite() && self.reason.delta.is_finite() && self.reason.delta >= 0.0) {
            return bad("reason.lambda must be finite and reason.delta finite and non-negative");
        }
        if self.gateway.max_inflight == 0 {
            return bad("gateway.max_inflight must be at least 1");
        }
        if self.gateway.backend == BackendChoice::Remote && (self.gateway.endpoint.is_none() || self.gateway.model.is_none()) {
            return bad("gateway.backend = remote needs gateway.endpoint and gateway.model");
        }
        Ok(())
    }

    /// The core run configuration this file describes.
    pub fn run_config(&self) -> RunConfig {
        let model = self.mode == Mode::Model;
        let mut run = RunConfig {
            gateway: GatewayConfig { retries: self.gateway.retries, call_budget: self.gateway.call_budget },
            integration: if model { IntegrationMode::Model } else { IntegrationMode::Deterministic },
            reasoning: if model { PredictionMode::Model } else { PredictionMode::Deterministic },
            memory_path: self.memory.path.as_ref().map(|p| p.display().to_string()),
            index_path: self.index.path.as_ref().map(|p| p.display().to_string()),
            k: self.k,
            top_n: self.top_n,
            min_support: self.min_support,
            reason: self.reason,
            ablation: self.ablation,
            folds: self.folds,
            seed: self.seed,
            ..RunConfig::default()
        };
        run.extraction.mode = if model { ExtractionMode::Model } else { ExtractionMode::Deterministic };
        run
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let c = FileConfig::parse("", Path::new("x")).unwrap();
        assert_eq!(c, FileConfig::default());
        assert_eq!(c.run_config(), RunConfig::default());
    }

    #[test]
    fn synthetic_config_shares_generator_delta() {
        let c = FileConfig::synthetic();
        let g = theraloop_core::synth::SynthParams::shipped();
        assert_eq!(c.reason.delta, g.outcome.delta);
        assert_eq!(c.mode, Mode::Deterministic);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(FileConfig::parse("k = 0", Path::new("x")).is_err());
        assert!(FileConfig::parse("[gateway]\nbackend = \"remote\"", Path::new("x")).is_err());
        assert!(FileConfig::parse("unknown = 1", Path::new("x")).is_err());
        let c = FileConfig::parse("mode = \"model\"\n[reason]\nlambda = 0.5", Path::new("x")).unwrap();
        let run = c.run_config();
        assert_eq!(run.reasoning, PredictionMode::Model);
        assert_eq!(run.reason.lambda, 0.5);
        assert_eq!(run.reason.delta, ReasonConfig::default().delta);
    }
}
