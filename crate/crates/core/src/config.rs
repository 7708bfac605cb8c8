//! Run configuration, loadable from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detect::{CoherenceParams, ContinuityParams};
use crate::dpopt::{DpParams, PartitionParams, Stages};
use crate::ingest::InputFormat;
use crate::pipeline::Variant;
use crate::predict::{FusionParams, PredictorParams};
use crate::pretrain::PretrainParams;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantFlags {
    pub be: bool,
    pub ov: bool,
    pub su: bool,
    pub per: bool,
}

impl VariantFlags {
    pub fn variant(&self) -> Variant {
        Variant {
            be: self.be,
            stages: Stages { ov: self.ov, su: self.su, per: self.per },
        }
    }

    pub fn from_variant(v: Variant) -> Self {
        Self { be: v.be, ov: v.stages.ov, su: v.stages.su, per: v.stages.per }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Interaction log; when absent a synthetic dataset is generated.
    pub input: Option<PathBuf>,
    /// `assist_csv`, `jsonl`, or `json` for the canonical dataset file.
    pub format: String,
    pub out_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { input: None, format: "assist_csv".into(), out_dir: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpSection {
    pub gamma: f64,
    pub beta: f64,
    pub mu: f64,
}

impl Default for DpSection {
    fn default() -> Self {
        let d = DpParams::default();
        Self { gamma: d.gamma, beta: d.beta, mu: d.mu }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage derives its own seed from it.
    pub seed: u64,
    pub test_fraction: f64,
    /// Optimise only this leading fraction of each sequence.
    pub prefix: Option<f64>,
    pub variant: VariantFlags,
    pub paths: Paths,
    pub coherence: CoherenceParams,
    pub continuity: ContinuityParams,
    pub dp: DpSection,
    pub partition: PartitionParams,
    pub pretrain: PretrainParams,
    pub fusion: FusionParams,
    pub predictor: PredictorParams,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            test_fraction: 0.2,
            prefix: None,
            variant: VariantFlags::default(),
            paths: Paths::default(),
            coherence: CoherenceParams::default(),
            continuity: ContinuityParams::default(),
            dp: DpSection::default(),
            partition: PartitionParams::default(),
            pretrain: PretrainParams::default(),
            fusion: FusionParams::default(),
            predictor: PredictorParams::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let cfg: Self = toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn dp_params(&self) -> DpParams {
        DpParams {
            gamma: self.dp.gamma,
            beta: self.dp.beta,
            mu: self.dp.mu,
            coherence: self.coherence,
            continuity: self.continuity,
            performance: self.variant.per,
        }
    }

    pub fn fusion_params(&self) -> FusionParams {
        FusionParams { w: self.fusion.w, use_embeddings: self.variant.be }
    }

    pub fn input_format(&self) -> Result<Option<InputFormat>, ConfigError> {
        match self.paths.format.as_str() {
            "json" => Ok(None),
            other => other.parse().map(Some).map_err(|e: crate::ingest::IngestError| ConfigError::Invalid(e.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.dp_params().validate().map_err(|e| invalid(&e))?;
        if self.partition.p == 0 {
            return Err(ConfigError::Invalid("partition size p must be positive".into()));
        }
        self.pretrain.validate().map_err(|e| invalid(&e))?;
        self.fusion.validate().map_err(|e| invalid(&e))?;
        self.predictor.validate().map_err(|e| invalid(&e))?;
        self.synth.validate().map_err(|e| invalid(&e))?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(ConfigError::Invalid(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction)));
        }
        if let Some(f) = self.prefix {
            if !(0.0..=1.0).contains(&f) {
                return Err(ConfigError::Invalid(format!("prefix must lie in [0, 1], got {f}")));
            }
        }
        self.input_format()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sections_use_symbol_names() {
        let cfg = RunConfig::from_toml_str(
            "seed = 7\n[coherence]\nalpha = 0.6\nH = 3.0\n[continuity]\nLmax = 9\ny = 0.5\n[variant]\nov = true\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.coherence.alpha, 0.6);
        assert_eq!(cfg.coherence.upper, 3.0);
        assert_eq!(cfg.continuity.max_gap, 9);
        assert_eq!(cfg.continuity.poor, 0.5);
        assert!(cfg.variant.ov && !cfg.variant.per);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("sed = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[coherence]\nbeta = 1.0\n").is_err());
    }

    #[test]
    fn invariants_checked_after_load() {
        assert!(RunConfig::from_toml_str("[dp]\nbeta = 0.5\n").is_err());
        assert!(RunConfig::from_toml_str("[fusion]\nw = 2.0\n").is_err());
        assert!(RunConfig::from_toml_str("[pretrain]\nlambda = -1.0\n").is_err());
        assert!(RunConfig::from_toml_str("[paths]\nformat = \"xml\"\n").is_err());
    }
}
