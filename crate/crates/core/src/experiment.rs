//! The experiment file: one JSON tree holding the model, training,
//! quantization and diagnostics settings plus the seed list.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{KurtosisConvention, DEFAULT_SIGMA_MULT};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::quant::QuantConfig;
use crate::training::{preset, Preset, TrainConfig};

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus file; relative paths resolve against the corpus cache
    /// directory when one is configured. `None` uses the built-in
    /// synthetic corpus.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_synthetic_bytes")]
    pub synthetic_bytes: usize,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
}

fn default_synthetic_bytes() -> usize {
    1 << 20
}

fn default_eval_fraction() -> f64 {
    0.1
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { corpus: None, synthetic_bytes: default_synthetic_bytes(), eval_fraction: default_eval_fraction() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSection {
    #[serde(default = "QuantConfig::default")]
    pub config: QuantConfig,
    #[serde(default = "default_calib_batches")]
    pub calib_batches: usize,
}

fn default_calib_batches() -> usize {
    16
}

impl Default for QuantSection {
    fn default() -> Self {
        QuantSection { config: QuantConfig::default(), calib_batches: default_calib_batches() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    #[serde(default = "default_sigma")]
    pub sigma_mult: f64,
    #[serde(default)]
    pub kurtosis_convention: KurtosisConvention,
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA_MULT
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection { sigma_mult: DEFAULT_SIGMA_MULT, kurtosis_convention: KurtosisConvention::Pearson }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Short model name used in reports, e.g. `toy`.
    pub tag: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub quant: QuantSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    /// Seeds for repeated runs; `train.seed` is overridden by each.
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// A config built from a named preset with a single seed.
    pub fn from_preset(p: Preset, variant: crate::attention::AttentionVariant) -> Self {
        let (model, train) = preset(p, variant);
        ExperimentConfig {
            schema_version: EXPERIMENT_SCHEMA_VERSION,
            tag: p.name().into(),
            seeds: vec![train.seed],
            model,
            train,
            data: DataConfig::default(),
            quant: QuantSection::default(),
            diagnostics: DiagnosticsSection::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != EXPERIMENT_SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {EXPERIMENT_SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        if self.tag.is_empty() || self.tag.contains([',', '\n']) {
            return Err(Error::config("tag", "must be non-empty without commas or newlines"));
        }
        self.model.validate()?;
        self.train.validate()?;
        if !(self.data.eval_fraction > 0.0 && self.data.eval_fraction < 1.0) {
            return Err(Error::config("data.eval_fraction", "must lie in (0, 1)"));
        }
        if self.data.corpus.is_none() && self.data.synthetic_bytes < 4 * (self.model.max_seq_len + 1) {
            return Err(Error::config("data.synthetic_bytes", "too small for the sequence length"));
        }
        self.quant.config.validate()?;
        if self.quant.calib_batches == 0 {
            return Err(Error::config("quant.calib_batches", "must be >= 1"));
        }
        if let Some(limit) = self.quant.config.act_est.batch_limit() {
            if self.quant.config.a_bits.is_some() && self.quant.calib_batches < limit {
                return Err(Error::config(
                    "quant.calib_batches",
                    format!("the activation estimator needs at least {limit} batches"),
                ));
            }
        }
        if !(self.diagnostics.sigma_mult > 0.0) {
            return Err(Error::config("diagnostics.sigma_mult", "must be > 0"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::config("seeds", "must be distinct"));
        }
        Ok(())
    }

    /// Model and training configs for one seed.
    pub fn for_seed(&self, seed: u64) -> (ModelConfig, TrainConfig) {
        (self.model.clone(), TrainConfig { seed, ..self.train.clone() })
    }
}
