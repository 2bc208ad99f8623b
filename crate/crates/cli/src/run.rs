//! Run-directory layout, corpus loading and the exit-code contract.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use qattn::experiment::ExperimentConfig;
use qattn::quant::{QuantConfig, SpecTable};
use qattn::report::Stat;
use qattn::training::{synthetic_corpus, CorpusDataset};
use qattn::Error;

pub const CONFIG_FILE: &str = "experiment.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.qattn";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const QUANTIZE_FILE: &str = "quantize.json";

/// Corpus cache directory; relative corpus paths resolve against it.
pub const CORPUS_DIR_ENV: &str = "QATTN_CORPUS_DIR";

/// Seed of the built-in synthetic corpus. Fixed so that every run seed
/// sees the same text.
const SYNTHETIC_CORPUS_SEED: u64 = 0;

/// Version of the summary and quantize report files.
pub const RUN_SCHEMA_VERSION: u32 = 1;

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Display) -> Self {
        CliError { code, message: message.to_string() }
    }

    pub fn usage(message: impl Display) -> Self {
        Self::new(2, message)
    }
}

/// 2 configuration, 3 data, 4 checkpoint, 5 schema, 1 anything else.
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } => 2,
            Error::Data(_) => 3,
            Error::Checkpoint(_) => 4,
            Error::Schema { .. } => 5,
            _ => 1,
        };
        CliError::new(code, e)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub tag: String,
    pub method: String,
    pub seed: u64,
    pub steps: usize,
    pub initial_ppl: f64,
    pub fp_ppl: f64,
    pub max_inf_norm: f64,
    pub avg_kurtosis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizeReport {
    pub schema_version: u32,
    pub label: String,
    pub config: QuantConfig,
    pub calib_batches: usize,
    pub calib_seeds: Vec<u64>,
    pub fp_ppl: f64,
    /// Mean over calibration seeds; std only with two or more.
    pub q_ppl: Stat,
    pub q_ppls: Vec<f64>,
    /// Quantizers of the first calibration seed.
    pub specs: SpecTable,
}

/// Refuses to clobber `path` unless `overwrite` is set.
pub fn check_clobber(path: &Path, overwrite: bool) -> CliResult {
    if path.exists() && !overwrite {
        return Err(CliError::new(1, format!("{} exists; pass --overwrite to replace it", path.display())));
    }
    Ok(())
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::from(Error::io(path, e)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_file(path, text + "\n")
}

/// Reads a versioned JSON file; a version mismatch maps to exit code 5.
pub fn read_versioned<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::new(3, Error::io(path, e)))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::new(3, format!("{}: {e}", path.display())))?;
    let found = raw.get("schema_version").and_then(|v| v.as_u64());
    if found != Some(RUN_SCHEMA_VERSION as u64) {
        return Err(Error::Schema { expected: RUN_SCHEMA_VERSION, found: found.unwrap_or(0) as u32 }.into());
    }
    serde_json::from_value(raw).map_err(|e| CliError::new(5, format!("{}: {e}", path.display())))
}

pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    // A missing or unreadable config is a configuration error.
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(Error::io(path, e)))?;
    Ok(ExperimentConfig::from_json(&text)?)
}

pub fn run_config(run: &Path) -> CliResult<ExperimentConfig> {
    load_config(&run.join(CONFIG_FILE))
}

fn corpus_path(p: &Path) -> PathBuf {
    match std::env::var_os(CORPUS_DIR_ENV) {
        Some(dir) if p.is_relative() => PathBuf::from(dir).join(p),
        _ => p.to_path_buf(),
    }
}

/// Train and held-out splits of the configured corpus.
pub fn load_corpus(cfg: &ExperimentConfig) -> CliResult<(CorpusDataset, CorpusDataset)> {
    let seq_len = cfg.model.max_seq_len;
    let full = match &cfg.data.corpus {
        Some(p) => CorpusDataset::from_file(&corpus_path(p), seq_len)?,
        None => CorpusDataset::from_bytes(&synthetic_corpus(cfg.data.synthetic_bytes, SYNTHETIC_CORPUS_SEED), seq_len)?,
    };
    Ok(full.split(cfg.data.eval_fraction)?)
}
