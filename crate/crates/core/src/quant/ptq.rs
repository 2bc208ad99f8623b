//! Post-training quantization of a trained model.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{check_bits, QuantizerSpec, RangeEstimator, RangeObserver};
use crate::error::{Error, Result};
use crate::model::{eval_loss, perplexity, Batch, ModelConfig, ModelParams, HEAD_PREFIX};
use crate::params::ParamTree;
use crate::sites::{ActivationHook, NoHook, Site};
use crate::tensor::{Tape, Tensor, Var};

pub const SPEC_SCHEMA_VERSION: u32 = 1;

/// A PTQ configuration; `None` bit-widths leave that side in floating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub w_bits: Option<u32>,
    pub a_bits: Option<u32>,
    #[serde(default = "default_weight_est")]
    pub weight_est: RangeEstimator,
    #[serde(default = "default_act_est")]
    pub act_est: RangeEstimator,
}

fn default_weight_est() -> RangeEstimator {
    RangeEstimator::MinMax
}

fn default_act_est() -> RangeEstimator {
    RangeEstimator::RUNNING_DEFAULT
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig::wa(8, 8)
    }
}

impl QuantConfig {
    pub fn wa(w_bits: u32, a_bits: u32) -> Self {
        QuantConfig {
            w_bits: Some(w_bits),
            a_bits: Some(a_bits),
            weight_est: default_weight_est(),
            act_est: default_act_est(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.w_bits {
            check_bits("quant.w_bits", b)?;
        }
        if let Some(b) = self.a_bits {
            check_bits("quant.a_bits", b)?;
        }
        self.weight_est.validate()?;
        self.act_est.validate()
    }

    /// `W8A8`, `W8A32` for floating-point activations, and so on.
    pub fn label(&self) -> String {
        format!("W{}A{}", self.w_bits.unwrap_or(32), self.a_bits.unwrap_or(32))
    }
}

/// Base weights with their fake-quantized copy and every quantizer used.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    pub config: QuantConfig,
    /// Parameters with weight matrices replaced by their quantized values.
    pub params: ModelParams<Tensor>,
    pub weight_specs: Vec<(String, QuantizerSpec)>,
    pub act_specs: BTreeMap<Site, QuantizerSpec>,
}

/// Fake-quantizes every visited site with its calibrated spec.
struct QuantHook<'a> {
    specs: &'a BTreeMap<Site, QuantizerSpec>,
}

impl ActivationHook for QuantHook<'_> {
    fn visit(&mut self, tape: &mut Tape, site: Site, value: Var) -> Result<Var> {
        let spec = self
            .specs
            .get(&site)
            .ok_or_else(|| Error::Contract(format!("no activation quantizer for site {site}")))?;
        let q = spec.quantize(tape.value(value));
        Ok(tape.constant(q))
    }
}

struct CalibHook {
    estimator: RangeEstimator,
    bits: u32,
    pass: usize,
    observers: BTreeMap<Site, RangeObserver>,
}

impl ActivationHook for CalibHook {
    fn visit(&mut self, tape: &mut Tape, site: Site, value: Var) -> Result<Var> {
        if !self.observers.contains_key(&site) {
            self.observers.insert(site, self.estimator.observer(self.bits, false)?);
        }
        let obs = self.observers.get_mut(&site).expect("inserted above");
        obs.observe(self.pass, tape.value(value).data())?;
        Ok(value)
    }
}

/// Weight matrices are quantized; the LM head, biases and LayerNorm
/// parameters stay in floating point.
pub fn is_quantized_weight(name: &str, kind: crate::params::ParamKind) -> bool {
    kind.is_matrix() && !name.starts_with(HEAD_PREFIX)
}

fn weight_spec(data: &[f64], est: RangeEstimator, bits: u32) -> Result<QuantizerSpec> {
    // A weight tensor is a one-batch stream, so EMA estimators reduce to
    // their single-batch statistic.
    let est = match est {
        RangeEstimator::RunningMinMax { .. } => RangeEstimator::MinMax,
        e => e,
    };
    let mut obs = est.observer(bits, true)?;
    for pass in 0..obs.passes() {
        obs.observe(pass, data)?;
    }
    obs.spec()
}

/// Quantizes weights (symmetric, per tensor) and calibrates one static
/// asymmetric quantizer per activation site over `calibration`.
pub fn calibrate_and_quantize(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    calibration: &[Batch],
    qcfg: &QuantConfig,
) -> Result<QuantizedModel> {
    qcfg.validate()?;
    let mut qparams = params.clone();
    let mut weight_specs = Vec::new();
    if let Some(bits) = qcfg.w_bits {
        for p in qparams.flatten_mut() {
            if is_quantized_weight(&p.name, p.kind) {
                let spec = weight_spec(p.leaf.data(), qcfg.weight_est, bits)?;
                *p.leaf = spec.quantize(p.leaf);
                weight_specs.push((p.name, spec));
            }
        }
    }

    let mut act_specs = BTreeMap::new();
    if let Some(bits) = qcfg.a_bits {
        if calibration.is_empty() {
            return Err(Error::Contract("activation calibration needs at least one batch".into()));
        }
        let used = qcfg.act_est.batch_limit().map_or(calibration.len(), |n| n.min(calibration.len()));
        let mut hook = CalibHook {
            estimator: qcfg.act_est,
            bits,
            pass: 0,
            observers: BTreeMap::new(),
        };
        let passes = qcfg.act_est.observer(bits, false)?.passes();
        for pass in 0..passes {
            hook.pass = pass;
            for batch in &calibration[..used] {
                let mut tape = Tape::new();
                let pv = qparams.to_constants(&mut tape);
                crate::model::forward(&mut tape, &pv, cfg, &batch.inputs, &Default::default(), &mut hook, None)?;
            }
        }
        for (site, obs) in hook.observers {
            let spec = obs.spec().map_err(|e| match e {
                Error::Contract(m) => Error::Contract(format!("{site}: {m}")),
                other => other,
            })?;
            act_specs.insert(site, spec);
        }
    }

    Ok(QuantizedModel {
        config: *qcfg,
        params: qparams,
        weight_specs,
        act_specs,
    })
}

impl QuantizedModel {
    pub fn eval_loss(&self, cfg: &ModelConfig, batches: &[Batch]) -> Result<f64> {
        if self.config.a_bits.is_some() {
            let mut hook = QuantHook { specs: &self.act_specs };
            eval_loss(&self.params, cfg, batches, &mut hook)
        } else {
            eval_loss(&self.params, cfg, batches, &mut NoHook)
        }
    }

    pub fn spec_table(&self) -> SpecTable {
        SpecTable {
            schema_version: SPEC_SCHEMA_VERSION,
            config: self.config,
            weights: self
                .weight_specs
                .iter()
                .map(|(name, spec)| NamedSpec { name: name.clone(), spec: *spec })
                .collect(),
            activations: self
                .act_specs
                .iter()
                .map(|(site, spec)| NamedSpec { name: site.to_string(), spec: *spec })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedSpec {
    pub name: String,
    #[serde(flatten)]
    pub spec: QuantizerSpec,
}

/// JSON-serializable listing of every quantizer in a [`QuantizedModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecTable {
    pub schema_version: u32,
    pub config: QuantConfig,
    pub weights: Vec<NamedSpec>,
    pub activations: Vec<NamedSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub w_bits: Option<u32>,
    pub a_bits: Option<u32>,
    pub weight_est: String,
    pub act_est: String,
    pub fp_ppl: f64,
    pub q_ppl: f64,
}

/// One row per configuration, in input order.
pub fn bitwidth_sweep(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    calibration: &[Batch],
    eval: &[Batch],
    configs: &[QuantConfig],
) -> Result<Vec<SweepRow>> {
    let fp_ppl = perplexity(eval_loss(params, cfg, eval, &mut NoHook)?);
    configs
        .iter()
        .map(|q| {
            let qm = calibrate_and_quantize(params, cfg, calibration, q)?;
            Ok(SweepRow {
                w_bits: q.w_bits,
                a_bits: q.a_bits,
                weight_est: q.weight_est.to_string(),
                act_est: q.act_est.to_string(),
                fp_ppl,
                q_ppl: perplexity(qm.eval_loss(cfg, eval)?),
            })
        })
        .collect()
}

/// CSV with header `w_bits,a_bits,weight_est,act_est,fp_ppl,q_ppl`;
/// floating-point sides are written as `fp`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let bits = |b: Option<u32>| b.map_or_else(|| "fp".to_string(), |b| b.to_string());
    let mut out = String::from("w_bits,a_bits,weight_est,act_est,fp_ppl,q_ppl\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            bits(r.w_bits),
            bits(r.a_bits),
            r.weight_est,
            r.act_est,
            r.fp_ppl,
            r.q_ppl
        );
    }
    out
}
