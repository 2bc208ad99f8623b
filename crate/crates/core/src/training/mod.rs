//! Training loop, presets and the gated fine-tuning recipe.

pub mod data;
pub mod optim;
mod presets;

pub use data::{fixed_batches, make_batch, make_clm_batch, make_mlm_batch, synthetic_corpus, CorpusDataset, MASK_ID, PAD_ID, VOCAB_SIZE};
pub use optim::{adamw_step, clip_grad_norm, global_norm, lr_at, AdamState, AdamWHyper, Schedule};
pub use presets::{finetune_train_config, preset, variant_preset, Preset, VariantPreset};

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionVariant, GateDesign, GateParams, GatingConfig};
use crate::diagnostics::{analyze, KurtosisConvention, OutlierReport};
use crate::error::{Error, Result};
use crate::model::{activation_regularizer, eval_loss, forward, loss, perplexity, Batch, Dropout, ModelConfig, ModelParams};
use crate::params::ParamTree;
use crate::sites::NoHook;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub weight_decay: f64,
    #[serde(default)]
    pub decay_ln_gamma: bool,
    pub grad_clip_norm: f64,
    pub adam_betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    pub seed: u64,
    /// Coefficient of the FFN-output activation penalty; 0 disables it.
    #[serde(default)]
    pub act_reg_coefficient: f64,
    pub eval_every: usize,
    /// Number of fixed held-out batches used at every evaluation.
    pub eval_batches: usize,
}

fn default_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("train.{name}");
        if self.steps == 0 {
            return Err(Error::config(f("steps"), "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(f("batch_size"), "must be >= 1"));
        }
        if !(self.max_lr > 0.0) || !self.max_lr.is_finite() {
            return Err(Error::config(f("max_lr"), "must be > 0"));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::config(f("warmup_steps"), format!("must be <= steps ({})", self.steps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(f("weight_decay"), "must be >= 0"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::config(f("grad_clip_norm"), "must be > 0"));
        }
        let (b1, b2) = self.adam_betas;
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return Err(Error::config(f("adam_betas"), "both betas must lie in (0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config(f("adam_eps"), "must be > 0"));
        }
        if !(self.act_reg_coefficient >= 0.0) {
            return Err(Error::config(f("act_reg_coefficient"), "must be >= 0"));
        }
        if self.eval_every == 0 {
            return Err(Error::config(f("eval_every"), "must be >= 1"));
        }
        if self.eval_batches == 0 {
            return Err(Error::config(f("eval_batches"), "must be >= 1"));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            weight_decay: self.weight_decay,
            betas: self.adam_betas,
            eps: self.adam_eps,
            decay_ln_gamma: self.decay_ln_gamma,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_at(step, self.steps, self.warmup_steps, self.max_lr, self.schedule)
    }
}

/// One line of the metrics history; evaluation columns are filled on
/// evaluation steps only, training columns on optimizer steps only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub eval_ppl: Option<f64>,
    pub max_inf_norm: Option<f64>,
    pub avg_kurtosis: Option<f64>,
    pub grad_norm: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,lr,train_loss,eval_ppl,max_inf_norm,avg_kurtosis,grad_norm";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step,
            r.lr,
            cell(r.train_loss),
            cell(r.eval_ppl),
            cell(r.max_inf_norm),
            cell(r.avg_kurtosis),
            cell(r.grad_norm)
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<Tensor>,
    pub history: Vec<MetricsRow>,
    /// Outlier snapshots taken at every evaluation, keyed by step.
    pub reports: Vec<(usize, OutlierReport)>,
}

impl TrainOutcome {
    pub fn eval_ppls(&self) -> Vec<(usize, f64)> {
        self.history.iter().filter_map(|r| r.eval_ppl.map(|p| (r.step, p))).collect()
    }

    pub fn final_report(&self) -> Option<&OutlierReport> {
        self.reports.last().map(|(_, r)| r)
    }
}

/// Independent random streams derived from the run seed.
struct Streams {
    init: ChaCha8Rng,
    batches: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let mk = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        Streams { init: mk(1), batches: mk(2), dropout: mk(3) }
    }
}

/// Deterministic held-out batches for a run.
pub fn eval_set(model: &ModelConfig, train: &TrainConfig, data: &CorpusDataset) -> Result<Vec<Batch>> {
    fixed_batches(data, model.objective, train.eval_batches, train.batch_size, train.seed ^ 0x5eed_e7a1)
}

fn evaluate(params: &ModelParams<Tensor>, cfg: &ModelConfig, eval: &[Batch]) -> Result<(f64, OutlierReport)> {
    let ppl = perplexity(eval_loss(params, cfg, eval, &mut NoHook)?);
    let report = analyze(params, cfg, eval, KurtosisConvention::Pearson)?;
    Ok((ppl, report))
}

/// Trains from a fresh initialization (or `init`, when given) and records
/// the metrics history.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_data: &CorpusDataset,
    eval_data: &CorpusDataset,
    init: Option<ModelParams<Tensor>>,
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if train_data.seq_len() > model.max_seq_len {
        return Err(Error::config("model.max_seq_len", "shorter than the dataset sequence length"));
    }
    let mut streams = Streams::new(cfg.seed);
    let mut params = match init {
        Some(p) => p,
        None => ModelParams::init(model, &mut streams.init)?,
    };
    let eval = eval_set(model, cfg, eval_data)?;
    let mut state = AdamState::new(&params);
    let hyper = cfg.hyper();
    let mut history = Vec::new();
    let mut reports = Vec::new();

    for step in 0..=cfg.steps {
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let (ppl, report) = evaluate(&params, model, &eval)?;
            history.push(MetricsRow {
                step,
                lr: cfg.lr_at(step),
                train_loss: None,
                eval_ppl: Some(ppl),
                max_inf_norm: Some(report.max_inf_norm),
                avg_kurtosis: Some(report.avg_kurtosis),
                grad_norm: None,
            });
            reports.push((step, report));
        }
        if step == cfg.steps {
            break;
        }

        let batch = make_batch(train_data, &mut streams.batches, model.objective, cfg.batch_size);
        let mut tape = Tape::new();
        let pv = params.to_vars(&mut tape);
        let dropout = (model.dropout_p > 0.0).then(|| Dropout { p: model.dropout_p, rng: &mut streams.dropout });
        let out = forward(&mut tape, &pv, model, &batch.inputs, &Default::default(), &mut NoHook, dropout)?;
        let task = loss(&mut tape, out.logits, &batch.targets)?;
        let total = if cfg.act_reg_coefficient > 0.0 {
            let ffn: Vec<_> = out.layers.iter().map(|l| l.ffn_out).collect();
            let reg = activation_regularizer(&mut tape, &ffn, cfg.act_reg_coefficient)?;
            tape.add(task, reg)?
        } else {
            task
        };
        let loss_value = tape.value(total).item()?;
        tape.backward(total)?;
        let mut grads: Vec<Tensor> = pv
            .flatten()
            .iter()
            .map(|n| tape.grad(*n.leaf).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(*n.leaf).to_vec())))
            .collect();
        drop(tape);
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip_norm);
        if !loss_value.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: loss {loss_value}, grad norm {grad_norm}"
            )));
        }
        let lr = cfg.lr_at(step + 1);
        adamw_step(&mut params, &grads, &mut state, lr, &hyper)?;
        history.push(MetricsRow {
            step: step + 1,
            lr,
            train_loss: Some(loss_value),
            eval_ppl: None,
            max_inf_norm: None,
            avg_kurtosis: None,
            grad_norm: Some(grad_norm),
        });
    }
    Ok(TrainOutcome { params, history, reports })
}

/// Gate scale that keeps the expected gate output at 1 when `π_init = 0.5`.
pub const FINETUNE_GATE_SCALE: f64 = 2.0;

/// Adds freshly initialized gates (zero weights, `b_init = 0`,
/// `gate_scale = 2`) to a vanilla model, so the gated forward pass equals
/// the vanilla one exactly at the start.
pub fn attach_gates(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    design: GateDesign,
) -> Result<(ModelConfig, ModelParams<Tensor>)> {
    if cfg.attention != AttentionVariant::Vanilla {
        return Err(Error::Contract("gates can only be attached to a vanilla-attention model".into()));
    }
    let template = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    if template.flatten().iter().zip(params.flatten()).any(|(a, b)| a.leaf.shape() != b.leaf.shape())
        || template.blocks.len() != params.blocks.len()
    {
        return Err(Error::Contract("pretrained parameters do not match the model geometry".into()));
    }
    let gating = GatingConfig { design, b_init: 0.0, gate_scale: FINETUNE_GATE_SCALE };
    let gated_cfg = ModelConfig { attention: AttentionVariant::Gated(gating), ..cfg.clone() };
    gated_cfg.validate()?;
    let mut gated = params.clone();
    let attn_cfg = gated_cfg.attention_config();
    for block in &mut gated.blocks {
        let mut gate = crate::attention::init_gate(&gating, attn_cfg.n_heads, attn_cfg.d_head(), &mut ChaCha8Rng::seed_from_u64(0))?;
        zero_gate_weights(&mut gate);
        block.attn.gate = Some(gate);
    }
    Ok((gated_cfg, gated))
}

fn zero_gate_weights(gate: &mut GateParams<Tensor>) {
    for p in gate.flatten_mut() {
        if p.kind == crate::params::ParamKind::GateWeight {
            p.leaf.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Continues training a vanilla model after attaching gates; requires a
/// positive activation-regularization coefficient.
pub fn finetune_with_gates(
    pretrained: &ModelParams<Tensor>,
    model: &ModelConfig,
    design: GateDesign,
    cfg: &TrainConfig,
    train_data: &CorpusDataset,
    eval_data: &CorpusDataset,
) -> Result<(ModelConfig, TrainOutcome)> {
    if !(cfg.act_reg_coefficient > 0.0) {
        return Err(Error::config("train.act_reg_coefficient", "gated fine-tuning needs a positive coefficient"));
    }
    let (gated_cfg, gated) = attach_gates(pretrained, model, design)?;
    let outcome = train(&gated_cfg, cfg, train_data, eval_data, Some(gated))?;
    Ok((gated_cfg, outcome))
}
