//! Named model/training presets.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::VOCAB_SIZE;
use super::optim::Schedule;
use super::TrainConfig;
use crate::attention::{AttentionVariant, ClippedSoftmaxConfig, GateDesign, GatingConfig};
use crate::error::{Error, Result};
use crate::model::{LnPlacement, MeasurePoint, ModelConfig, Objective};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 2 layers, d_model 64, T 64: runs in minutes on a CPU.
    Toy,
    /// 6 layers, d_model 128, T 128: a scaled-down BERT-6L.
    Bert6lMini,
    /// BERT-base geometry and recipe; not desk-runnable.
    BertBase,
    /// OPT-125m geometry and recipe; not desk-runnable.
    Opt125m,
}

impl Preset {
    pub fn desk_runnable(self) -> bool {
        matches!(self, Preset::Toy | Preset::Bert6lMini)
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Bert6lMini => "bert6l-mini",
            Preset::BertBase => "bert-base",
            Preset::Opt125m => "opt-125m",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "toy" => Preset::Toy,
            "bert6l-mini" => Preset::Bert6lMini,
            "bert-base" => Preset::BertBase,
            "opt-125m" => Preset::Opt125m,
            _ => return Err(Error::config("preset", format!("unknown preset {s:?}"))),
        })
    }
}

/// Attention variants compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantPreset {
    Vanilla,
    /// Clipped softmax with `γ = −4/T`, `ζ = 1`.
    Clipped,
    /// Linear gates with `π_init = 0.5`.
    Gated,
}

pub fn variant_preset(v: VariantPreset) -> AttentionVariant {
    match v {
        VariantPreset::Vanilla => AttentionVariant::Vanilla,
        VariantPreset::Clipped => AttentionVariant::Clipped(ClippedSoftmaxConfig::alpha(4.0)),
        VariantPreset::Gated => AttentionVariant::Gated(GatingConfig::new(GateDesign::Linear, 0.0)),
    }
}

pub fn preset(p: Preset, variant: AttentionVariant) -> (ModelConfig, TrainConfig) {
    let mlm = Objective::Mlm { mask_prob: 0.15 };
    let base_model = |n_layers, d_model, n_heads, d_ffn, max_seq_len| ModelConfig {
        vocab_size: VOCAB_SIZE,
        max_seq_len,
        n_layers,
        d_model,
        n_heads,
        d_ffn,
        attention: variant,
        ln_placement: LnPlacement::PostLn,
        dropout_p: 0.1,
        objective: mlm,
        init_std: 0.02,
        measure_point: MeasurePoint::PostResidual,
    };
    let base_train = TrainConfig {
        steps: 5000,
        batch_size: 32,
        max_lr: 1e-3,
        warmup_steps: 500,
        schedule: Schedule::LinearDecay,
        weight_decay: 0.01,
        decay_ln_gamma: false,
        grad_clip_norm: 1.0,
        adam_betas: (0.9, 0.999),
        adam_eps: 1e-8,
        seed: 0,
        act_reg_coefficient: 0.0,
        eval_every: 250,
        eval_batches: 8,
    };
    match p {
        Preset::Toy => (base_model(2, 64, 4, 256, 64), base_train),
        Preset::Bert6lMini => (
            base_model(6, 128, 4, 512, 128),
            TrainConfig { steps: 20_000, max_lr: 5e-4, warmup_steps: 2000, eval_every: 1000, ..base_train },
        ),
        Preset::BertBase => (
            base_model(12, 768, 12, 3072, 128),
            TrainConfig {
                steps: 1_000_000,
                batch_size: 256,
                max_lr: 1e-4,
                warmup_steps: 10_000,
                eval_every: 10_000,
                ..base_train
            },
        ),
        Preset::Opt125m => (
            ModelConfig {
                ln_placement: LnPlacement::PreLn,
                objective: Objective::Clm,
                init_std: 0.006,
                ..base_model(12, 768, 12, 3072, 512)
            },
            TrainConfig {
                steps: 125_000,
                batch_size: 192,
                max_lr: 4e-4,
                warmup_steps: 2000,
                weight_decay: 0.1,
                adam_betas: (0.9, 0.95),
                eval_every: 5000,
                ..base_train
            },
        ),
    }
}

/// Recipe for continuing a vanilla model with gates attached.
pub fn finetune_train_config(base: &TrainConfig) -> TrainConfig {
    TrainConfig {
        max_lr: base.max_lr / 2.0,
        act_reg_coefficient: 1e-3,
        ..base.clone()
    }
}
