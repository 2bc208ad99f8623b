//! Named activation sites and the hook that forward passes call at each.
//!
//! Calibration records statistics through a hook, the quantized forward
//! replaces values through one, and the plain forward uses [`NoHook`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// Token + position embedding sum (after the embedding LayerNorm, if any).
    Embedding,
    Query,
    Key,
    Value,
    /// Scaled `QKᵀ` before masking.
    Scores,
    /// Attention probabilities (softmax or clipped softmax output).
    Probs,
    /// Gate probabilities `π`.
    GateProbs,
    /// Head outputs concatenated; input of the output projection.
    Context,
    AttnOutput,
    AttnResidual,
    AttnNorm,
    FfnHidden,
    FfnAct,
    FfnOutput,
    FfnResidual,
    FfnNorm,
    FinalNorm,
}

impl SiteKind {
    pub fn label(self) -> &'static str {
        match self {
            SiteKind::Embedding => "embedding",
            SiteKind::Query => "attn.q",
            SiteKind::Key => "attn.k",
            SiteKind::Value => "attn.v",
            SiteKind::Scores => "attn.scores",
            SiteKind::Probs => "attn.probs",
            SiteKind::GateProbs => "attn.gate_probs",
            SiteKind::Context => "attn.context",
            SiteKind::AttnOutput => "attn.out",
            SiteKind::AttnResidual => "attn.residual",
            SiteKind::AttnNorm => "attn.norm",
            SiteKind::FfnHidden => "ffn.hidden",
            SiteKind::FfnAct => "ffn.act",
            SiteKind::FfnOutput => "ffn.out",
            SiteKind::FfnResidual => "ffn.residual",
            SiteKind::FfnNorm => "ffn.norm",
            SiteKind::FinalNorm => "final_norm",
        }
    }
}

/// A site is a kind plus the (0-based) layer it belongs to; model-level
/// sites carry `layer = None`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub layer: Option<usize>,
    pub kind: SiteKind,
}

impl Site {
    pub fn model(kind: SiteKind) -> Self {
        Site { layer: None, kind }
    }

    pub fn layer(layer: usize, kind: SiteKind) -> Self {
        Site { layer: Some(layer), kind }
    }
}

/// External names use 1-based layer numbers.
impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer{}.{}", l + 1, self.kind.label()),
            None => f.write_str(self.kind.label()),
        }
    }
}

pub trait ActivationHook {
    /// Called with every site value; returns the value the forward pass
    /// continues with.
    fn visit(&mut self, tape: &mut Tape, site: Site, value: Var) -> Result<Var>;
}

/// Identity hook.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoHook;

impl ActivationHook for NoHook {
    fn visit(&mut self, _tape: &mut Tape, _site: Site, value: Var) -> Result<Var> {
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_is_one_based() {
        assert_eq!(Site::layer(0, SiteKind::Probs).to_string(), "layer1.attn.probs");
        assert_eq!(Site::model(SiteKind::Embedding).to_string(), "embedding");
    }
}
