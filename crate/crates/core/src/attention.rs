//! Multi-head self-attention with three probability/gating variants:
//! plain softmax, clipped softmax, and per-head sigmoid gating.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{join, Linear, Named, ParamKind, ParamTree};
use crate::sites::{ActivationHook, Site, SiteKind};
use crate::tensor::{Tape, Tensor, Var};

/// How the lower stretch factor `γ` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// A fixed `γ ≤ 0`.
    Fixed(f64),
    /// `γ = −α / T`, evaluated per call from the sequence length.
    Alpha(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClippedSoftmaxConfig {
    pub zeta: f64,
    pub gamma: GammaMode,
}

impl ClippedSoftmaxConfig {
    pub fn fixed(gamma: f64, zeta: f64) -> Self {
        ClippedSoftmaxConfig { zeta, gamma: GammaMode::Fixed(gamma) }
    }

    pub fn alpha(alpha: f64) -> Self {
        ClippedSoftmaxConfig { zeta: 1.0, gamma: GammaMode::Alpha(alpha) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zeta >= 1.0) || !self.zeta.is_finite() {
            return Err(Error::config("zeta", format!("must be >= 1, got {}", self.zeta)));
        }
        match self.gamma {
            GammaMode::Fixed(g) if !(g <= 0.0) || !g.is_finite() => {
                Err(Error::config("gamma", format!("must be <= 0, got {g}")))
            }
            GammaMode::Alpha(a) if !(a > 0.0) || !a.is_finite() => {
                Err(Error::config("alpha", format!("must be > 0, got {a}")))
            }
            _ => Ok(()),
        }
    }

    /// `γ` in effect for a sequence of length `seq_len`.
    pub fn gamma_for(&self, seq_len: usize) -> Result<f64> {
        match self.gamma {
            GammaMode::Fixed(g) => Ok(g),
            GammaMode::Alpha(_) if seq_len == 0 => {
                Err(Error::Contract("alpha-parameterized gamma needs seq_len >= 1".into()))
            }
            GammaMode::Alpha(a) => Ok(-a / seq_len as f64),
        }
    }

    /// Softmax values strictly below this map to exactly zero.
    pub fn zero_threshold(&self, seq_len: usize) -> Result<f64> {
        let g = self.gamma_for(seq_len)?;
        Ok(-g / (self.zeta - g))
    }

    /// Softmax values strictly above this map to exactly one.
    pub fn one_threshold(&self, seq_len: usize) -> Result<f64> {
        let g = self.gamma_for(seq_len)?;
        Ok((1.0 - g) / (self.zeta - g))
    }

    pub fn label(&self) -> String {
        match self.gamma {
            GammaMode::Fixed(g) => format!("clipped_softmax(gamma={g}, zeta={})", self.zeta),
            GammaMode::Alpha(a) => format!("clipped_softmax(alpha={a}, zeta={})", self.zeta),
        }
    }
}

/// `clip((ζ − γ)·softmax(x) + γ, 0, 1)` along `axis`.
///
/// Masked logits must already be `-inf`; they stretch to `γ ≤ 0` and clip
/// to exactly zero.
pub fn clipped_softmax(
    tape: &mut Tape,
    x: Var,
    axis: usize,
    cfg: &ClippedSoftmaxConfig,
    seq_len: usize,
) -> Result<Var> {
    cfg.validate()?;
    let gamma = cfg.gamma_for(seq_len)?;
    let p = tape.softmax(x, axis)?;
    let stretched = tape.scale(p, cfg.zeta - gamma);
    let shifted = tape.offset(stretched, gamma);
    Ok(tape.clip(shifted, 0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GateDesign {
    /// One `d_head → 1` linear map per head.
    Linear,
    /// One `d_head → n_hid → 1` ReLU MLP per head.
    Mlp { n_hid: usize },
    /// A single `d_model → n_heads` linear map.
    AllHeadsLinear,
}

impl GateDesign {
    pub fn label(&self) -> String {
        match self {
            GateDesign::Linear => "linear".into(),
            GateDesign::Mlp { n_hid } => format!("mlp(n_hid={n_hid})"),
            GateDesign::AllHeadsLinear => "all_heads_linear".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatingConfig {
    pub design: GateDesign,
    /// Initial value of the gate output bias.
    pub b_init: f64,
    /// Multiplier applied to `π` (2 for the fine-tuning adaptation).
    #[serde(default = "default_gate_scale")]
    pub gate_scale: f64,
}

fn default_gate_scale() -> f64 {
    1.0
}

impl GatingConfig {
    pub fn new(design: GateDesign, b_init: f64) -> Self {
        GatingConfig { design, b_init, gate_scale: 1.0 }
    }

    /// Gate whose initial probability is `pi_init`.
    pub fn with_pi_init(design: GateDesign, pi_init: f64) -> Result<Self> {
        Ok(Self::new(design, logit(pi_init)?))
    }

    pub fn validate(&self) -> Result<()> {
        if let GateDesign::Mlp { n_hid: 0 } = self.design {
            return Err(Error::config("gating.design.n_hid", "must be >= 1"));
        }
        if !self.b_init.is_finite() {
            return Err(Error::config("gating.b_init", "must be finite"));
        }
        if !(self.gate_scale > 0.0) || !self.gate_scale.is_finite() {
            return Err(Error::config("gating.gate_scale", "must be > 0"));
        }
        Ok(())
    }

    /// `σ(b_init)`.
    pub fn pi_init(&self) -> f64 {
        crate::tensor::sigmoid(self.b_init)
    }

    /// Extra parameters per attention layer.
    pub fn param_count(&self, n_heads: usize, d_head: usize) -> usize {
        match self.design {
            GateDesign::Linear => n_heads * (d_head + 1),
            GateDesign::Mlp { n_hid } => n_heads * (n_hid * (d_head + 2) + 1),
            GateDesign::AllHeadsLinear => n_heads * (n_heads * d_head + 1),
        }
    }
}

/// Inverse of the logistic sigmoid.
pub fn logit(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::config("pi_init", format!("must lie in (0, 1), got {p}")));
    }
    Ok((p / (1.0 - p)).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttentionVariant {
    Vanilla,
    Clipped(ClippedSoftmaxConfig),
    Gated(GatingConfig),
}

impl AttentionVariant {
    pub fn label(&self) -> String {
        match self {
            AttentionVariant::Vanilla => "vanilla".into(),
            AttentionVariant::Clipped(c) => c.label(),
            AttentionVariant::Gated(g) => format!(
                "gated({}, pi_init={:.4}, gate_scale={})",
                g.design.label(),
                g.pi_init(),
                g.gate_scale
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub variant: AttentionVariant,
    #[serde(default)]
    pub causal: bool,
}

impl AttentionConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "attention.n_heads",
                format!("d_model {} is not a positive multiple of n_heads {}", self.d_model, self.n_heads),
            ));
        }
        match &self.variant {
            AttentionVariant::Vanilla => Ok(()),
            AttentionVariant::Clipped(c) => c.validate(),
            AttentionVariant::Gated(g) => g.validate(),
        }
    }
}

// ---- parameters ----------------------------------------------------------

/// Gate parameters; per-head tensors carry a leading `n_heads` axis so one
/// batched product evaluates every head's own map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GateParams<T> {
    /// `w: [H, d_head, 1]`, `b: [H, 1, 1]`.
    Linear { w: T, b: T },
    /// `w1: [H, d_head, n_hid]`, `b1: [H, 1, n_hid]`, `w2: [H, n_hid, 1]`, `b2: [H, 1, 1]`.
    Mlp { w1: T, b1: T, w2: T, b2: T },
    /// `w: [d_model, H]`, `b: [H]`.
    AllHeads { w: T, b: T },
}

impl<T> GateParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GateParams<U> {
        match self {
            GateParams::Linear { w, b } => GateParams::Linear { w: f(w), b: f(b) },
            GateParams::Mlp { w1, b1, w2, b2 } => GateParams::Mlp {
                w1: f(w1),
                b1: f(b1),
                w2: f(w2),
                b2: f(b2),
            },
            GateParams::AllHeads { w, b } => GateParams::AllHeads { w: f(w), b: f(b) },
        }
    }
}

impl<T> ParamTree<T> for GateParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Named<&'a T>>) {
        let mut push = |n: &str, kind, leaf| out.push(Named { name: join(prefix, n), kind, leaf });
        match self {
            GateParams::Linear { w, b } | GateParams::AllHeads { w, b } => {
                push("w", ParamKind::GateWeight, w);
                push("b", ParamKind::GateBias, b);
            }
            GateParams::Mlp { w1, b1, w2, b2 } => {
                push("w1", ParamKind::GateWeight, w1);
                push("b1", ParamKind::GateBias, b1);
                push("w2", ParamKind::GateWeight, w2);
                push("b2", ParamKind::GateBias, b2);
            }
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<Named<&'a mut T>>) {
        let mut push = |n: &str, kind, leaf| out.push(Named { name: join(prefix, n), kind, leaf });
        match self {
            GateParams::Linear { w, b } | GateParams::AllHeads { w, b } => {
                push("w", ParamKind::GateWeight, w);
                push("b", ParamKind::GateBias, b);
            }
            GateParams::Mlp { w1, b1, w2, b2 } => {
                push("w1", ParamKind::GateWeight, w1);
                push("b1", ParamKind::GateBias, b1);
                push("w2", ParamKind::GateWeight, w2);
                push("b2", ParamKind::GateBias, b2);
            }
        }
    }
}

impl GateParams<Tensor> {
    pub fn numel(&self) -> usize {
        self.flatten().iter().map(|n| n.leaf.numel()).sum()
    }
}

/// He-normal gate weights and output bias `b_init`.
///
/// The hidden bias of the MLP design starts at zero so the ReLU units are
/// not pushed into their dead region by a negative `b_init`.
pub fn init_gate<R: Rng + ?Sized>(
    cfg: &GatingConfig,
    n_heads: usize,
    d_head: usize,
    rng: &mut R,
) -> Result<GateParams<Tensor>> {
    cfg.validate()?;
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    Ok(match cfg.design {
        GateDesign::Linear => GateParams::Linear {
            w: Tensor::randn([n_heads, d_head, 1], he(d_head), rng),
            b: Tensor::full([n_heads, 1, 1], cfg.b_init),
        },
        GateDesign::Mlp { n_hid } => GateParams::Mlp {
            w1: Tensor::randn([n_heads, d_head, n_hid], he(d_head), rng),
            b1: Tensor::zeros([n_heads, 1, n_hid]),
            w2: Tensor::randn([n_heads, n_hid, 1], he(n_hid), rng),
            b2: Tensor::full([n_heads, 1, 1], cfg.b_init),
        },
        GateDesign::AllHeadsLinear => {
            let d_model = n_heads * d_head;
            GateParams::AllHeads {
                w: Tensor::randn([d_model, n_heads], he(d_model), rng),
                b: Tensor::full([n_heads], cfg.b_init),
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub gate: Option<GateParams<T>>,
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            o: self.o.map(f),
            gate: self.gate.as_ref().map(|g| g.map(f)),
        }
    }
}

impl<T> ParamTree<T> for AttentionParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Named<&'a T>>) {
        self.q.collect(&join(prefix, "q"), out);
        self.k.collect(&join(prefix, "k"), out);
        self.v.collect(&join(prefix, "v"), out);
        self.o.collect(&join(prefix, "o"), out);
        if let Some(g) = &self.gate {
            g.collect(&join(prefix, "gate"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<Named<&'a mut T>>) {
        self.q.collect_mut(&join(prefix, "q"), out);
        self.k.collect_mut(&join(prefix, "k"), out);
        self.v.collect_mut(&join(prefix, "v"), out);
        self.o.collect_mut(&join(prefix, "o"), out);
        if let Some(g) = &mut self.gate {
            g.collect_mut(&join(prefix, "gate"), out);
        }
    }
}

impl AttentionParams<Tensor> {
    /// Projections ~ `N(0, init_std²)` with zero biases; gate per [`init_gate`].
    pub fn init<R: Rng + ?Sized>(cfg: &AttentionConfig, init_std: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let q = Linear::init(d, d, init_std, rng);
        let k = Linear::init(d, d, init_std, rng);
        let v = Linear::init(d, d, init_std, rng);
        let o = Linear::init(d, d, init_std, rng);
        let gate = match &cfg.variant {
            AttentionVariant::Gated(g) => Some(init_gate(g, cfg.n_heads, cfg.d_head(), rng)?),
            _ => None,
        };
        Ok(AttentionParams { q, k, v, o, gate })
    }

    pub fn to_vars(&self, tape: &mut Tape) -> AttentionParams<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }
}

// ---- forward -------------------------------------------------------------

/// Attention mask. Positions flagged in `key_padding[b][t]` can be attended
/// by no query of sequence `b`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionMask {
    pub key_padding: Option<Vec<Vec<bool>>>,
}

/// Tape handles of everything the attention call produced.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[B, T, d_model]` after the output projection.
    pub out: Var,
    /// `[B, H, T, T]`.
    pub probs: Var,
    /// `[B, H, T, d_head]`.
    pub values: Var,
    /// `[B, H, T, d_head]`, probabilities times values before gating.
    pub pv: Var,
    /// `[B, H, T, 1]` gate probabilities (before `gate_scale`).
    pub gate: Option<Var>,
}

impl AttentionOutput {
    /// Copies out the pattern of one sequence of the batch.
    pub fn trace(&self, tape: &Tape, seq: usize) -> Result<AttentionTrace> {
        let pick = |v: Var| tape.value(v).index_first(seq);
        let gate = match self.gate {
            Some(g) => {
                let g = pick(g)?;
                let shape = g.shape()[..2].to_vec();
                Some(g.reshape(shape)?)
            }
            None => None,
        };
        Ok(AttentionTrace {
            probs: pick(self.probs)?,
            values: pick(self.values)?,
            pv: pick(self.pv)?,
            gate,
        })
    }
}

/// Splits `[B, T, H·dh]` into `[B, H, T, dh]`.
fn split_heads(tape: &mut Tape, x: Var, n_heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, &[b, t, n_heads, d / n_heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, h, t, dh) = (s[0], s[1], s[2], s[3]);
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[b, t, h * dh])
}

/// Gate probabilities `π = σ(G(x))` as `[B, H, T, 1]`, read from the
/// attention input `x: [B, T, d_model]`.
pub fn gate_forward(tape: &mut Tape, x: Var, n_heads: usize, params: &GateParams<Var>) -> Result<Var> {
    let logits = match params {
        GateParams::Linear { w, b } => {
            check_gate_shape(tape, *w, &[n_heads, usize::MAX, 1])?;
            let xh = split_heads(tape, x, n_heads)?;
            let l = tape.matmul(xh, *w)?;
            tape.add(l, *b)?
        }
        GateParams::Mlp { w1, b1, w2, b2 } => {
            check_gate_shape(tape, *w1, &[n_heads, usize::MAX, usize::MAX])?;
            let xh = split_heads(tape, x, n_heads)?;
            let h = tape.matmul(xh, *w1)?;
            let h = tape.add(h, *b1)?;
            let h = tape.relu(h);
            let l = tape.matmul(h, *w2)?;
            tape.add(l, *b2)?
        }
        GateParams::AllHeads { w, b } => {
            check_gate_shape(tape, *w, &[usize::MAX, n_heads])?;
            let s = tape.shape(x).to_vec();
            let lin = Linear { w: *w, b: *b };
            let l = lin.forward(tape, x)?;
            let l = tape.permute(l, &[0, 2, 1])?;
            tape.reshape(l, &[s[0], n_heads, s[1], 1])?
        }
    };
    Ok(tape.sigmoid(logits))
}

fn check_gate_shape(tape: &Tape, w: Var, expected: &[usize]) -> Result<()> {
    let s = tape.shape(w);
    let ok = s.len() == expected.len() && s.iter().zip(expected).all(|(&a, &e)| e == usize::MAX || a == e);
    if ok {
        Ok(())
    } else {
        Err(Error::config(
            "gating",
            format!("gate weight shape {s:?} does not fit {} heads", expected.iter().find(|&&e| e != usize::MAX && e != 1).unwrap_or(&0)),
        ))
    }
}

/// Multi-head self-attention over `x: [B, T, d_model]`.
pub fn attention_forward(
    tape: &mut Tape,
    x: Var,
    cfg: &AttentionConfig,
    params: &AttentionParams<Var>,
    mask: &AttentionMask,
    layer: usize,
    hook: &mut dyn ActivationHook,
) -> Result<AttentionOutput> {
    cfg.validate()?;
    let shape = tape.shape(x).to_vec();
    let [batch, seq, d_model] = shape[..] else {
        return Err(Error::Shape {
            op: "attention",
            detail: format!("input must be [B, T, d_model], got {shape:?}"),
        });
    };
    if d_model != cfg.d_model {
        return Err(Error::Dimension {
            op: "attention",
            lhs: shape.clone(),
            rhs: vec![cfg.d_model],
        });
    }
    let (h, dh) = (cfg.n_heads, cfg.d_head());
    let site = |kind| Site::layer(layer, kind);

    let q = params.q.forward(tape, x)?;
    let q = hook.visit(tape, site(SiteKind::Query), q)?;
    let k = params.k.forward(tape, x)?;
    let k = hook.visit(tape, site(SiteKind::Key), k)?;
    let v = params.v.forward(tape, x)?;
    let v = hook.visit(tape, site(SiteKind::Value), v)?;

    let qh = split_heads(tape, q, h)?;
    let kh = split_heads(tape, k, h)?;
    let vh = split_heads(tape, v, h)?;
    let kt = tape.transpose(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    if !tape.value(scores).all_finite() {
        return Err(Error::Numeric(format!("attention scores of layer {}", layer + 1)));
    }
    let scores = hook.visit(tape, site(SiteKind::Scores), scores)?;

    let masked = build_mask(batch, h, seq, cfg.causal, mask)?;
    let logits = match masked {
        Some(m) => tape.masked_fill(scores, &m, f64::NEG_INFINITY)?,
        None => scores,
    };
    let probs = match &cfg.variant {
        AttentionVariant::Clipped(c) => clipped_softmax(tape, logits, 3, c, seq)?,
        _ => tape.softmax(logits, 3)?,
    };
    let probs = hook.visit(tape, site(SiteKind::Probs), probs)?;
    let pv = tape.matmul(probs, vh)?;

    let (heads_out, gate) = match (&cfg.variant, &params.gate) {
        (AttentionVariant::Gated(g), Some(gp)) => {
            let pi = gate_forward(tape, x, h, gp)?;
            let pi = hook.visit(tape, site(SiteKind::GateProbs), pi)?;
            let scaled = if g.gate_scale == 1.0 { pi } else { tape.scale(pi, g.gate_scale) };
            (tape.mul(pv, scaled)?, Some(pi))
        }
        (AttentionVariant::Gated(_), None) => {
            return Err(Error::config("gating", "gated attention without gate parameters"));
        }
        (_, Some(_)) => {
            return Err(Error::config("gating", "gate parameters given to an ungated variant"));
        }
        (_, None) => (pv, None),
    };

    let ctx = merge_heads(tape, heads_out)?;
    let ctx = hook.visit(tape, site(SiteKind::Context), ctx)?;
    let out = params.o.forward(tape, ctx)?;
    let out = hook.visit(tape, site(SiteKind::AttnOutput), out)?;
    Ok(AttentionOutput {
        out,
        probs,
        values: vh,
        pv,
        gate,
    })
}

fn build_mask(batch: usize, heads: usize, seq: usize, causal: bool, mask: &AttentionMask) -> Result<Option<Vec<bool>>> {
    if let Some(pad) = &mask.key_padding {
        if pad.len() != batch || pad.iter().any(|row| row.len() != seq) {
            return Err(Error::Contract(format!("key padding mask does not conform to [{batch}, {seq}]")));
        }
    }
    if !causal && mask.key_padding.is_none() {
        return Ok(None);
    }
    let mut out = vec![false; batch * heads * seq * seq];
    for b in 0..batch {
        for hh in 0..heads {
            for i in 0..seq {
                for j in 0..seq {
                    let padded = mask.key_padding.as_ref().is_some_and(|p| p[b][j]);
                    out[((b * heads + hh) * seq + i) * seq + j] = padded || (causal && j > i);
                }
            }
        }
    }
    Ok(Some(out))
}

// ---- traces --------------------------------------------------------------

/// Attention pattern of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// `[H, T, T]`.
    pub probs: Tensor,
    /// `[H, T, d_head]`.
    pub values: Tensor,
    /// `[H, T, d_head]`.
    pub pv: Tensor,
    /// `[H, T]`.
    pub gate: Option<Tensor>,
}

impl AttentionTrace {
    pub fn n_heads(&self) -> usize {
        self.probs.shape()[0]
    }

    /// Long-format CSV (`matrix,row,col,value`) holding `P`, `V`, `PV` and,
    /// when gated, `pi` (as column 0) for one head.
    pub fn head_csv(&self, head: usize) -> Result<String> {
        if head >= self.n_heads() {
            return Err(Error::Contract(format!(
                "head {} out of range for {} heads",
                head + 1,
                self.n_heads()
            )));
        }
        let mut s = String::from("matrix,row,col,value\n");
        let mut emit = |name: &str, t: &Tensor| {
            let (rows, cols) = (t.shape()[0], t.shape().get(1).copied().unwrap_or(1));
            for r in 0..rows {
                for c in 0..cols {
                    let _ = writeln!(s, "{name},{r},{c},{}", t.data()[r * cols + c]);
                }
            }
        };
        emit("P", &self.probs.index_first(head)?);
        emit("V", &self.values.index_first(head)?);
        emit("PV", &self.pv.index_first(head)?);
        if let Some(g) = &self.gate {
            let pi = g.index_first(head)?;
            let n = pi.numel();
            emit("pi", &pi.reshape([n, 1])?);
        }
        Ok(s)
    }

    pub fn write_head_csv(&self, head: usize, path: &Path) -> Result<()> {
        let csv = self.head_csv(head)?;
        std::fs::write(path, csv).map_err(|e| Error::io(path, e))
    }
}
