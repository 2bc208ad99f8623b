//! Encoder-style transformer language model.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, AttentionConfig, AttentionMask, AttentionOutput, AttentionParams, AttentionVariant};
use crate::error::{Error, Result};
use crate::params::{join, LayerNorm, Linear, Named, ParamKind, ParamTree};
use crate::sites::{ActivationHook, Site, SiteKind};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnPlacement {
    /// LayerNorm before each sublayer, inside the residual branch.
    PreLn,
    /// LayerNorm after each residual addition (BERT).
    PostLn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    Mlm { mask_prob: f64 },
    Clm,
}

/// Which tensor counts as "the attention layer output" for outlier metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurePoint {
    /// Residual stream right after the attention sublayer is added.
    #[default]
    PostResidual,
    /// Attention sublayer output before the residual addition.
    PreResidual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub attention: AttentionVariant,
    pub ln_placement: LnPlacement,
    #[serde(default)]
    pub dropout_p: f64,
    pub objective: Objective,
    /// Standard deviation of the normal init for embeddings and linears.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub measure_point: MeasurePoint,
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            variant: self.attention,
            causal: matches!(self.objective, Objective::Clm),
        }
    }

    pub fn d_head(&self) -> usize {
        self.attention_config().d_head()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.vocab_size", self.vocab_size),
            ("model.max_seq_len", self.max_seq_len),
            ("model.n_layers", self.n_layers),
            ("model.d_model", self.d_model),
            ("model.n_heads", self.n_heads),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.d_ffn < self.d_model {
            return Err(Error::config("model.d_ffn", format!("must be >= d_model ({})", self.d_model)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("model.dropout_p", "must lie in [0, 1)"));
        }
        if let Objective::Mlm { mask_prob } = self.objective {
            if !(mask_prob > 0.0 && mask_prob < 1.0) {
                return Err(Error::config("model.objective.mask_prob", "must lie in (0, 1)"));
            }
        }
        if !(self.init_std > 0.0) || !self.init_std.is_finite() {
            return Err(Error::config("model.init_std", "must be > 0"));
        }
        self.attention_config().validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::config(format!("model.attention.{field}"), reason),
            other => other,
        })
    }
}

// ---- parameters ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams<T> {
    pub attn: AttentionParams<T>,
    pub ln_attn: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ln_ffn: LayerNorm<T>,
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            attn: self.attn.map(f),
            ln_attn: self.ln_attn.map(f),
            ffn_in: self.ffn_in.map(f),
            ffn_out: self.ffn_out.map(f),
            ln_ffn: self.ln_ffn.map(f),
        }
    }
}

impl<T> ParamTree<T> for BlockParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Named<&'a T>>) {
        self.attn.collect(&join(prefix, "attn"), out);
        self.ln_attn.collect(&join(prefix, "ln_attn"), out);
        self.ffn_in.collect(&join(prefix, "ffn_in"), out);
        self.ffn_out.collect(&join(prefix, "ffn_out"), out);
        self.ln_ffn.collect(&join(prefix, "ln_ffn"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<Named<&'a mut T>>) {
        self.attn.collect_mut(&join(prefix, "attn"), out);
        self.ln_attn.collect_mut(&join(prefix, "ln_attn"), out);
        self.ffn_in.collect_mut(&join(prefix, "ffn_in"), out);
        self.ffn_out.collect_mut(&join(prefix, "ffn_out"), out);
        self.ln_ffn.collect_mut(&join(prefix, "ln_ffn"), out);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    /// `[vocab, d_model]`.
    pub tok_emb: T,
    /// `[max_seq_len, d_model]`, learned absolute positions.
    pub pos_emb: T,
    /// Post-LN models normalize the embedding sum.
    pub emb_ln: Option<LayerNorm<T>>,
    pub blocks: Vec<BlockParams<T>>,
    /// Pre-LN models normalize before the LM head.
    pub final_ln: Option<LayerNorm<T>>,
    /// `[d_model, vocab]`.
    pub head: Linear<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            emb_ln: self.emb_ln.as_ref().map(|l| l.map(f)),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            final_ln: self.final_ln.as_ref().map(|l| l.map(f)),
            head: self.head.map(f),
        }
    }
}

/// Name prefix of the LM head (exempt from quantization).
pub const HEAD_PREFIX: &str = "head";

impl<T> ParamTree<T> for ModelParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Named<&'a T>>) {
        out.push(Named { name: join(prefix, "tok_emb"), kind: ParamKind::Embedding, leaf: &self.tok_emb });
        out.push(Named { name: join(prefix, "pos_emb"), kind: ParamKind::Embedding, leaf: &self.pos_emb });
        if let Some(l) = &self.emb_ln {
            l.collect(&join(prefix, "emb_ln"), out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("blocks.{i}")), out);
        }
        if let Some(l) = &self.final_ln {
            l.collect(&join(prefix, "final_ln"), out);
        }
        self.head.collect(&join(prefix, HEAD_PREFIX), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<Named<&'a mut T>>) {
        out.push(Named { name: join(prefix, "tok_emb"), kind: ParamKind::Embedding, leaf: &mut self.tok_emb });
        out.push(Named { name: join(prefix, "pos_emb"), kind: ParamKind::Embedding, leaf: &mut self.pos_emb });
        if let Some(l) = &mut self.emb_ln {
            l.collect_mut(&join(prefix, "emb_ln"), out);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        if let Some(l) = &mut self.final_ln {
            l.collect_mut(&join(prefix, "final_ln"), out);
        }
        self.head.collect_mut(&join(prefix, HEAD_PREFIX), out);
    }
}

impl ModelParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, std) = (cfg.d_model, cfg.init_std);
        let tok_emb = Tensor::randn([cfg.vocab_size, d], std, rng);
        let pos_emb = Tensor::randn([cfg.max_seq_len, d], std, rng);
        let attn_cfg = cfg.attention_config();
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(BlockParams {
                attn: AttentionParams::init(&attn_cfg, std, rng)?,
                ln_attn: LayerNorm::init(d),
                ffn_in: Linear::init(d, cfg.d_ffn, std, rng),
                ffn_out: Linear::init(cfg.d_ffn, d, std, rng),
                ln_ffn: LayerNorm::init(d),
            });
        }
        let head = Linear::init(d, cfg.vocab_size, std, rng);
        let (emb_ln, final_ln) = match cfg.ln_placement {
            LnPlacement::PostLn => (Some(LayerNorm::init(d)), None),
            LnPlacement::PreLn => (None, Some(LayerNorm::init(d))),
        };
        Ok(ModelParams {
            tok_emb,
            pos_emb,
            emb_ln,
            blocks,
            final_ln,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.flatten().iter().map(|n| n.leaf.numel()).sum()
    }

    pub fn to_vars(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |t| Tensor::zeros(t.shape().to_vec()))
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|n| n.leaf.all_finite())
    }
}

// ---- forward -------------------------------------------------------------

/// Inverted dropout driven by an explicit RNG.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut dyn RngCore,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }
}

/// Per-layer tensors exposed by the forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerActivations {
    /// `[B, T, d]`, the tensor outlier metrics are computed on.
    pub attn_out: Var,
    /// `[B, T, d]`, FFN output before its residual addition.
    pub ffn_out: Var,
    pub attention: AttentionOutput,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B·T, vocab]`.
    pub logits: Var,
    pub layers: Vec<LayerActivations>,
}

/// Forward pass over a batch of equal-length token sequences.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    tokens: &[Vec<usize>],
    mask: &AttentionMask,
    hook: &mut dyn ActivationHook,
    mut dropout: Option<Dropout<'_>>,
) -> Result<ForwardOutput> {
    let batch = tokens.len();
    let seq = tokens.first().map_or(0, Vec::len);
    if batch == 0 || seq == 0 || tokens.iter().any(|t| t.len() != seq) {
        return Err(Error::Contract("forward needs a non-empty batch of equal-length sequences".into()));
    }
    if seq > cfg.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let d = cfg.d_model;
    let attn_cfg = cfg.attention_config();
    let mut maybe_drop = |tape: &mut Tape, x: Var| match dropout.as_mut() {
        Some(dr) => dr.apply(tape, x),
        None => Ok(x),
    };

    let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
    let tok = tape.embedding(params.tok_emb, &ids)?;
    let tok = tape.reshape(tok, &[batch, seq, d])?;
    let positions: Vec<usize> = (0..seq).collect();
    let pos = tape.embedding(params.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;
    if let Some(ln) = &params.emb_ln {
        x = ln.forward(tape, x)?;
    }
    x = maybe_drop(tape, x)?;
    x = hook.visit(tape, Site::model(SiteKind::Embedding), x)?;

    let mut layers = Vec::with_capacity(params.blocks.len());
    for (l, block) in params.blocks.iter().enumerate() {
        let site = |kind| Site::layer(l, kind);
        let (attn, attn_res, ffn_out, next) = match cfg.ln_placement {
            LnPlacement::PostLn => {
                let attn = attention_forward(tape, x, &attn_cfg, &block.attn, mask, l, hook)?;
                let a = maybe_drop(tape, attn.out)?;
                let r = tape.add(x, a)?;
                let r = hook.visit(tape, site(SiteKind::AttnResidual), r)?;
                let n = block.ln_attn.forward(tape, r)?;
                let n = hook.visit(tape, site(SiteKind::AttnNorm), n)?;
                let f = ffn(tape, block, n, l, hook)?;
                let f = maybe_drop(tape, f)?;
                let r2 = tape.add(n, f)?;
                let r2 = hook.visit(tape, site(SiteKind::FfnResidual), r2)?;
                let out = block.ln_ffn.forward(tape, r2)?;
                let out = hook.visit(tape, site(SiteKind::FfnNorm), out)?;
                (attn, r, f, out)
            }
            LnPlacement::PreLn => {
                let n = block.ln_attn.forward(tape, x)?;
                let n = hook.visit(tape, site(SiteKind::AttnNorm), n)?;
                let attn = attention_forward(tape, n, &attn_cfg, &block.attn, mask, l, hook)?;
                let a = maybe_drop(tape, attn.out)?;
                let r = tape.add(x, a)?;
                let r = hook.visit(tape, site(SiteKind::AttnResidual), r)?;
                let n2 = block.ln_ffn.forward(tape, r)?;
                let n2 = hook.visit(tape, site(SiteKind::FfnNorm), n2)?;
                let f = ffn(tape, block, n2, l, hook)?;
                let f = maybe_drop(tape, f)?;
                let r2 = tape.add(r, f)?;
                let r2 = hook.visit(tape, site(SiteKind::FfnResidual), r2)?;
                (attn, r, f, r2)
            }
        };
        let measured = match cfg.measure_point {
            MeasurePoint::PostResidual => attn_res,
            MeasurePoint::PreResidual => attn.out,
        };
        layers.push(LayerActivations {
            attn_out: measured,
            ffn_out,
            attention: attn,
        });
        x = next;
    }

    if let Some(ln) = &params.final_ln {
        x = ln.forward(tape, x)?;
        x = hook.visit(tape, Site::model(SiteKind::FinalNorm), x)?;
    }
    let logits = params.head.forward(tape, x)?;
    let logits = tape.reshape(logits, &[batch * seq, cfg.vocab_size])?;
    if !tape.value(logits).all_finite() {
        return Err(Error::Numeric("logits".into()));
    }
    Ok(ForwardOutput { logits, layers })
}

fn ffn(tape: &mut Tape, block: &BlockParams<Var>, x: Var, layer: usize, hook: &mut dyn ActivationHook) -> Result<Var> {
    let site = |kind| Site::layer(layer, kind);
    let h = block.ffn_in.forward(tape, x)?;
    let h = hook.visit(tape, site(SiteKind::FfnHidden), h)?;
    let g = tape.gelu(h);
    let g = hook.visit(tape, site(SiteKind::FfnAct), g)?;
    let f = block.ffn_out.forward(tape, g)?;
    hook.visit(tape, site(SiteKind::FfnOutput), f)
}

/// Mean cross-entropy over supervised positions (`None` = ignored).
pub fn loss(tape: &mut Tape, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

/// Next-token targets: position `t` predicts `tokens[t + 1]`.
pub fn clm_targets(tokens: &[usize]) -> Vec<Option<usize>> {
    tokens
        .iter()
        .skip(1)
        .map(|&t| Some(t))
        .chain(std::iter::once(None))
        .collect()
}

pub fn perplexity(loss: f64) -> f64 {
    loss.exp()
}

/// `coefficient · Σ_layers mean(f²)` over the FFN outputs.
pub fn activation_regularizer(tape: &mut Tape, ffn_outputs: &[Var], coefficient: f64) -> Result<Var> {
    if !(coefficient >= 0.0) {
        return Err(Error::config("train.act_reg_coefficient", "must be >= 0"));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    if coefficient == 0.0 {
        return Ok(total);
    }
    for &f in ffn_outputs {
        let sq = tape.mul(f, f)?;
        let m = tape.mean(sq);
        total = tape.add(total, m)?;
    }
    Ok(tape.scale(total, coefficient))
}

/// Token inputs with per-position targets (`None` = not supervised).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    /// Flattened row-major over `inputs`.
    pub targets: Vec<Option<usize>>,
}

impl Batch {
    pub fn n_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

impl ModelParams<Tensor> {
    /// Leaves as tape constants, for gradient-free evaluation.
    pub fn to_constants(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |t| tape.constant(t.clone()))
    }
}

/// Target-weighted mean NLL over `batches`.
pub fn eval_loss(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    batches: &[Batch],
    hook: &mut dyn ActivationHook,
) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for batch in batches {
        let mut tape = Tape::new();
        let pv = params.to_constants(&mut tape);
        let out = forward(&mut tape, &pv, cfg, &batch.inputs, &AttentionMask::default(), hook, None)?;
        let l = loss(&mut tape, out.logits, &batch.targets)?;
        let n = batch.n_targets();
        total += tape.value(l).item()? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Contract("evaluation set has no supervised positions".into()));
    }
    Ok(total / count as f64)
}
