//! Parameter trees that are generic over their leaf type.
//!
//! The same structure holds owned tensors ([`Tensor`]), tape handles
//! ([`Var`]) during a forward pass, and gradients or optimizer moments.
//! Every tree can be flattened into `(name, kind, leaf)` triples in a fixed
//! order, which is what checkpoints and the optimizer rely on.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var};

/// Role of a parameter, used for weight-decay and quantization decisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
    LnGamma,
    LnBeta,
    GateWeight,
    GateBias,
}

impl ParamKind {
    pub fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::Embedding => 2,
            ParamKind::LnGamma => 3,
            ParamKind::LnBeta => 4,
            ParamKind::GateWeight => 5,
            ParamKind::GateBias => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::Embedding,
            3 => ParamKind::LnGamma,
            4 => ParamKind::LnBeta,
            5 => ParamKind::GateWeight,
            6 => ParamKind::GateBias,
            _ => return None,
        })
    }

    /// Weight matrices (including embeddings and gate weights).
    pub fn is_matrix(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Embedding | ParamKind::GateWeight)
    }
}

/// A flattened view entry.
pub struct Named<L> {
    pub name: String,
    pub kind: ParamKind,
    pub leaf: L,
}

/// Tree traversal shared by all parameter containers.
pub trait ParamTree<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Named<&'a T>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<Named<&'a mut T>>);

    fn flatten(&self) -> Vec<Named<&T>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn flatten_mut(&mut self) -> Vec<Named<&mut T>> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear { w: f(&self.w), b: f(&self.b) }
    }
}

impl<T> ParamTree<T> for Linear<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Named<&'a T>>) {
        out.push(Named { name: join(prefix, "w"), kind: ParamKind::Weight, leaf: &self.w });
        out.push(Named { name: join(prefix, "b"), kind: ParamKind::Bias, leaf: &self.b });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<Named<&'a mut T>>) {
        out.push(Named { name: join(prefix, "w"), kind: ParamKind::Weight, leaf: &mut self.w });
        out.push(Named { name: join(prefix, "b"), kind: ParamKind::Bias, leaf: &mut self.b });
    }
}

impl Linear<Tensor> {
    pub fn init<R: rand::Rng + ?Sized>(d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            w: Tensor::randn([d_in, d_out], std, rng),
            b: Tensor::zeros([d_out]),
        }
    }
}

impl Linear<Var> {
    /// Applies the layer to `[.., in]`, returning `[.., out]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> crate::Result<Var> {
        let shape = tape.shape(x).to_vec();
        let d_in = *shape.last().unwrap_or(&0);
        let rows = shape.iter().product::<usize>() / d_in.max(1);
        let x2 = tape.reshape(x, &[rows, d_in])?;
        let y = tape.matmul(x2, self.w)?;
        let y = tape.add(y, self.b)?;
        let d_out = tape.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d_out;
        tape.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<T> {
    pub gamma: T,
    pub beta: T,
}

impl<T> LayerNorm<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerNorm<U> {
        LayerNorm { gamma: f(&self.gamma), beta: f(&self.beta) }
    }
}

impl<T> ParamTree<T> for LayerNorm<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Named<&'a T>>) {
        out.push(Named { name: join(prefix, "gamma"), kind: ParamKind::LnGamma, leaf: &self.gamma });
        out.push(Named { name: join(prefix, "beta"), kind: ParamKind::LnBeta, leaf: &self.beta });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<Named<&'a mut T>>) {
        out.push(Named { name: join(prefix, "gamma"), kind: ParamKind::LnGamma, leaf: &mut self.gamma });
        out.push(Named { name: join(prefix, "beta"), kind: ParamKind::LnBeta, leaf: &mut self.beta });
    }
}

impl LayerNorm<Tensor> {
    pub fn init(d: usize) -> Self {
        LayerNorm { gamma: Tensor::ones([d]), beta: Tensor::zeros([d]) }
    }
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> crate::Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta, LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_flattens_in_fixed_order() {
        let l = Linear { w: 1, b: 2 };
        let flat = l.flatten();
        let names: Vec<_> = flat.iter().map(|n| (n.name.as_str(), n.kind, *n.leaf)).collect();
        assert_eq!(names, vec![("w", ParamKind::Weight, 1), ("b", ParamKind::Bias, 2)]);
        let mut ln = LayerNorm { gamma: 0, beta: 0 };
        let mut nested = Vec::new();
        ln.collect_mut("block", &mut nested);
        assert_eq!(nested[0].name, "block.gamma");
    }

    #[test]
    fn kind_codes_round_trip() {
        for k in [
            ParamKind::Weight,
            ParamKind::Bias,
            ParamKind::Embedding,
            ParamKind::LnGamma,
            ParamKind::LnBeta,
            ParamKind::GateWeight,
            ParamKind::GateBias,
        ] {
            assert_eq!(ParamKind::from_code(k.code()), Some(k));
        }
        assert_eq!(ParamKind::from_code(99), None);
    }
}
