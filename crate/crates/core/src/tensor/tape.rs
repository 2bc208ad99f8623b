use super::kernels::{self, axis_split, broadcast_offsets, gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Offset { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    Gelu { a: Var },
    Softmax { a: Var, axis: usize },
    Clip { a: Var, lo: f64, hi: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum { a: Var },
    Mean { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    MaskedFill { a: Var, mask: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Wengert list of primitive operations.
///
/// Nodes are appended in evaluation order, so every parent id is smaller
/// than its children's and a single reverse sweep is a valid topological
/// traversal.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, data: Vec<f64>, op: Op) -> Var {
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor { shape, data }, rg, op)
    }

    // ---- structural ------------------------------------------------------

    /// Batched matrix product `[.., m, k] · [.., k, n]`.
    ///
    /// The batch extents of `b` must equal a trailing suffix of those of
    /// `a` (a plain 2-D `b` is shared by every batch entry of `a`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let geom = MatmulGeometry::new(&sa, &sb)?;
        let mut out = vec![0.0; geom.batch_a * geom.m * geom.n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..geom.batch_a {
            let bj = bi % geom.batch_b;
            gemm_acc(
                &da[bi * geom.m * geom.k..(bi + 1) * geom.m * geom.k],
                &db[bj * geom.k * geom.n..(bj + 1) * geom.k * geom.n],
                &mut out[bi * geom.m * geom.n..(bi + 1) * geom.m * geom.n],
                geom.m,
                geom.k,
                geom.n,
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(geom.n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, rg, Op::MatMul { a, b }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::Shape {
                op: "transpose",
                detail: format!("rank {rank} < 2"),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::Shape {
                op: "permute",
                detail: format!("axes {axes:?} do not permute rank {}", shape.len()),
            });
        }
        let (data, out_shape) = kernels::permute(self.value(a).data(), &shape, axes);
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor { shape: out_shape, data },
            rg,
            Op::Permute { a, axes: axes.to_vec() },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(a).data().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            rg,
            Op::Reshape { a },
        ))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let [vocab, d] = shape[..] else {
            return Err(Error::Shape {
                op: "embedding",
                detail: format!("table must be 2-D, got {shape:?}"),
            });
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!("token id {bad} >= vocab size {vocab}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Replaces masked entries by `value`; masked entries pass no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::Dimension {
                op: "masked_fill",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        Ok(self.unary(a, data, Op::MaskedFill { a, mask: mask.to_vec() }))
    }

    // ---- elementwise -----------------------------------------------------

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sb.len() <= sa.len()
            && sb
                .iter()
                .rev()
                .zip(sa.iter().rev())
                .all(|(&y, &x)| y == x || y == 1);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    /// `a + b`, with `b` broadcast into the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect()
        } else {
            let offs = broadcast_offsets(va.shape(), vb.shape());
            va.data().iter().zip(offs).map(|(x, o)| x + vb.data()[o]).collect()
        };
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, rg, Op::Add { a, b }))
    }

    /// `a ⊙ b`, with `b` broadcast into the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect()
        } else {
            let offs = broadcast_offsets(va.shape(), vb.shape());
            va.data().iter().zip(offs).map(|(x, o)| x * vb.data()[o]).collect()
        };
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, rg, Op::Mul { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        self.unary(a, data, Op::Scale { a, c })
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        self.unary(a, data, Op::Offset { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        self.unary(a, data, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        self.unary(a, data, Op::Relu { a })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| kernels::gelu(x).0).collect();
        self.unary(a, data, Op::Gelu { a })
    }

    /// `clip(a, lo, hi)`; entries at or beyond a bound pass no gradient.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.clamp(lo, hi)).collect();
        self.unary(a, data, Op::Clip { a, lo, hi })
    }

    /// Softmax along `axis`, computed with max-subtraction.
    ///
    /// `-inf` entries are allowed (masked logits) as long as every lane
    /// keeps at least one finite entry; NaN and `+inf` are rejected.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                detail: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let x = self.value(a).data();
        if x.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numeric("softmax input".into()));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                if (0..len).all(|j| x[base + j * inner] == f64::NEG_INFINITY) {
                    return Err(Error::Numeric("softmax lane with every entry masked".into()));
                }
                kernels::softmax_lane(x, &mut out, base, len, inner);
            }
        }
        Ok(self.unary(a, out, Op::Softmax { a, axis }))
    }

    /// Layer normalization over the last axis followed by `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape {
            op: "layer_norm",
            detail: "scalar input".into(),
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor { shape, data: out },
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / v.numel() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(m), rg, Op::Mean { a })
    }

    /// Mean cross-entropy of `[n, vocab]` logits over the supervised rows.
    ///
    /// `None` targets are ignored; at least one row must be supervised.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [n, vocab] = shape[..] else {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("logits must be 2-D, got {shape:?}"),
            });
        };
        if targets.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy: every position is ignored".into()));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::Contract(format!("target {t} >= vocab size {vocab}")));
            }
            kernels::softmax_lane(x, &mut probs, r * vocab, vocab, 1);
            let row = &x[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, overwriting any previous grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.shape(loss).to_vec();
        self.grads[loss.0] = Some(Tensor::ones(seed_shape));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            self.backprop_node(id, g.data());
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&mut self, id: usize, g: &[f64]) {
        // Ops borrow `self.nodes[id]` immutably while writing parent grads,
        // so the op is moved out for the duration of the call.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let geom = MatmulGeometry::new(self.shape(*a), self.shape(*b)).expect("checked in forward");
                let (m, k, n) = (geom.m, geom.k, geom.n);
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    self.accumulate(*a, |ga| {
                        for bi in 0..geom.batch_a {
                            let bj = bi % geom.batch_b;
                            gemm_nt_acc(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bv[bj * k * n..(bj + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    });
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data().to_vec();
                    self.accumulate(*b, |gb| {
                        for bi in 0..geom.batch_a {
                            let bj = bi % geom.batch_b;
                            gemm_tn_acc(
                                &av[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bj * k * n..(bj + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, |ga| add_into(ga, g));
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                self.accumulate(*b, |gb| {
                    if sa == sb {
                        add_into(gb, g);
                    } else {
                        for (gv, o) in g.iter().zip(broadcast_offsets(&sa, &sb)) {
                            gb[o] += gv;
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let same = sa == sb;
                let offs = if same { Vec::new() } else { broadcast_offsets(&sa, &sb) };
                let bidx = |i: usize| if same { i } else { offs[i] };
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    self.accumulate(*a, |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[bidx(i)];
                        }
                    });
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data().to_vec();
                    self.accumulate(*b, |gb| {
                        for i in 0..g.len() {
                            gb[bidx(i)] += g[i] * av[i];
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accumulate(*a, |ga| {
                    for (x, gv) in ga.iter_mut().zip(g) {
                        *x += c * gv;
                    }
                });
            }
            Op::Offset { a } | Op::Reshape { a } => self.accumulate(*a, |ga| add_into(ga, g)),
            Op::Sigmoid { a } => {
                let y = self.nodes[id].value.data().to_vec();
                self.accumulate(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Relu { a } => {
                let x = self.nodes[a.0].value.data().to_vec();
                self.accumulate(*a, |ga| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let x = self.nodes[a.0].value.data().to_vec();
                self.accumulate(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * kernels::gelu(x[i]).1;
                    }
                });
            }
            Op::Clip { a, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let x = self.nodes[a.0].value.data().to_vec();
                self.accumulate(*a, |ga| {
                    for i in 0..g.len() {
                        if x[i] > lo && x[i] < hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let y = self.nodes[id].value.data().to_vec();
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                self.accumulate(*a, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                ga[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *self.shape(*x).last().unwrap();
                let rows = xhat.len() / d;
                let gv = self.nodes[gamma.0].value.data().to_vec();
                self.accumulate(*gamma, |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.accumulate(*beta, |gb| {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                });
                self.accumulate(*x, |gx| {
                    let inv_d = 1.0 / d as f64;
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            gx[r * d + j] += rstd[r] * (dh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
                        }
                    }
                });
            }
            Op::Sum { a } => {
                let s = g[0];
                self.accumulate(*a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::Mean { a } => {
                let s = g[0] / self.nodes[a.0].value.numel() as f64;
                self.accumulate(*a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::Permute { a, axes } => {
                let inv = kernels::inverse_permutation(axes);
                let out_shape = self.nodes[id].value.shape().to_vec();
                let (back, _) = kernels::permute(g, &out_shape, &inv);
                self.accumulate(*a, |ga| add_into(ga, &back));
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                self.accumulate(*table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::MaskedFill { a, mask } => {
                self.accumulate(*a, |ga| {
                    for i in 0..g.len() {
                        if !mask[i] {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = self.shape(*logits)[1];
                let s = g[0] / *count as f64;
                self.accumulate(*logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..vocab {
                            gl[r * vocab + j] += s * probs[r * vocab + j];
                        }
                        gl[r * vocab + t] -= s;
                    }
                });
            }
        }
        self.nodes[id].op = op;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Logistic sigmoid, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct MatmulGeometry {
    batch_a: usize,
    batch_b: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl MatmulGeometry {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 || sb.len() > sa.len() {
            return Err(mismatch());
        }
        let (a_batch, a_mat) = sa.split_at(sa.len() - 2);
        let (b_batch, b_mat) = sb.split_at(sb.len() - 2);
        if a_mat[1] != b_mat[0] || !a_batch.ends_with(b_batch) {
            return Err(mismatch());
        }
        Ok(MatmulGeometry {
            batch_a: a_batch.iter().product(),
            batch_b: b_batch.iter().product(),
            m: a_mat[0],
            k: a_mat[1],
            n: b_mat[1],
        })
    }
}
