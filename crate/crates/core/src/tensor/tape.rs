//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op computes its
//! value eagerly and appends a node; nodes only ever reference earlier nodes,
//! so the node list is already in topological order and [`Tape::backward`]
//! simply walks it in reverse.

use std::collections::HashMap;

use super::kernels;
use super::params::{ParamGrads, ParamId, ParamStore};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Names of the recorded op kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    AddBroadcast,
    Mul,
    Scale,
    Permute,
    Reshape,
    Concat,
    Roll,
    IndexSelect,
    Softmax,
    LayerNorm,
    Gelu,
    Sigmoid,
    MeanAxis,
    MeanAll,
    SumAll,
    BceWithLogits,
}

impl std::str::FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "batch_matmul" => OpKind::BatchMatMul,
            "add" => OpKind::Add,
            "add_broadcast" => OpKind::AddBroadcast,
            "mul" => OpKind::Mul,
            "scale" => OpKind::Scale,
            "permute" => OpKind::Permute,
            "reshape" => OpKind::Reshape,
            "concat" => OpKind::Concat,
            "roll" => OpKind::Roll,
            "index_select" => OpKind::IndexSelect,
            "softmax" => OpKind::Softmax,
            "layer_norm" => OpKind::LayerNorm,
            "gelu" => OpKind::Gelu,
            "sigmoid" => OpKind::Sigmoid,
            "mean_axis" => OpKind::MeanAxis,
            "mean_all" => OpKind::MeanAll,
            "sum_all" => OpKind::SumAll,
            "bce_with_logits" => OpKind::BceWithLogits,
            other => return Err(format!("unknown op kind {other:?}")),
        })
    }
}

/// How the second operand of a broadcast add is indexed.
#[derive(Debug, Clone)]
enum Broadcast {
    /// The operand repeats contiguously over the output.
    Repeat,
    /// Operand offset for every output element.
    Map(Vec<usize>),
}

enum Op<T: Element> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var, index: Broadcast },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    Concat { parts: Vec<Var> },
    Roll { x: Var, sources: Vec<usize> },
    IndexSelect { x: Var, indices: Vec<usize> },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, normalized: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    Sigmoid { x: Var },
    MeanAxis { x: Var, axis: usize },
    MeanAll { x: Var },
    SumAll { x: Var },
    BceWithLogits { logits: Var, targets: Vec<T> },
}

impl<T: Element> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Add { .. } => OpKind::Add,
            Op::AddBroadcast { .. } => OpKind::AddBroadcast,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Roll { .. } => OpKind::Roll,
            Op::IndexSelect { .. } => OpKind::IndexSelect,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::MeanAll { .. } => OpKind::MeanAll,
            Op::SumAll { .. } => OpKind::SumAll,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
        }
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
    corruption: Option<(OpKind, T)>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
            corruption: None,
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Test hook: multiplies every input gradient produced by ops of `kind`
    /// by `factor`, so gradient checks can be shown to catch a wrong rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind, factor: f64) {
        self.corruption = Some((kind, T::from_f64(factor)));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter; repeated calls with the same id return
    /// the same node so gradients from every use accumulate there.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.bound.insert(id, v);
        v
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Matrix product over matching leading (batch) axes:
    /// `[.., m, k] x [.., k, n] -> [.., m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, batch, m, k, n }, &[a, b]))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// `a + b` where `b` has the rank of `a` and every axis of `b` is either
    /// 1 (broadcast) or equal to the matching axis of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (data, index) = match kernels::suffix_broadcast(self.shape(a), self.shape(b)) {
            Some(_) => {
                let data = va.chunks(vb.len()).flat_map(|c| c.iter().zip(vb).map(|(&x, &y)| x + y)).collect();
                (data, Broadcast::Repeat)
            }
            None => {
                let map = kernels::broadcast_map(self.shape(a), self.shape(b))?;
                (va.iter().zip(&map).map(|(&x, &j)| x + vb[j]).collect(), Broadcast::Map(map))
            }
        };
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::AddBroadcast { a, b, index }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::from_f64(factor);
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    /// Exact GELU, `x * Phi(x)` with `Phi` the standard normal CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu { x }, &[x])
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        Ok(self.push(value, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r} < 2")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Concatenation along the last axis; all leading axes must agree.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput("concat_lastdim"))?;
        let lead = self.shape(*first).split_last().map(|(_, l)| l.to_vec());
        let lead = lead.ok_or_else(|| Error::shape("concat_lastdim", "scalar input"))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape(
                    "concat_lastdim",
                    format!("{:?} vs {:?}", self.shape(*first), s),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Torus roll: `out[.., (i + shift) mod n, ..] = x[.., i, ..]` on each
    /// listed axis.
    pub fn roll(&mut self, x: Var, axes: &[usize], shift: isize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::shape("roll", format!("axes {axes:?} for {shape:?}")));
        }
        let sources = kernels::roll_sources(&shape, axes, shift);
        let src = self.value(x).data();
        let data = sources.iter().map(|&s| src[s]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Roll { x, sources }, &[x]))
    }

    /// Rows of `x` (axis 0) picked by `indices`, repeats allowed.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::shape("index_select", "scalar input"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("index_select", format!("index {bad} >= {rows} rows")));
        }
        let width: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::IndexSelect { x, indices: indices.to_vec() }, &[x]))
    }

    // ---- normalization and reductions -----------------------------------

    /// Softmax over the last axis. `-inf` entries map to exactly 0; a row
    /// that is entirely `-inf` is an error.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len());
        for (r, row) in src.chunks(n).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(Error::DegenerateRow { row: r });
            }
            let start = data.len();
            let mut sum = T::zero();
            for &v in row {
                let e = if v == T::neg_infinity() { T::zero() } else { (v - max).exp() };
                sum = sum + e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e = *e / sum;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Per-row `(x - mean) / sqrt(var + eps)` over the last axis (population
    /// variance), followed by `gamma * y + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {shape:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut normalized = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let y = (v - mean) * rs;
                normalized.push(y);
                out.push(g[j] * y + b[j]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm { x, gamma, beta, normalized, rstd },
            &[x, gamma, beta],
        ))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("mean_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = kernels::split_at_axis(&shape, axis);
        let inv = T::one() / T::from_f64(n as f64);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        for v in &mut data {
            *v = *v * inv;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::MeanAxis { x, axis }, &[x]))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mean = kernels::compensated_sum(v.data().iter().copied()) / T::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(mean), Op::MeanAll { x }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let sum = kernels::compensated_sum(self.value(x).data().iter().copied());
        self.push(Tensor::scalar(sum), Op::SumAll { x }, &[x])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against binary
    /// `targets`, using `max(z,0) - z*y + ln(1 + exp(-|z|))` per element.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs targets {:?}", self.shape(logits), targets.shape()),
            ));
        }
        if targets.data().iter().any(|&y| y != T::zero() && y != T::one()) {
            return Err(Error::invalid("bce_with_logits", "targets must be 0 or 1"));
        }
        let z = self.value(logits).data();
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("bce_with_logits: logit {i} is {}", z[i])));
        }
        let count = T::from_f64(z.len() as f64);
        let total = kernels::compensated_sum(
            z.iter()
                .zip(targets.data())
                .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()),
        );
        let value = Tensor::scalar(total / count);
        Ok(self.push(
            value,
            Op::BceWithLogits { logits, targets: targets.data().to_vec() },
            &[logits],
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    // ---- backward -------------------------------------------------------

    /// Gradient of the scalar `loss` with respect to every node that
    /// requires gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !self.requires_grad(loss) {
            return Err(Error::NotConnected);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut contributions = self.backward_rule(node, &g);
            if let Some((kind, factor)) = self.corruption {
                if kind == node.op.kind() {
                    for (_, t) in &mut contributions {
                        for v in t.data_mut() {
                            *v = *v * factor;
                        }
                    }
                }
            }
            for (input, contribution) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            bound: self.bound.clone(),
        })
    }

    fn backward_rule(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<T>| Tensor {
            shape: self.shape(v).to_vec(),
            data,
        };
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, false, self.value(b).data(), true, &mut da, false);
                    out.push((a, like(a, da)));
                }
                if needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(a).data(), true, gd, false, &mut db, false);
                    out.push((b, like(b, db)));
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if needs(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &vb[i * k * n..(i + 1) * k * n],
                            true,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    out.push((a, like(a, da)));
                }
                if needs(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            &va[i * m * k..(i + 1) * m * k],
                            true,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &mut db[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    out.push((b, like(b, db)));
                }
            }
            &Op::Add { a, b } => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            Op::AddBroadcast { a, b, index } => {
                out.push((*a, g.clone()));
                if needs(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![T::zero(); n];
                    match index {
                        Broadcast::Repeat => {
                            for chunk in gd.chunks(n) {
                                for (d, &v) in db.iter_mut().zip(chunk) {
                                    *d = *d + v;
                                }
                            }
                        }
                        Broadcast::Map(map) => {
                            for (&j, &v) in map.iter().zip(gd) {
                                db[j] = db[j] + v;
                            }
                        }
                    }
                    out.push((*b, like(*b, db)));
                }
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    out.push((a, like(a, zip_map(g, self.value(b), |g, y| g * y))));
                }
                if needs(b) {
                    out.push((b, like(b, zip_map(g, self.value(a), |g, x| g * x))));
                }
            }
            &Op::Scale { x, factor } => out.push((x, g.map(|v| v * factor))),
            Op::Permute { x, axes } => {
                let inv = kernels::inverse_permutation(axes);
                let (_, data) = kernels::permute(g.shape(), gd, &inv);
                out.push((*x, like(*x, data)));
            }
            &Op::Reshape { x } => out.push((x, like(x, gd.to_vec()))),
            Op::Concat { parts } => {
                let widths: Vec<usize> =
                    parts.iter().map(|&p| *self.shape(p).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = gd.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if needs(p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, like(p, data)));
                    }
                    offset += w;
                }
            }
            Op::Roll { x, sources } => {
                let mut dx = vec![T::zero(); gd.len()];
                for (&s, &v) in sources.iter().zip(gd) {
                    dx[s] = v;
                }
                out.push((*x, like(*x, dx)));
            }
            Op::IndexSelect { x, indices } => {
                let width = gd.len() / indices.len();
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for (d, &v) in dx[i * width..(i + 1) * width].iter_mut().zip(&gd[r * width..]) {
                        *d = *d + v;
                    }
                }
                out.push((*x, like(*x, dx)));
            }
            &Op::Softmax { x } => {
                let n = *g.shape().last().unwrap();
                let y = node.value.data();
                let mut dx = Vec::with_capacity(gd.len());
                for (gr, yr) in gd.chunks(n).zip(y.chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    dx.extend(gr.iter().zip(yr).map(|(&g, &y)| y * (g - dot)));
                }
                out.push((x, like(x, dx)));
            }
            Op::LayerNorm { x, gamma, beta, normalized, rstd } => {
                let d = *g.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                if needs(*x) {
                    let dn = T::from_f64(d as f64);
                    let mut dx = Vec::with_capacity(gd.len());
                    for ((gr, yr), &rs) in gd.chunks(d).zip(normalized.chunks(d)).zip(rstd) {
                        let mut mean_gy = T::zero();
                        let mut mean_gyy = T::zero();
                        for j in 0..d {
                            let gy = gr[j] * gam[j];
                            mean_gy = mean_gy + gy;
                            mean_gyy = mean_gyy + gy * yr[j];
                        }
                        mean_gy = mean_gy / dn;
                        mean_gyy = mean_gyy / dn;
                        dx.extend((0..d).map(|j| rs * (gr[j] * gam[j] - mean_gy - yr[j] * mean_gyy)));
                    }
                    out.push((*x, like(*x, dx)));
                }
                if needs(*gamma) || needs(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (gr, yr) in gd.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gr[j] * yr[j];
                            db[j] = db[j] + gr[j];
                        }
                    }
                    out.push((*gamma, like(*gamma, dg)));
                    out.push((*beta, like(*beta, db)));
                }
            }
            &Op::Gelu { x } => {
                let dx = zip_map(g, self.value(x), |g, x| g * gelu_derivative(x));
                out.push((x, like(x, dx)));
            }
            &Op::Sigmoid { x } => {
                let dx = zip_map(g, &node.value, |g, y| g * y * (T::one() - y));
                out.push((x, like(x, dx)));
            }
            &Op::MeanAxis { x, axis } => {
                let shape = self.shape(x);
                let (outer, n, inner) = kernels::split_at_axis(shape, axis);
                let inv = T::one() / T::from_f64(n as f64);
                let mut dx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        dx.extend(gd[o * inner..(o + 1) * inner].iter().map(|&v| v * inv));
                    }
                }
                out.push((x, like(x, dx)));
            }
            &Op::MeanAll { x } => {
                let n = self.value(x).numel();
                let v = gd[0] / T::from_f64(n as f64);
                out.push((x, like(x, vec![v; n])));
            }
            &Op::SumAll { x } => {
                let n = self.value(x).numel();
                out.push((x, like(x, vec![gd[0]; n])));
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let scale = gd[0] / T::from_f64(z.len() as f64);
                let dz = z.iter().zip(targets).map(|(&z, &y)| (sigmoid(z) - y) * scale).collect();
                out.push((*logits, like(*logits, dz)));
            }
        }
        out
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter bound through [`Tape::param`]; `None` when
    /// the parameter is frozen or was not used.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.bound.get(&id).and_then(|&v| self.get(v))
    }

    pub fn into_param_grads(mut self, num_params: usize) -> ParamGrads<T> {
        let mut out: Vec<Option<Tensor<T>>> = (0..num_params).map(|_| None).collect();
        for (id, v) in &self.bound {
            if id.index() < num_params {
                out[id.index()] = self.grads[v.0].take();
            }
        }
        ParamGrads::new(out)
    }
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid<T: Element>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn gelu<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_derivative<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}
