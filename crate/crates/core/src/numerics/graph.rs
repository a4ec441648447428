//! Reverse-mode differentiation over a per-forward tape.
//!
//! A [`Graph`] borrows the [`ParamStore`] for the duration of one forward
//! pass. Frozen parameters enter the tape as untracked constants, so no
//! gradient is ever computed for them.

use std::collections::BTreeMap;

use crate::error::{MsdemError, Result};
use crate::numerics::tensor::{gemm, softmax_in_place};
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Gelu(NodeId),
    Reshape(NodeId),
    SliceCols {
        input: NodeId,
        start: usize,
    },
    InterleaveRows(Vec<NodeId>),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        tokens: usize,
        heads: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    GumbelSoftmax {
        relation: NodeId,
        /// `M[k] + noise[b,k]` before clamping, per batch row.
        shifted: Vec<f64>,
        eps_min: f64,
        tau: f64,
    },
    WeightedTokens {
        reps: Vec<NodeId>,
        weights: NodeId,
    },
    GroupReduce {
        input: NodeId,
        group: usize,
        mean: bool,
    },
    SoftmaxRows(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    tracked: bool,
    op: Op,
}

/// Gradients of a scalar with respect to the tracked parameters it reaches.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.map.keys().copied()
    }


    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Euclidean norm over all gradient entries.
    pub fn norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

impl IntoIterator for Gradients {
    type Item = (ParamId, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<ParamId, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.map.into_iter()
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

/// Smooth Gaussian-error activation (tanh form).
pub fn gelu_scalar(x: f64) -> f64 {
    gelu(x).0
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn push(&mut self, value: Tensor, tracked: bool, op: Op, name: &'static str) -> Result<NodeId> {
        value.check_finite(name)?;
        self.nodes.push(Node { value, tracked, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].tracked)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, false, Op::Leaf, "constant")
    }

    /// Insert a parameter; frozen parameters become constants.
    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        let p = self.store.get(id);
        let tracked = !p.frozen;
        self.push(p.value.clone(), tracked, Op::Param(id), "param")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = crate::numerics::matmul(self.value(a), self.value(b))?;
        let tr = self.tracked(&[a, b]);
        self.push(out, tr, Op::MatMul(a, b), "matmul")
    }

    /// `x [m×n] + bias [n]` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.numel() != n {
            return Err(MsdemError::Shape {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (r, b) in row.iter_mut().zip(bv.data()) {
                *r += b;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let tr = self.tracked(&[x, bias]);
        self.push(out, tr, Op::AddBias(x, bias), "add_bias")
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(MsdemError::Shape {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        let tr = self.tracked(&[a, b]);
        self.push(out, tr, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        let tr = self.tracked(&[a, b]);
        self.push(out, tr, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect());
        let tr = self.tracked(&[a]);
        self.push(out, tr, Op::Scale(a, s), "scale")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        let tr = self.tracked(&[a]);
        self.push(Tensor::from_parts(vec![1], vec![s]), tr, Op::Sum(a), "sum")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| gelu(x).0).collect());
        let tr = self.tracked(&[a]);
        self.push(out, tr, Op::Gelu(a), "gelu")
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(a).clone().reshape(shape)?;
        let tr = self.tracked(&[a]);
        self.push(out, tr, Op::Reshape(a), "reshape")
    }

    /// Columns `[start, start+width)` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let v = self.value(a);
        let (m, n) = v.as_2d("slice_cols")?;
        if width == 0 || start + width > n {
            return Err(MsdemError::Shape {
                op: "slice_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![start, width],
            });
        }
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&v.data()[i * n + start..i * n + start + width]);
        }
        let tr = self.tracked(&[a]);
        self.push(
            Tensor::from_parts(vec![m, width], data),
            tr,
            Op::SliceCols { input: a, start },
            "slice_cols",
        )
    }

    /// Interleave `k` matrices `[B×c]` into `[B·k × c]`; row `b·k + j` is
    /// row `b` of input `j`.
    pub fn interleave_rows(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = self.value(inputs[0]);
        let (b, c) = first.as_2d("interleave_rows")?;
        for &i in inputs {
            if self.value(i).shape() != [b, c] {
                return Err(MsdemError::Shape {
                    op: "interleave_rows",
                    lhs: vec![b, c],
                    rhs: self.value(i).shape().to_vec(),
                });
            }
        }
        let k = inputs.len();
        let mut data = Vec::with_capacity(b * k * c);
        for r in 0..b {
            for &i in inputs {
                data.extend_from_slice(self.value(i).row(r));
            }
        }
        let tr = self.tracked(inputs);
        self.push(
            Tensor::from_parts(vec![b * k, c], data),
            tr,
            Op::InterleaveRows(inputs.to_vec()),
            "interleave_rows",
        )
    }

    /// Multi-head scaled dot-product self-attention, independently within
    /// each consecutive group of `tokens` rows. `q`, `k`, `v` are
    /// `[groups·tokens × heads·d]`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        tokens: usize,
        heads: usize,
        scale: f64,
    ) -> Result<NodeId> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, width) = self.value(q).as_2d("attention")?;
        if tokens == 0 || rows % tokens != 0 || heads == 0 || width % heads != 0 {
            return Err(MsdemError::invalid(format!(
                "attention layout: {rows} rows, {tokens} tokens, width {width}, {heads} heads"
            )));
        }
        let groups = rows / tokens;
        let d = width / heads;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * width];
        let mut probs = vec![0.0; groups * heads * tokens * tokens];
        for g in 0..groups {
            let base = g * tokens;
            for h in 0..heads {
                let off = h * d;
                let p = &mut probs[(g * heads + h) * tokens * tokens..][..tokens * tokens];
                for i in 0..tokens {
                    let qi = &qd[(base + i) * width + off..][..d];
                    let row = &mut p[i * tokens..(i + 1) * tokens];
                    for (j, slot) in row.iter_mut().enumerate() {
                        let kj = &kd[(base + j) * width + off..][..d];
                        *slot = dot(qi, kj) * scale;
                    }
                    if row.iter().any(|s| s.is_nan()) {
                        return Err(MsdemError::NonFinite("attention scores"));
                    }
                    softmax_in_place(row);
                    let o = &mut out[(base + i) * width + off..][..d];
                    for (j, &a) in row.iter().enumerate() {
                        let vj = &vd[(base + j) * width + off..][..d];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += a * vc;
                        }
                    }
                }
            }
        }
        let tr = self.tracked(&[q, k, v]);
        self.push(
            Tensor::from_parts(vec![rows, width], out),
            tr,
            Op::Attention {
                q,
                k,
                v,
                tokens,
                heads,
                scale,
                probs: if tr { probs } else { Vec::new() },
            },
            "attention",
        )
    }

    /// Tempered softmax over `(log(max(M + noise, eps_min)) + gumbel) / tau`
    /// for each of `noise.rows()` rows. `relation` is the vector `M`.
    pub fn gumbel_softmax(
        &mut self,
        relation: NodeId,
        noise: &Tensor,
        gumbel: &Tensor,
        tau: f64,
        eps_min: f64,
    ) -> Result<NodeId> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(MsdemError::invalid(format!("temperature must be positive, got {tau}")));
        }
        let m = self.value(relation).data().to_vec();
        let t = m.len();
        if noise.cols() != t || gumbel.shape() != noise.shape() {
            return Err(MsdemError::Shape {
                op: "gumbel_softmax",
                lhs: vec![t],
                rhs: noise.shape().to_vec(),
            });
        }
        let b = noise.rows();
        let mut shifted = Vec::with_capacity(b * t);
        let mut out = Vec::with_capacity(b * t);
        for r in 0..b {
            let start = out.len();
            for k in 0..t {
                let s = m[k] + noise.get2(r, k);
                shifted.push(s);
                out.push((s.max(eps_min).ln() + gumbel.get2(r, k)) / tau);
            }
            softmax_in_place(&mut out[start..]);
        }
        let tr = self.tracked(&[relation]);
        self.push(
            Tensor::from_parts(vec![b, t], out),
            tr,
            Op::GumbelSoftmax {
                relation,
                shifted,
                eps_min,
                tau,
            },
            "gumbel_softmax",
        )
    }

    /// Scale expert representations by per-row router weights and stack them
    /// as tokens: `reps[j]` is `[B×d]`, `weights` is `[B×t]`, output row
    /// `b·t + j` is `weights[b,j]·reps[j][b]`.
    pub fn weighted_tokens(&mut self, reps: &[NodeId], weights: NodeId) -> Result<NodeId> {
        let w = self.value(weights);
        let (b, t) = w.as_2d("weighted_tokens")?;
        if reps.len() != t {
            return Err(MsdemError::Shape {
                op: "weighted_tokens",
                lhs: vec![reps.len()],
                rhs: w.shape().to_vec(),
            });
        }
        let d = self.value(reps[0]).cols();
        for &r in reps {
            if self.value(r).shape() != [b, d] {
                return Err(MsdemError::Shape {
                    op: "weighted_tokens",
                    lhs: vec![b, d],
                    rhs: self.value(r).shape().to_vec(),
                });
            }
        }
        let mut data = Vec::with_capacity(b * t * d);
        for row in 0..b {
            for (j, &r) in reps.iter().enumerate() {
                let wj = w.get2(row, j);
                data.extend(self.value(r).row(row).iter().map(|x| x * wj));
            }
        }
        let mut all = reps.to_vec();
        all.push(weights);
        let tr = self.tracked(&all);
        self.push(
            Tensor::from_parts(vec![b * t, d], data),
            tr,
            Op::WeightedTokens {
                reps: reps.to_vec(),
                weights,
            },
            "weighted_tokens",
        )
    }

    /// Sum (or mean) of each consecutive group of `group` rows.
    pub fn group_reduce(&mut self, a: NodeId, group: usize, mean: bool) -> Result<NodeId> {
        let v = self.value(a);
        let (rows, d) = v.as_2d("group_reduce")?;
        if group == 0 || rows % group != 0 {
            return Err(MsdemError::invalid(format!("{rows} rows not divisible into groups of {group}")));
        }
        let b = rows / group;
        let f = if mean { 1.0 / group as f64 } else { 1.0 };
        let mut data = vec![0.0; b * d];
        for g in 0..b {
            let o = &mut data[g * d..(g + 1) * d];
            for r in 0..group {
                for (oc, x) in o.iter_mut().zip(v.row(g * group + r)) {
                    *oc += x;
                }
            }
            if mean {
                o.iter_mut().for_each(|x| *x *= f);
            }
        }
        let tr = self.tracked(&[a]);
        self.push(
            Tensor::from_parts(vec![b, d], data),
            tr,
            Op::GroupReduce { input: a, group, mean },
            "group_reduce",
        )
    }

    /// Softmax along the trailing axis.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let n = v.cols();
        let mut data = v.data().to_vec();
        data.chunks_mut(n).for_each(softmax_in_place);
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        let tr = self.tracked(&[a]);
        self.push(out, tr, Op::SoftmaxRows(a), "softmax")
    }

    /// Mean negative log-likelihood of `labels` (class positions) under the
    /// row-wise softmax of `logits [B×K]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        let (b, k) = v.as_2d("cross_entropy")?;
        if labels.len() != b {
            return Err(MsdemError::Shape {
                op: "cross_entropy",
                lhs: vec![b, k],
                rhs: vec![labels.len()],
            });
        }
        if k < 2 {
            return Err(MsdemError::invalid("cross entropy needs at least two classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(MsdemError::invalid(format!("label position {bad} out of range for {k} classes")));
        }
        let mut probs = v.data().to_vec();
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &mut probs[r * k..(r + 1) * k];
            loss += crate::numerics::tensor::log_sum_exp(row) - row[l];
            softmax_in_place(row);
        }
        loss /= b as f64;
        let tr = self.tracked(&[logits]);
        self.push(
            Tensor::from_parts(vec![1], vec![loss]),
            tr,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Propagate `d loss / d node` back to every tracked parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(MsdemError::invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut out)?;
        }
        for t in out.map.values() {
            t.check_finite("backward")?;
        }
        Ok(out)
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].tracked {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(pid) => {
                let shape = node.value.shape().to_vec();
                match out.map.get_mut(pid) {
                    Some(t) => t.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        out.map.insert(*pid, Tensor::from_parts(shape, g.to_vec()));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).as_2d("matmul")?;
                let n = self.value(*b).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| gemm(false, true, m, n, k, g, bv, s, 1.0));
                acc(*b, &mut |s| gemm(true, false, k, m, n, av, g, s, 1.0));
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).numel();
                acc(*x, &mut |s| add_into(s, g));
                acc(*bias, &mut |s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| s.iter_mut().zip(g.iter().zip(bv)).for_each(|(s, (g, y))| *s += g * y));
                acc(*b, &mut |s| s.iter_mut().zip(g.iter().zip(av)).for_each(|(s, (g, x))| *s += g * x));
            }
            Op::Scale(a, f) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * f)),
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |s| {
                    for ((s, g), &x) in s.iter_mut().zip(g).zip(x) {
                        *s += g * gelu(x).1;
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::SliceCols { input, start } => {
                let n = self.value(*input).cols();
                let w = node.value.cols();
                acc(*input, &mut |s| {
                    for (i, row) in g.chunks(w).enumerate() {
                        add_into(&mut s[i * n + start..i * n + start + w], row);
                    }
                });
            }
            Op::InterleaveRows(inputs) => {
                let c = node.value.cols();
                let k = inputs.len();
                for (j, &inp) in inputs.iter().enumerate() {
                    acc(inp, &mut |s| {
                        for (r, srow) in s.chunks_mut(c).enumerate() {
                            add_into(srow, &g[(r * k + j) * c..(r * k + j + 1) * c]);
                        }
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                tokens,
                heads,
                scale,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    node.value.cols(),
                    *tokens,
                    *heads,
                    *scale,
                );
                acc(*q, &mut |s| add_into(s, &dq));
                acc(*k, &mut |s| add_into(s, &dk));
                acc(*v, &mut |s| add_into(s, &dv));
            }
            Op::GumbelSoftmax {
                relation,
                shifted,
                eps_min,
                tau,
            } => {
                let t = node.value.cols();
                let w = node.value.data();
                acc(*relation, &mut |s| {
                    for r in 0..node.value.rows() {
                        let wr = &w[r * t..(r + 1) * t];
                        let gr = &g[r * t..(r + 1) * t];
                        let dot: f64 = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..t {
                            let x = shifted[r * t + k];
                            if x > *eps_min {
                                s[k] += wr[k] * (gr[k] - dot) / (tau * x);
                            }
                        }
                    }
                });
            }
            Op::WeightedTokens { reps, weights } => {
                let t = reps.len();
                let d = node.value.cols();
                let wv = self.value(*weights);
                for (j, &r) in reps.iter().enumerate() {
                    acc(r, &mut |s| {
                        for (b, srow) in s.chunks_mut(d).enumerate() {
                            let wj = wv.get2(b, j);
                            let grow = &g[(b * t + j) * d..][..d];
                            srow.iter_mut().zip(grow).for_each(|(s, g)| *s += g * wj);
                        }
                    });
                }
                acc(*weights, &mut |s| {
                    for b in 0..wv.rows() {
                        for (j, &r) in reps.iter().enumerate() {
                            s[b * t + j] += dot(&g[(b * t + j) * d..][..d], self.value(r).row(b));
                        }
                    }
                });
            }
            Op::GroupReduce { input, group, mean } => {
                let d = node.value.cols();
                let f = if *mean { 1.0 / *group as f64 } else { 1.0 };
                acc(*input, &mut |s| {
                    for (r, srow) in s.chunks_mut(d).enumerate() {
                        let grow = &g[(r / group) * d..][..d];
                        srow.iter_mut().zip(grow).for_each(|(s, g)| *s += g * f);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.cols();
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for ((srow, yrow), grow) in s.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for i in 0..n {
                            srow[i] += yrow[i] * (grow[i] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).cols();
                let f = g[0] / labels.len() as f64;
                acc(*logits, &mut |s| {
                    for (r, &l) in labels.iter().enumerate() {
                        for c in 0..k {
                            let y = if c == l { 1.0 } else { 0.0 };
                            s[r * k + c] += f * (probs[r * k + c] - y);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    width: usize,
    tokens: usize,
    heads: usize,
    scale: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = q.len() / width;
    let groups = rows / tokens;
    let d = width / heads;
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; tokens];
    for gi in 0..groups {
        let base = gi * tokens;
        for h in 0..heads {
            let off = h * d;
            let p = &probs[(gi * heads + h) * tokens * tokens..][..tokens * tokens];
            for i in 0..tokens {
                let go = &g[(base + i) * width + off..][..d];
                let prow = &p[i * tokens..(i + 1) * tokens];
                for j in 0..tokens {
                    let vj = &v[(base + j) * width + off..][..d];
                    dp[j] = dot(go, vj);
                    let dvj = &mut dv[(base + j) * width + off..][..d];
                    dvj.iter_mut().zip(go).for_each(|(s, g)| *s += prow[j] * g);
                }
                let inner: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..tokens {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        dq[(base + i) * width + off + c] += ds * k[(base + j) * width + off + c];
                        dk[(base + j) * width + off + c] += ds * q[(base + i) * width + off + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
