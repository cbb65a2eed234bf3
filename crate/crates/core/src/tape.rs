//! Record-and-replay reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value; `backward`
//! walks the nodes from the loss back to the start, so each node is visited
//! once and always after every node that consumed it. Parameters enter the
//! tape by reference, so building a graph never copies model weights.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{self, dot, Tensor};
use crate::train::ParamId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for diagnostics and the backward fault hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Affine,
    Add,
    AddRowwise,
    Mul,
    MulRowwise,
    ScaleRows,
    ScaleShift,
    Tanh,
    Sigmoid,
    Outer,
    Softmax,
    MeanRows,
    WeightedSumRows,
    Embed,
    Reshape,
    CrossEntropy,
    SumAll,
    Mean,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<OpKind> {
        use OpKind::*;
        Some(match name {
            "affine" => Affine,
            "add" => Add,
            "add-rowwise" => AddRowwise,
            "mul" => Mul,
            "mul-rowwise" => MulRowwise,
            "scale-rows" => ScaleRows,
            "scale-shift" => ScaleShift,
            "tanh" => Tanh,
            "sigmoid" => Sigmoid,
            "outer" => Outer,
            "softmax" => Softmax,
            "mean-rows" => MeanRows,
            "weighted-sum-rows" => WeightedSumRows,
            "embed" => Embed,
            "cross-entropy" => CrossEntropy,
            _ => return None,
        })
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    AddRowwise {
        m: NodeId,
        v: NodeId,
    },
    Mul(NodeId, NodeId),
    MulRowwise {
        m: NodeId,
        v: NodeId,
    },
    ScaleRows {
        m: NodeId,
        w: NodeId,
    },
    ScaleShift {
        x: NodeId,
        scale: f64,
    },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Outer(NodeId, NodeId),
    Softmax(NodeId),
    MeanRows(NodeId),
    WeightedSumRows {
        m: NodeId,
        w: NodeId,
    },
    Embed {
        table: NodeId,
        id: usize,
    },
    Reshape(NodeId),
    CrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    SumAll(NodeId),
    Mean(Vec<NodeId>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Affine { .. } => OpKind::Affine,
            Op::Add(..) => OpKind::Add,
            Op::AddRowwise { .. } => OpKind::AddRowwise,
            Op::Mul(..) => OpKind::Mul,
            Op::MulRowwise { .. } => OpKind::MulRowwise,
            Op::ScaleRows { .. } => OpKind::ScaleRows,
            Op::ScaleShift { .. } => OpKind::ScaleShift,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Outer(..) => OpKind::Outer,
            Op::Softmax(_) => OpKind::Softmax,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::WeightedSumRows { .. } => OpKind::WeightedSumRows,
            Op::Embed { .. } => OpKind::Embed,
            Op::Reshape(_) => OpKind::Reshape,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SumAll(_) => OpKind::SumAll,
            Op::Mean(_) => OpKind::Mean,
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// A single-writer recording of one forward computation.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    fault: Option<OpKind>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: scales the backward rule of one primitive kind by 1.5 so
    /// gradient checks can be shown to fail.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Input that takes no gradient (data, masks).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Cow::Owned(t), Op::Leaf, None, false)
    }

    /// Borrowed input that takes no gradient.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(t), Op::Leaf, None, false)
    }

    /// Free input whose gradient is reported by `backward`.
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.push(Cow::Owned(t), Op::Leaf, None, true)
    }

    pub fn param(&mut self, id: ParamId, t: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(t), Op::Leaf, Some(id), true)
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, param: Option<ParamId>, rg: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            param,
            requires_grad: rg,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{:?} output", op.kind())));
        }
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(Cow::Owned(value), op, None, rg))
    }

    fn value_data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = tensor::affine(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.derived(y, Op::Affine { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let y = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.derived(y, Op::Add(a, b), &[a, b])
    }

    /// Matrix ⊕ vector: the vector is added to every row.
    pub fn add_rowwise(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(m).as_matrix("add_rowwise")?;
        if self.shape(v) != [cols] {
            return Err(Error::shape("add_rowwise", self.shape(m), self.shape(v)));
        }
        let (mv, vv) = (self.value(m).data(), self.value(v).data());
        let mut out = mv.to_vec();
        for r in 0..rows {
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(vv) {
                *o += x;
            }
        }
        let y = Tensor::from_parts(vec![rows, cols], out);
        self.derived(y, Op::AddRowwise { m, v }, &[m, v])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let y = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.derived(y, Op::Mul(a, b), &[a, b])
    }

    /// Every row of `m` multiplied elementwise by `v`.
    pub fn mul_rowwise(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(m).as_matrix("mul_rowwise")?;
        if self.shape(v) != [cols] {
            return Err(Error::shape("mul_rowwise", self.shape(m), self.shape(v)));
        }
        let (mv, vv) = (self.value(m).data(), self.value(v).data());
        let mut out = mv.to_vec();
        for r in 0..rows {
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(vv) {
                *o *= x;
            }
        }
        let y = Tensor::from_parts(vec![rows, cols], out);
        self.derived(y, Op::MulRowwise { m, v }, &[m, v])
    }

    /// Row `k` of `m` multiplied by the scalar `w[k]`.
    pub fn scale_rows(&mut self, m: NodeId, w: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(m).as_matrix("scale_rows")?;
        if self.shape(w) != [rows] {
            return Err(Error::shape("scale_rows", self.shape(m), self.shape(w)));
        }
        let (mv, wv) = (self.value(m).data(), self.value(w).data());
        let mut out = mv.to_vec();
        for r in 0..rows {
            out[r * cols..(r + 1) * cols]
                .iter_mut()
                .for_each(|o| *o *= wv[r]);
        }
        let y = Tensor::from_parts(vec![rows, cols], out);
        self.derived(y, Op::ScaleRows { m, w }, &[m, w])
    }

    /// `scale * x + shift`, elementwise.
    pub fn scale_shift(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| scale * v + shift)
            .collect();
        let y = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.derived(y, Op::ScaleShift { x, scale }, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let y = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.derived(y, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| tensor::sigmoid(v))
            .collect();
        let y = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.derived(y, Op::Sigmoid(x), &[x])
    }

    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = tensor::outer_product(self.value(a), self.value(b))?;
        self.derived(y, Op::Outer(a, b), &[a, b])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let y = tensor::softmax(self.value(x))?;
        self.derived(y, Op::Softmax(x), &[x])
    }

    pub fn mean_rows(&mut self, m: NodeId) -> Result<NodeId> {
        let y = tensor::mean_over_rows(self.value(m))?;
        self.derived(y, Op::MeanRows(m), &[m])
    }

    /// `Σ_k w[k] · m[k, ·]`.
    pub fn weighted_sum_rows(&mut self, m: NodeId, w: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(m).as_matrix("weighted_sum_rows")?;
        if self.shape(w) != [rows] {
            return Err(Error::shape(
                "weighted_sum_rows",
                self.shape(m),
                self.shape(w),
            ));
        }
        let (mt, wv) = (self.value(m), self.value(w).data());
        let mut out = vec![0.0; cols];
        for (r, &wr) in wv.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(mt.row(r)) {
                *o += wr * x;
            }
        }
        let y = Tensor::from_parts(vec![cols], out);
        self.derived(y, Op::WeightedSumRows { m, w }, &[m, w])
    }

    /// Row `id` of an embedding table, equivalent to `table^T · onehot(id)`.
    pub fn embed(&mut self, table: NodeId, id: usize) -> Result<NodeId> {
        let (rows, _) = self.value(table).as_matrix("embed")?;
        if id >= rows {
            return Err(Error::Vocabulary {
                position: 0,
                id,
                size: rows,
            });
        }
        let row = self.value(table).row(id).to_vec();
        let y = Tensor::from_parts(vec![row.len()], row);
        self.derived(y, Op::Embed { table, id }, &[table])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(x).reshaped(shape)?;
        self.derived(y, Op::Reshape(x), &[x])
    }

    /// `-log softmax(logits)[label]`, fused with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let n = self.value(logits).as_vector("cross_entropy")?;
        if label >= n {
            return Err(Error::invalid(format!(
                "label {label} out of range for {n} classes"
            )));
        }
        let z = self.value(logits).data();
        let lse = tensor::log_sum_exp(z);
        let loss = lse - z[label];
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        let y = Tensor::from_parts(vec![1], vec![loss.max(0.0)]);
        self.derived(
            y,
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        self.derived(Tensor::from_parts(vec![1], vec![s]), Op::SumAll(x), &[x])
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::invalid("mean of no nodes"));
        }
        let mut s = 0.0;
        for &x in xs {
            if self.shape(x) != [1] {
                return Err(Error::shape("mean", self.shape(x), &[1]));
            }
            s += self.value(x).data()[0];
        }
        let y = Tensor::from_parts(vec![1], vec![s / xs.len() as f64]);
        self.derived(y, Op::Mean(xs.to_vec()), xs)
    }

    /// Reverse pass from a scalar node. Gradient buffers are fresh zeros on
    /// every call.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != [1] {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                let mut ctx = Backprop {
                    tape: self,
                    grads: &mut grads,
                };
                let factor = if self.fault == Some(node.op.kind()) {
                    1.5
                } else {
                    1.0
                };
                if factor != 1.0 {
                    let scaled: Vec<f64> = dy.iter().map(|g| g * factor).collect();
                    ctx.propagate(i, &scaled);
                } else {
                    ctx.propagate(i, &dy);
                }
            }
            grads[i] = Some(dy);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| n.param.map(|p| (NodeId(i), p)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

struct Backprop<'t, 'a> {
    tape: &'t Tape<'a>,
    grads: &'t mut Vec<Option<Vec<f64>>>,
}

impl Backprop<'_, '_> {
    /// Gradient buffer for `id`, or `None` when no gradient is needed there.
    fn buf(&mut self, id: NodeId) -> Option<&mut [f64]> {
        let node = &self.tape.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&mut self, i: usize, dy: &[f64]) {
        let tape = self.tape;
        let node = &tape.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (m, n) = tape.nodes[w.0].value.as_matrix("affine").expect("checked");
                let rows = dy.len() / m;
                let xv = tape.value_data(*x);
                let wv = tape.value_data(*w);
                if let Some(gw) = self.buf(*w) {
                    for k in 0..rows {
                        let xr = &xv[k * n..(k + 1) * n];
                        for r in 0..m {
                            let g = dy[k * m + r];
                            if g != 0.0 {
                                for (gwj, xj) in gw[r * n..(r + 1) * n].iter_mut().zip(xr) {
                                    *gwj += g * xj;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = self.buf(*x) {
                    for k in 0..rows {
                        let gxr = &mut gx[k * n..(k + 1) * n];
                        for r in 0..m {
                            let g = dy[k * m + r];
                            if g != 0.0 {
                                for (gxj, wj) in gxr.iter_mut().zip(&wv[r * n..(r + 1) * n]) {
                                    *gxj += g * wj;
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.buf(*b) {
                        for k in 0..rows {
                            for (gbi, g) in gb.iter_mut().zip(&dy[k * m..(k + 1) * m]) {
                                *gbi += g;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if let Some(g) = self.buf(*id) {
                        add_into(g, dy);
                    }
                }
            }
            Op::AddRowwise { m, v } => {
                if let Some(g) = self.buf(*m) {
                    add_into(g, dy);
                }
                if let Some(g) = self.buf(*v) {
                    let cols = g.len();
                    for row in dy.chunks(cols) {
                        add_into(g, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (tape.value_data(*a), tape.value_data(*b));
                if let Some(g) = self.buf(*a) {
                    for ((gi, d), y) in g.iter_mut().zip(dy).zip(bv) {
                        *gi += d * y;
                    }
                }
                if let Some(g) = self.buf(*b) {
                    for ((gi, d), x) in g.iter_mut().zip(dy).zip(av) {
                        *gi += d * x;
                    }
                }
            }
            Op::MulRowwise { m, v } => {
                let (mv, vv) = (tape.value_data(*m), tape.value_data(*v));
                let cols = vv.len();
                if let Some(g) = self.buf(*m) {
                    for (r, grow) in g.chunks_mut(cols).enumerate() {
                        for ((gi, d), x) in grow.iter_mut().zip(&dy[r * cols..]).zip(vv) {
                            *gi += d * x;
                        }
                    }
                }
                if let Some(g) = self.buf(*v) {
                    for (drow, mrow) in dy.chunks(cols).zip(mv.chunks(cols)) {
                        for ((gi, d), x) in g.iter_mut().zip(drow).zip(mrow) {
                            *gi += d * x;
                        }
                    }
                }
            }
            Op::ScaleRows { m, w } => {
                let (mv, wv) = (tape.value_data(*m), tape.value_data(*w));
                let cols = mv.len() / wv.len();
                if let Some(g) = self.buf(*m) {
                    for (r, grow) in g.chunks_mut(cols).enumerate() {
                        for (gi, d) in grow.iter_mut().zip(&dy[r * cols..]) {
                            *gi += d * wv[r];
                        }
                    }
                }
                if let Some(g) = self.buf(*w) {
                    for (r, gi) in g.iter_mut().enumerate() {
                        *gi += dot(&dy[r * cols..(r + 1) * cols], &mv[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ScaleShift { x, scale } => {
                if let Some(g) = self.buf(*x) {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += scale * d;
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(g) = self.buf(*x) {
                    for ((gi, d), y) in g.iter_mut().zip(dy).zip(out) {
                        *gi += d * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(g) = self.buf(*x) {
                    for ((gi, d), y) in g.iter_mut().zip(dy).zip(out) {
                        *gi += d * y * (1.0 - y);
                    }
                }
            }
            Op::Outer(a, b) => {
                let (av, bv) = (tape.value_data(*a), tape.value_data(*b));
                let n = bv.len();
                if let Some(g) = self.buf(*a) {
                    for (i, gi) in g.iter_mut().enumerate() {
                        *gi += dot(&dy[i * n..(i + 1) * n], bv);
                    }
                }
                if let Some(g) = self.buf(*b) {
                    for (i, &ai) in av.iter().enumerate() {
                        for (gj, d) in g.iter_mut().zip(&dy[i * n..(i + 1) * n]) {
                            *gj += ai * d;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(g) = self.buf(*x) {
                    let inner = dot(dy, out);
                    for ((gi, d), y) in g.iter_mut().zip(dy).zip(out) {
                        *gi += y * (d - inner);
                    }
                }
            }
            Op::MeanRows(m) => {
                if let Some(g) = self.buf(*m) {
                    let cols = dy.len();
                    let inv = cols as f64 / g.len() as f64;
                    for grow in g.chunks_mut(cols) {
                        for (gi, d) in grow.iter_mut().zip(dy) {
                            *gi += d * inv;
                        }
                    }
                }
            }
            Op::WeightedSumRows { m, w } => {
                let (mv, wv) = (tape.value_data(*m), tape.value_data(*w));
                let cols = dy.len();
                if let Some(g) = self.buf(*m) {
                    for (r, grow) in g.chunks_mut(cols).enumerate() {
                        for (gi, d) in grow.iter_mut().zip(dy) {
                            *gi += wv[r] * d;
                        }
                    }
                }
                if let Some(g) = self.buf(*w) {
                    for (r, gi) in g.iter_mut().enumerate() {
                        *gi += dot(dy, &mv[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Embed { table, id } => {
                if let Some(g) = self.buf(*table) {
                    let cols = dy.len();
                    add_into(&mut g[id * cols..(id + 1) * cols], dy);
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.buf(*x) {
                    add_into(g, dy);
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                if let Some(g) = self.buf(*logits) {
                    for (j, (gi, p)) in g.iter_mut().zip(probs).enumerate() {
                        let target = if j == *label { 1.0 } else { 0.0 };
                        *gi += dy[0] * (p - target);
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(g) = self.buf(*x) {
                    g.iter_mut().for_each(|gi| *gi += dy[0]);
                }
            }
            Op::Mean(xs) => {
                let share = dy[0] / xs.len() as f64;
                for x in xs {
                    if let Some(g) = self.buf(*x) {
                        g[0] += share;
                    }
                }
            }
        }
    }
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

/// Result of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(NodeId, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; `None` if `id` does not
    /// influence the loss or takes no gradient.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradients flowing into parameter leaves. A parameter registered more
    /// than once appears once per registration.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(node, p)| self.get(node).map(|g| (p, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.variable(vec_t(&[1.0, -2.0]));
        let zero = tape.scale_shift(x, 0.0, 3.0).unwrap();
        let loss = tape.sum_all(zero).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(vec_t(&[3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(vec_t(&[1.0, 2.0]));
        let y = tape.tanh(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(vec_t(&[2.0]));
        let x = tape.variable(vec_t(&[5.0]));
        let p = tape.mul(c, x).unwrap();
        let loss = tape.sum_all(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.variable(vec_t(&[0.3, -0.7]));
        let t = tape.tanh(x).unwrap();
        let loss = tape.sum_all(t).unwrap();
        let a = tape.backward(loss).unwrap().get(x).unwrap().to_vec();
        let b = tape.backward(loss).unwrap().get(x).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut tape = Tape::new();
        let a = tape.variable(vec_t(&[1.0, 2.0]));
        let b = tape.variable(vec_t(&[1.0, 2.0, 3.0]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
        let m = tape.variable(Tensor::zeros(&[2, 3]));
        assert!(tape.mul_rowwise(m, a).is_err());
        assert!(tape.add_rowwise(m, a).is_err());
        assert!(tape.scale_rows(m, b).is_err());
        assert!(tape.weighted_sum_rows(m, b).is_err());
        assert!(tape.mul_rowwise(m, b).is_ok());
        assert!(tape.scale_rows(m, a).is_ok());
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let mut tape = Tape::new();
        let z = tape.variable(vec_t(&[0.5, -1.0, 2.0]));
        let loss = tape.cross_entropy(z, 1).unwrap();
        let g = tape.backward(loss).unwrap().get(z).unwrap().to_vec();
        let p = tensor::softmax(&vec_t(&[0.5, -1.0, 2.0])).unwrap();
        for j in 0..3 {
            let target = if j == 1 { 1.0 } else { 0.0 };
            assert!((g[j] - (p.data()[j] - target)).abs() < 1e-15);
        }
        assert!(tape.cross_entropy(z, 3).is_err());
    }

    #[test]
    fn embed_out_of_range() {
        let mut tape = Tape::new();
        let t = tape.variable(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.embed(t, 3), Err(Error::Vocabulary { .. })));
    }
}
