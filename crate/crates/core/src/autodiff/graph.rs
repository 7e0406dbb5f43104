use std::collections::BTreeMap;

use super::Array;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Leaf that receives a gradient.
    Parameter,
    /// Leaf treated as a fixed input.
    Constant,
    /// Result of an operation.
    Derived,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Transpose(NodeId),
    Reshape(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    SoftmaxRows { x: NodeId, tau: f64 },
    SegmentMax { x: NodeId, seg: usize },
    TraceLog(NodeId),
    L2NormalizeRows { x: NodeId, eps: f64 },
    SumAll(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Transpose(_) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::ConcatRows(_) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::SegmentMax { .. } => "segment_max",
            Op::TraceLog(_) => "trace_log",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::SumAll(_) => "sum",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Hadamard(a, b) => vec![*a, *b],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Scale(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Tanh(x)
            | Op::Transpose(x)
            | Op::Reshape(x, _)
            | Op::GatherRows(x, _)
            | Op::SoftmaxRows { x, .. }
            | Op::SegmentMax { x, .. }
            | Op::TraceLog(x)
            | Op::L2NormalizeRows { x, .. }
            | Op::SumAll(x) => vec![*x],
            Op::ConcatRows(xs) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    role: Role,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every parameter leaf of a graph.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Array>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Array)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Append-only computation graph. Nodes are created in topological order, so
/// reverse index order is a valid backward schedule.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, value: Array) -> NodeId {
        self.push_leaf(value, Role::Parameter)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push_leaf(value, Role::Constant)
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn role(&self, id: NodeId) -> Role {
        self.nodes[id.0].role
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    fn push_leaf(&mut self, value: Array, role: Role) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            role,
            op: Op::Leaf,
            requires_grad: role == Role::Parameter,
        });
        id
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            role: Role::Derived,
            op,
            requires_grad,
        });
        Ok(id)
    }

    /// Re-evaluates a derived node from its inputs' current values.
    pub fn recompute(&self, id: NodeId) -> Result<Array> {
        match &self.nodes[id.0].op {
            Op::Leaf => Ok(self.nodes[id.0].value.clone()),
            op => self.eval(op),
        }
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    /// `x · w + b` with `x: [m×p]`, `w: [p×n]`, `b: [n]` broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Affine { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::Parameter(format!("scale factor {c} is not finite")));
        }
        self.push(Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Log(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(x))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Reshape(x, shape))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatRows(xs.to_vec()))
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.push(Op::GatherRows(x, indices))
    }

    /// Row-wise softmax of `x / tau`, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, x: NodeId, tau: f64) -> Result<NodeId> {
        check_tau(tau)?;
        self.push(Op::SoftmaxRows { x, tau })
    }

    /// Per-row maximum, `[m×n] -> [m]`. The gradient goes to the first argmax.
    pub fn max_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if n == 0 {
            return Err(Error::Dimension("max_rows over empty rows".into()));
        }
        let y = self.segment_max(x, n)?;
        self.reshape(y, vec![m])
    }

    /// Maximum over consecutive column segments of length `seg`:
    /// `[m×(q·seg)] -> [m×q]`. Ties resolve to the lowest column index.
    pub fn segment_max(&mut self, x: NodeId, seg: usize) -> Result<NodeId> {
        self.push(Op::SegmentMax { x, seg })
    }

    /// `Σ_i log(x[i,i])` for a square matrix.
    pub fn trace_log(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::TraceLog(x))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {eps}")));
        }
        self.push(Op::L2NormalizeRows { x, eps })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SumAll(x))
    }

    /// Smallest gap between the winning entry and the runner-up over every
    /// max operation in the graph. Infinite when no max has competitors.
    pub fn min_max_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::SegmentMax { x, seg } = node.op {
                let v = &self.nodes[x.0].value;
                let (m, cols) = (v.shape()[0], v.shape()[1]);
                for r in 0..m {
                    for s in 0..cols / seg {
                        let seg_vals = &v.row(r)[s * seg..(s + 1) * seg];
                        let (best, _) = argmax(seg_vals);
                        for (i, &val) in seg_vals.iter().enumerate() {
                            if i != best {
                                margin = margin.min(seg_vals[best] - val);
                            }
                        }
                    }
                }
            }
        }
        margin
    }

    // ---- forward ----------------------------------------------------------

    fn eval(&self, op: &Op) -> Result<Array> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        match op {
            Op::Leaf => unreachable!("leaves carry their value"),
            Op::MatMul(a, b) => v(*a).matmul(v(*b)),
            Op::Affine { x, w, b } => {
                let (xv, wv, bv) = (v(*x), v(*w), v(*b));
                let (_, n) = wv.dims2()?;
                if bv.shape() != [n] {
                    return Err(Error::Dimension(format!(
                        "affine bias shape {:?} does not match weight {:?}",
                        bv.shape(),
                        wv.shape()
                    )));
                }
                let mut out = xv.matmul(wv)?;
                for row in out.data_mut().chunks_mut(n) {
                    for (o, b) in row.iter_mut().zip(bv.data()) {
                        *o += b;
                    }
                }
                Ok(out)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Hadamard(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                if av.shape() != bv.shape() {
                    return Err(Error::Dimension(format!(
                        "{} of {:?} and {:?}",
                        op.name(),
                        av.shape(),
                        bv.shape()
                    )));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
                Array::new(av.shape().to_vec(), data)
            }
            Op::Scale(x, c) => Ok(v(*x).map(|e| e * c)),
            Op::Exp(x) => Ok(v(*x).map(f64::exp)),
            Op::Log(x) => {
                let xv = v(*x);
                if let Some(i) = xv.data().iter().position(|&e| !(e > 0.0)) {
                    return Err(Error::Domain(format!(
                        "log of nonpositive value {} at flat index {i}",
                        xv.data()[i]
                    )));
                }
                Ok(xv.map(f64::ln))
            }
            Op::Tanh(x) => Ok(v(*x).map(f64::tanh)),
            Op::Transpose(x) => v(*x).transpose(),
            Op::Reshape(x, shape) => v(*x).reshape(shape.clone()),
            Op::ConcatRows(xs) => {
                if xs.is_empty() {
                    return Err(Error::Dimension("concat_rows of nothing".into()));
                }
                let cols = v(xs[0]).dims2()?.1;
                let mut rows = 0;
                let mut data = Vec::new();
                for &x in xs {
                    let (r, c) = v(x).dims2()?;
                    if c != cols {
                        return Err(Error::Dimension(format!(
                            "concat_rows: column count {c} differs from {cols}"
                        )));
                    }
                    rows += r;
                    data.extend_from_slice(v(x).data());
                }
                Array::new(vec![rows, cols], data)
            }
            Op::GatherRows(x, idx) => {
                let xv = v(*x);
                let (r, c) = xv.dims2()?;
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    if i >= r {
                        return Err(Error::Dimension(format!(
                            "gather_rows index {i} out of range for {r} rows"
                        )));
                    }
                    data.extend_from_slice(xv.row(i));
                }
                Array::new(vec![idx.len(), c], data)
            }
            Op::SoftmaxRows { x, tau } => {
                let xv = v(*x);
                let (_, n) = xv.dims2()?;
                let mut out = xv.clone();
                if n > 0 {
                    for row in out.data_mut().chunks_mut(n) {
                        softmax_in_place(row, *tau);
                    }
                }
                Ok(out)
            }
            Op::SegmentMax { x, seg } => {
                let xv = v(*x);
                let (m, cols) = xv.dims2()?;
                if *seg == 0 || cols % seg != 0 {
                    return Err(Error::Dimension(format!(
                        "segment length {seg} does not divide {cols} columns"
                    )));
                }
                let q = cols / seg;
                let mut data = Vec::with_capacity(m * q);
                for r in 0..m {
                    let row = xv.row(r);
                    for s in 0..q {
                        let (i, _) = argmax(&row[s * seg..(s + 1) * seg]);
                        data.push(row[s * seg + i]);
                    }
                }
                Array::new(vec![m, q], data)
            }
            Op::TraceLog(x) => {
                let xv = v(*x);
                let (r, c) = xv.dims2()?;
                if r != c {
                    return Err(Error::Dimension(format!(
                        "trace_log needs a square matrix, got {:?}",
                        xv.shape()
                    )));
                }
                let mut total = 0.0;
                for i in 0..r {
                    let d = xv.get2(i, i);
                    if !(d > 0.0) {
                        return Err(Error::Domain(format!(
                            "trace_log: diagonal entry {i} is {d}, must be positive"
                        )));
                    }
                    total += d.ln();
                }
                Ok(Array::scalar(total))
            }
            Op::L2NormalizeRows { x, eps } => {
                let xv = v(*x);
                let (_, n) = xv.dims2()?;
                let mut out = xv.clone();
                if n > 0 {
                    for row in out.data_mut().chunks_mut(n) {
                        let d = row_norm(row).max(*eps);
                        row.iter_mut().for_each(|e| *e /= d);
                    }
                }
                Ok(out)
            }
            Op::SumAll(x) => Ok(Array::scalar(v(*x).sum())),
        }
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// parameter leaf. Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.all_finite() {
            return Err(Error::Domain(format!("loss value {} is not finite", lv.data()[0])));
        }

        let mut grads: Vec<Option<Array>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = GradientMap::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.role == Role::Parameter {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Array::zeros(node.value.shape()));
                out.grads.insert(NodeId(i), g);
            }
        }
        Ok(out)
    }

    fn backprop(&self, op: &Op, out: &Array, g: &Array, grads: &mut [Option<Array>]) -> Result<()> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, delta: Array| {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul(&v(*b).transpose()?)?);
                }
                if needs(*b) {
                    acc(*b, v(*a).transpose()?.matmul(g)?);
                }
            }
            Op::Affine { x, w, b } => {
                if needs(*x) {
                    acc(*x, g.matmul(&v(*w).transpose()?)?);
                }
                if needs(*w) {
                    acc(*w, v(*x).transpose()?.matmul(g)?);
                }
                if needs(*b) {
                    let n = v(*b).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, e) in db.iter_mut().zip(row) {
                            *d += e;
                        }
                    }
                    acc(*b, Array::vector(db));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.map(|e| -e));
                }
            }
            Op::Hadamard(a, b) => {
                if needs(*a) {
                    acc(*a, zip_with(g, v(*b), |x, y| x * y));
                }
                if needs(*b) {
                    acc(*b, zip_with(g, v(*a), |x, y| x * y));
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|e| e * c)),
            Op::Exp(x) => acc(*x, zip_with(g, out, |ge, y| ge * y)),
            Op::Log(x) => acc(*x, zip_with(g, v(*x), |ge, xe| ge / xe)),
            Op::Tanh(x) => acc(*x, zip_with(g, out, |ge, y| ge * (1.0 - y * y))),
            Op::Transpose(x) => acc(*x, g.transpose()?),
            Op::Reshape(x, _) => acc(*x, g.reshape(v(*x).shape().to_vec())?),
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = v(x).len();
                    if needs(x) {
                        let part = g.data()[offset..offset + len].to_vec();
                        acc(x, Array::new(v(x).shape().to_vec(), part)?);
                    }
                    offset += len;
                }
            }
            Op::GatherRows(x, idx) => {
                let mut dx = Array::zeros(v(*x).shape());
                let c = dx.shape()[1];
                for (k, &i) in idx.iter().enumerate() {
                    let src = &g.data()[k * c..(k + 1) * c];
                    for (d, s) in dx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                acc(*x, dx);
            }
            Op::SoftmaxRows { x, tau } => {
                let n = out.shape()[1];
                let mut dx = Array::zeros(out.shape());
                if n > 0 {
                    for ((dxr, yr), gr) in dx
                        .data_mut()
                        .chunks_mut(n)
                        .zip(out.data().chunks(n))
                        .zip(g.data().chunks(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, y), ge) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d = y * (ge - dot) / tau;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::SegmentMax { x, seg } => {
                let xv = v(*x);
                let (m, cols) = xv.dims2()?;
                let q = cols / seg;
                let mut dx = Array::zeros(xv.shape());
                for r in 0..m {
                    let row = xv.row(r);
                    for s in 0..q {
                        let (i, _) = argmax(&row[s * seg..(s + 1) * seg]);
                        dx.data_mut()[r * cols + s * seg + i] += g.data()[r * q + s];
                    }
                }
                acc(*x, dx);
            }
            Op::TraceLog(x) => {
                let xv = v(*x);
                let n = xv.shape()[0];
                let mut dx = Array::zeros(xv.shape());
                for i in 0..n {
                    dx.data_mut()[i * n + i] = g.data()[0] / xv.get2(i, i);
                }
                acc(*x, dx);
            }
            Op::L2NormalizeRows { x, eps } => {
                let xv = v(*x);
                let n = xv.shape()[1];
                let mut dx = Array::zeros(xv.shape());
                if n > 0 {
                    for (((dxr, xr), yr), gr) in dx
                        .data_mut()
                        .chunks_mut(n)
                        .zip(xv.data().chunks(n))
                        .zip(out.data().chunks(n))
                        .zip(g.data().chunks(n))
                    {
                        let norm = row_norm(xr);
                        if norm >= *eps {
                            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                            for ((d, y), ge) in dxr.iter_mut().zip(yr).zip(gr) {
                                *d = (ge - y * dot) / norm;
                            }
                        } else {
                            for (d, ge) in dxr.iter_mut().zip(gr) {
                                *d = ge / eps;
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::SumAll(x) => acc(*x, Array::filled(v(*x).shape(), g.data()[0])),
        }
        Ok(())
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be positive, got {tau}")))
    }
}

/// First index of the maximum value.
pub(crate) fn argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, xs[0]);
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

fn softmax_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for e in row.iter_mut() {
        *e = ((*e - max) / tau).exp();
        total += *e;
    }
    row.iter_mut().for_each(|e| *e /= total);
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|e| e * e).sum::<f64>().sqrt()
}

fn zip_with(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape().to_vec(), data).expect("same shape")
}
