use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::kernels;
use super::{DiffError, Tensor};

/// Identifies one parameter tensor: `group` names the owning store, `index`
/// the tensor within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamKey {
    pub group: u32,
    pub index: u32,
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// The closed set of differentiable primitives, for callers that dispatch on
/// an operation kind rather than calling the typed tape methods.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    /// `a · bᵀ`
    MatMulNt,
    Add,
    Scale(f64),
    Relu,
    Softmax,
    LogSoftmax,
    EmbeddingLookup(Vec<usize>),
    /// Inputs: `x`, gain row, bias row.
    LayerNorm,
    Concat(Axis),
    Slice { axis: Axis, start: usize, len: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamKey),
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var, broadcast: bool },
    Scale { a: Var, c: f64 },
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { a: Var, axis: Axis, start: usize, len: usize },
    Sum(Var),
    WeightedSum { a: Var, weights: Vec<f64> },
    ThresholdSte(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records a forward computation so that [`Tape::backward`] can return
/// exact gradients of a scalar with respect to every registered parameter.
///
/// Nodes are appended in evaluation order, so the node list is a topological
/// order and the backward sweep is a single reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.map.get(&key)
    }

    pub fn insert(&mut self, key: ParamKey, grad: Tensor) {
        self.map.insert(key, grad);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.map.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.map.keys().copied()
    }

    /// `self += factor · other`, inserting keys missing from `self`.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (k, g) in &other.map {
            match self.map.get_mut(k) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += factor * b;
                    }
                }
                None => {
                    let mut t = g.clone();
                    t.data_mut().iter_mut().for_each(|v| *v *= factor);
                    self.map.insert(*k, t);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Keeps only the gradients of one store.
    pub fn restrict_to_group(&self, group: u32) -> Gradients {
        Gradients {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.group == group)
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable parameter whose gradient `backward` will report.
    pub fn param(&mut self, key: ParamKey, value: Tensor) -> Var {
        self.push(value, Op::Param(key), true)
    }

    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, DiffError> {
        let arity = match &prim {
            Primitive::MatMul | Primitive::MatMulNt | Primitive::Add => 2,
            Primitive::LayerNorm => 3,
            Primitive::Concat(_) => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(DiffError::Arity {
                op: format!("{prim:?}"),
                expected: arity,
                got: inputs.len(),
            });
        }
        match prim {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::MatMulNt => self.matmul_nt(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Scale(c) => Ok(self.scale(inputs[0], c)),
            Primitive::Relu => Ok(self.relu(inputs[0])),
            Primitive::Softmax => Ok(self.softmax(inputs[0])),
            Primitive::LogSoftmax => Ok(self.log_softmax(inputs[0])),
            Primitive::EmbeddingLookup(ids) => self.embedding(inputs[0], &ids),
            Primitive::LayerNorm => self.layer_norm(inputs[0], inputs[1], inputs[2]),
            Primitive::Concat(axis) => self.concat(inputs, axis),
            Primitive::Slice { axis, start, len } => self.slice(inputs[0], axis, start, len),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (ta.dims(), tb.dims());
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_vec(m, n, out), Op::MatMul { a, b }, tracked))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (ta.dims(), tb.dims());
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_vec(m, n, out), Op::MatMulNt { a, b }, tracked))
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((r, c), (rb, cb)) = (ta.dims(), tb.dims());
        let broadcast = if (r, c) == (rb, cb) {
            false
        } else if rb == 1 && cb == c {
            true
        } else {
            return Err(shape_err("add", ta, tb));
        };
        let mut out = ta.data().to_vec();
        if broadcast {
            out.chunks_mut(c).for_each(|row| kernels::add_in_place(row, tb.data()));
        } else {
            kernels::add_in_place(&mut out, tb.data());
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_vec(r, c, out), Op::Add { a, b, broadcast }, tracked))
    }

    /// Elementwise product; `b` may be a broadcast row.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((r, c), (rb, cb)) = (ta.dims(), tb.dims());
        let broadcast = if (r, c) == (rb, cb) {
            false
        } else if rb == 1 && cb == c {
            true
        } else {
            return Err(shape_err("mul", ta, tb));
        };
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * if broadcast { tb.data()[i % c] } else { tb.data()[i] })
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_vec(r, c, out), Op::Mul { a, b, broadcast }, tracked))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let (r, cols) = ta.dims();
        let out = ta.data().iter().map(|v| v * c).collect();
        let tracked = self.tracked(a);
        self.push(Tensor::from_vec(r, cols, out), Op::Scale { a, c }, tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims();
        let out = ta.data().iter().map(|v| v.max(0.0)).collect();
        let tracked = self.tracked(a);
        self.push(Tensor::from_vec(r, c, out), Op::Relu(a), tracked)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims();
        let mut out = ta.data().to_vec();
        out.chunks_mut(c).for_each(kernels::softmax_in_place);
        let tracked = self.tracked(a);
        self.push(Tensor::from_vec(r, c, out), Op::Softmax(a), tracked)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims();
        let mut out = ta.data().to_vec();
        out.chunks_mut(c).for_each(kernels::log_softmax_in_place);
        let tracked = self.tracked(a);
        self.push(Tensor::from_vec(r, c, out), Op::LogSoftmax(a), tracked)
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, DiffError> {
        let tt = self.value(table);
        let (v, d) = tt.dims();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(DiffError::IndexOutOfRange { index: bad, bound: v });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row_slice(i));
        }
        let tracked = self.tracked(table);
        Ok(self.push(
            Tensor::from_vec(ids.len(), d, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, DiffError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = tx.dims();
        if tg.dims() != (1, c) {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.dims() != (1, c) {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut out = vec![0.0; r * c];
        let mut stats = Vec::with_capacity(r);
        for i in 0..r {
            stats.push(kernels::layer_norm_row(
                tx.row_slice(i),
                tg.data(),
                tb.data(),
                &mut out[i * c..(i + 1) * c],
            ));
        }
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            Tensor::from_vec(r, c, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            tracked,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, DiffError> {
        let first = parts.first().ok_or(DiffError::Arity {
            op: "concat".into(),
            expected: 1,
            got: 0,
        })?;
        let (r0, c0) = self.value(*first).dims();
        let value = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.cols() != c0 {
                        return Err(shape_err("concat", self.value(*first), t));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::from_vec(rows, c0, data)
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rows() != r0 {
                        return Err(shape_err("concat", self.value(*first), t));
                    }
                    cols += t.cols();
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                Tensor::from_vec(r0, cols, data)
            }
        };
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let (r, c) = ta.dims();
        let bound = if axis == Axis::Rows { r } else { c };
        if start + len > bound || len == 0 {
            return Err(DiffError::SliceOutOfRange {
                shape: ta.shape().to_vec(),
                start,
                len,
            });
        }
        let value = match axis {
            Axis::Rows => Tensor::from_vec(len, c, ta.data()[start * c..(start + len) * c].to_vec()),
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&ta.row_slice(i)[start..start + len]);
                }
                Tensor::from_vec(r, len, data)
            }
        };
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Slice { a, axis, start, len }, tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    /// `Σ w ⊙ a` for a constant weight array of `a`'s shape.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if ta.len() != weights.len() {
            return Err(shape_err("weighted_sum", ta, weights));
        }
        let s = kernels::dot(ta.data(), weights.data());
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                a,
                weights: weights.data().to_vec(),
            },
            tracked,
        ))
    }

    /// Forward: `1[a > 0]`. Backward: identity (straight-through).
    pub fn threshold_ste(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims();
        let out = ta.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let tracked = self.tracked(a);
        self.push(Tensor::from_vec(r, c, out), Op::ThresholdSte(a), tracked)
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, DiffError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new();
        let nodes = &self.nodes;

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            let val = &node.value;
            let (rows, cols) = val.dims();
            match &node.op {
                Op::Leaf => {}
                Op::Param(key) => {
                    let t = Tensor::new(val.shape().to_vec(), g).expect("param shape");
                    match out.map.get_mut(key) {
                        Some(acc) => kernels::add_in_place(acc.data_mut(), t.data()),
                        None => {
                            out.map.insert(*key, t);
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = ta.dims();
                    let n = tb.cols();
                    if nodes[a.0].tracked {
                        let da = accumulate(&mut grads[a.0], m * k);
                        kernels::gemm_nt(&g, tb.data(), da, m, n, k);
                    }
                    if nodes[b.0].tracked {
                        let db = accumulate(&mut grads[b.0], k * n);
                        kernels::gemm_tn(ta.data(), &g, db, k, m, n);
                    }
                }
                Op::MatMulNt { a, b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = ta.dims();
                    let n = tb.rows();
                    if nodes[a.0].tracked {
                        let da = accumulate(&mut grads[a.0], m * k);
                        kernels::gemm_nn(&g, tb.data(), da, m, n, k);
                    }
                    if nodes[b.0].tracked {
                        let db = accumulate(&mut grads[b.0], n * k);
                        kernels::gemm_tn(&g, ta.data(), db, n, m, k);
                    }
                }
                Op::Add { a, b, broadcast } => {
                    if nodes[a.0].tracked {
                        kernels::add_in_place(accumulate(&mut grads[a.0], g.len()), &g);
                    }
                    if nodes[b.0].tracked {
                        if *broadcast {
                            let db = accumulate(&mut grads[b.0], cols);
                            for row in g.chunks(cols) {
                                kernels::add_in_place(db, row);
                            }
                        } else {
                            kernels::add_in_place(accumulate(&mut grads[b.0], g.len()), &g);
                        }
                    }
                }
                Op::Mul { a, b, broadcast } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].tracked {
                        let da = accumulate(&mut grads[a.0], g.len());
                        for (idx, d) in da.iter_mut().enumerate() {
                            let bv = if *broadcast { tb.data()[idx % cols] } else { tb.data()[idx] };
                            *d += g[idx] * bv;
                        }
                    }
                    if nodes[b.0].tracked {
                        let db = accumulate(&mut grads[b.0], tb.len());
                        for (idx, gv) in g.iter().enumerate() {
                            let j = if *broadcast { idx % cols } else { idx };
                            db[j] += gv * ta.data()[idx];
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let da = accumulate(&mut grads[a.0], g.len());
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += c * gv;
                    }
                }
                Op::Relu(a) => {
                    let da = accumulate(&mut grads[a.0], g.len());
                    for ((d, gv), y) in da.iter_mut().zip(&g).zip(val.data()) {
                        if *y > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let da = accumulate(&mut grads[a.0], g.len());
                    for r in 0..rows {
                        let y = &val.data()[r * cols..(r + 1) * cols];
                        let gy = &g[r * cols..(r + 1) * cols];
                        let inner = kernels::dot(y, gy);
                        for j in 0..cols {
                            da[r * cols + j] += y[j] * (gy[j] - inner);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let da = accumulate(&mut grads[a.0], g.len());
                    for r in 0..rows {
                        let y = &val.data()[r * cols..(r + 1) * cols];
                        let gy = &g[r * cols..(r + 1) * cols];
                        let total: f64 = gy.iter().sum();
                        for j in 0..cols {
                            da[r * cols + j] += gy[j] - y[j].exp() * total;
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let len = nodes[table.0].value.len();
                    let dt = accumulate(&mut grads[table.0], len);
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::add_in_place(&mut dt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    let tx = &nodes[x.0].value;
                    let tg = &nodes[gain.0].value;
                    let n = cols as f64;
                    let mut dgain = vec![0.0; cols];
                    let mut dbias = vec![0.0; cols];
                    let mut dx = vec![0.0; rows * cols];
                    let mut xhat = vec![0.0; cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        let xr = tx.row_slice(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            xhat[j] = (xr[j] - mean) * rstd;
                            dxhat[j] = gr[j] * tg.data()[j];
                            dgain[j] += gr[j] * xhat[j];
                            dbias[j] += gr[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / n;
                        let m2 = kernels::dot(&dxhat, &xhat) / n;
                        for j in 0..cols {
                            dx[r * cols + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    if nodes[x.0].tracked {
                        kernels::add_in_place(accumulate(&mut grads[x.0], rows * cols), &dx);
                    }
                    if nodes[gain.0].tracked {
                        kernels::add_in_place(accumulate(&mut grads[gain.0], cols), &dgain);
                    }
                    if nodes[bias.0].tracked {
                        kernels::add_in_place(accumulate(&mut grads[bias.0], cols), &dbias);
                    }
                }
                Op::Concat { parts, axis } => match axis {
                    Axis::Rows => {
                        let mut offset = 0;
                        for p in parts {
                            let len = nodes[p.0].value.len();
                            if nodes[p.0].tracked {
                                kernels::add_in_place(accumulate(&mut grads[p.0], len), &g[offset..offset + len]);
                            }
                            offset += len;
                        }
                    }
                    Axis::Cols => {
                        let mut col0 = 0;
                        for p in parts {
                            let pc = nodes[p.0].value.cols();
                            if nodes[p.0].tracked {
                                let dp = accumulate(&mut grads[p.0], rows * pc);
                                for r in 0..rows {
                                    kernels::add_in_place(
                                        &mut dp[r * pc..(r + 1) * pc],
                                        &g[r * cols + col0..r * cols + col0 + pc],
                                    );
                                }
                            }
                            col0 += pc;
                        }
                    }
                },
                Op::Slice { a, axis, start, len } => {
                    let ta = &nodes[a.0].value;
                    let ac = ta.cols();
                    let da = accumulate(&mut grads[a.0], ta.len());
                    match axis {
                        Axis::Rows => kernels::add_in_place(&mut da[start * ac..(start + len) * ac], &g),
                        Axis::Cols => {
                            for r in 0..rows {
                                kernels::add_in_place(
                                    &mut da[r * ac + start..r * ac + start + len],
                                    &g[r * len..(r + 1) * len],
                                );
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let len = nodes[a.0].value.len();
                    let da = accumulate(&mut grads[a.0], len);
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::WeightedSum { a, weights } => {
                    let da = accumulate(&mut grads[a.0], weights.len());
                    for (d, w) in da.iter_mut().zip(weights) {
                        *d += g[0] * w;
                    }
                }
                Op::ThresholdSte(a) => {
                    kernels::add_in_place(accumulate(&mut grads[a.0], g.len()), &g);
                }
            }
        }
        // Registered parameters the loss never reached get an explicit zero.
        for node in nodes {
            if let Op::Param(key) = node.op {
                out.map
                    .entry(key)
                    .or_insert_with(|| Tensor::new(node.value.shape().to_vec(), vec![0.0; node.value.len()]).expect("param shape"));
            }
        }
        Ok(out)
    }
}
