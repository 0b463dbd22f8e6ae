//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every training step. Each op appends a node whose
//! operands all have smaller indices, so reverse insertion order is a valid
//! reverse topological order and backward visits every node at most once.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Norms below this are rejected by [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, f64),
    Tanh(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    Embedding { table: Var, ids: Vec<usize> },
    MeanPool { x: Var, mask: Vec<bool>, count: usize },
    StackRows(Vec<Var>),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    BceWithLogits { logits: Var, labels: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients of leaf and parameter nodes.
///
/// Repeated [`Tape::backward_into`] calls add into the same buffers, one
/// upstream contribution at a time, in reverse node order.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(var.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients in parameter-id order. Parameters that were on the
    /// tape but not reached by backward are omitted.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .params
            .iter()
            .filter_map(|&(id, var)| self.wrt(var).map(|g| (id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta.to_vec()),
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input not owned by a [`ParamStore`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Record a parameter. The same id always maps to the same node, so
    /// shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&var) = self.param_vars.get(&id) {
            return var;
        }
        let var = self.push(store.get(id).clone(), Op::Param);
        self.param_vars.insert(id, var);
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.matrix_dims()?;
        if tb.rank() != 2 || tb.shape()[0] != k {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let n = tb.shape()[1];
        let (x, y) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = x[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, bpj) in row.iter_mut().zip(&y[p * n..(p + 1) * n]) {
                    *o += aip * bpj;
                }
            }
        }
        let shape = if ta.rank() == 2 { vec![m, n] } else { vec![n] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for row-major `a[m×d]`, `b[n×d]`; the cosine matrix of unit rows.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, d) = ta.matrix_dims()?;
        let (n, d2) = tb.matrix_dims()?;
        if d != d2 {
            return Err(Error::shape("matmul_nt", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ai = &ta.data()[i * d..(i + 1) * d];
            for j in 0..n {
                let bj = &tb.data()[j * d..(j + 1) * d];
                out[i * n + j] = dot(ai, bj);
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    pub fn cosine_sim_matrix(&mut self, contexts: Var, responses: Var) -> Result<Var> {
        self.matmul_nt(contexts, responses)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.matrix_dims()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds vector `bias[n]` to every row of `x[m×n]` (or to `x[n]`).
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = tx.matrix_dims()?;
        if tb.len() != n || tb.rank() > 1 {
            return Err(Error::shape("add_row_bias", tx.shape(), tb.shape()));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % n])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRowBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())
            .expect("same shape");
        self.push(value, Op::Scale(x, factor))
    }

    /// `x / divisor`, e.g. similarity scores over a temperature.
    pub fn div_scalar(&mut self, x: Var, divisor: f64) -> Result<Var> {
        if divisor == 0.0 || !divisor.is_finite() {
            return Err(Error::degenerate("div_scalar", format!("divisor {divisor}")));
        }
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v / divisor).collect())?;
        Ok(self.push(value, Op::DivScalar(x, divisor)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.tanh()).collect())
            .expect("same shape");
        self.push(value, Op::Tanh(x))
    }

    /// Column-wise concatenation `[a | b]` of equal-row operands.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, p) = ta.matrix_dims()?;
        let (m2, q) = tb.matrix_dims()?;
        if m != m2 || ta.rank() != tb.rank() || ta.rank() == 0 {
            return Err(Error::shape("concat_cols", ta.shape(), tb.shape()));
        }
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&ta.data()[i * p..(i + 1) * p]);
            out.extend_from_slice(&tb.data()[i * q..(i + 1) * q]);
        }
        let shape = if ta.rank() == 2 { vec![m, p + q] } else { vec![p + q] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Vertical concatenation of `a[m×d]` over `b[n×d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, d) = ta.matrix_dims()?;
        let (n, d2) = tb.matrix_dims()?;
        if d != d2 || ta.rank() == 0 || tb.rank() == 0 {
            return Err(Error::shape("concat_rows", ta.shape(), tb.shape()));
        }
        let mut out = Vec::with_capacity((m + n) * d);
        out.extend_from_slice(ta.data());
        out.extend_from_slice(tb.data());
        let value = Tensor::matrix(m + n, d, out)?;
        Ok(self.push(value, Op::ConcatRows(a, b)))
    }

    /// Row gather `table[ids]`; backward scatter-adds into the gathered rows.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding_lookup", t.shape(), &[]));
        }
        if ids.is_empty() {
            return Err(Error::degenerate("embedding_lookup", "empty id sequence"));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    op: "embedding_lookup",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean of the rows of `x[len×d]` whose mask entry is set.
    pub fn mean_pool_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (len, d) = t.matrix_dims()?;
        if mask.len() != len {
            return Err(Error::shape("mean_pool_masked", t.shape(), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::degenerate("mean_pool_masked", "mask has no set entries"));
        }
        let mut out = vec![0.0; d];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            out.iter_mut().zip(t.row(i)).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(
            Tensor::vector(out),
            Op::MeanPool {
                x,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (len, _) = self.value(x).matrix_dims()?;
        self.mean_pool_masked(x, &vec![true; len])
    }

    /// Stack equal-length vectors into a `[B×d]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::degenerate("stack_rows", "no rows"))?;
        let d = self.value(*first).len();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 1 || t.len() != d {
                return Err(Error::shape("stack_rows", &[d], t.shape()));
            }
            out.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows.len(), d, out)?;
        Ok(self.push(value, Op::StackRows(rows.to_vec())))
    }

    /// Row-wise `x / ‖x‖₂`. A vector is normalized as a single row.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, d) = t.matrix_dims()?;
        let mut out = Vec::with_capacity(m * d);
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &t.data()[i * d..(i + 1) * d];
            let norm = dot(row, row).sqrt();
            if !(norm > NORM_EPS) {
                return Err(Error::degenerate(
                    "l2_normalize",
                    format!("row {i} has norm {norm:e}"),
                ));
            }
            out.extend(row.iter().map(|v| v / norm));
            norms.push(norm);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }))
    }

    /// Mean over rows of `-log softmax(logits_i)[target_i]`, computed with
    /// row-max subtraction.
    pub fn softmax_cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, n) = t.matrix_dims()?;
        if targets.len() != b {
            return Err(Error::shape("softmax_cross_entropy_rows", t.shape(), &[targets.len()]));
        }
        let mut probs = Vec::with_capacity(b * n);
        let mut total = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            if target >= n {
                return Err(Error::Index {
                    op: "softmax_cross_entropy_rows",
                    index: target,
                    bound: n,
                });
            }
            let row = &t.data()[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[target];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        let value = Tensor::scalar(total / b as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy over all elements of `logits`, in the
    /// `max(z,0) - z·y + ln(1 + e^{-|z|})` form.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if labels.len() != t.len() {
            return Err(Error::shape("bce_with_logits", t.shape(), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::degenerate("bce_with_logits", format!("label {bad} not in {{0,1}}")));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Inverted dropout: identity when `train` is false, otherwise each entry
    /// is zeroed with probability `rate` and survivors scaled by `1/(1-rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Some(rng) = rng.filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let t = self.value(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut grads = Gradients {
            leaves: vec![None; self.nodes.len()],
            params: Vec::new(),
        };
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Backpropagate from scalar `loss`, adding leaf/parameter gradients into
    /// `grads`. Intermediate gradients are local to this call.
    pub fn backward_into(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.value(loss).shape(), &[]));
        }
        if grads.leaves.len() < self.nodes.len() {
            grads.leaves.resize(self.nodes.len(), None);
        }
        grads.params = {
            let mut p: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
            p.sort_by_key(|(id, _)| *id);
            p
        };

        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            let mut send = |target: Var, delta: &[f64]| {
                if matches!(self.nodes[target.0].op, Op::Leaf | Op::Param) {
                    accumulate(&mut grads.leaves[target.0], delta);
                } else {
                    accumulate(&mut local[target.0], delta);
                }
            };
            match &node.op {
                // the loss itself is a leaf
                Op::Leaf | Op::Param => send(Var(i), &g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.matrix_dims()?;
                    let n = tb.shape()[1];
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            da[i * k + p] = dot(gi, brow);
                            let aip = ta.data()[i * k + p];
                            db[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(d, gv)| *d += aip * gv);
                        }
                    }
                    send(*a, &da);
                    send(*b, &db);
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, d) = ta.matrix_dims()?;
                    let (n, _) = tb.matrix_dims()?;
                    let mut da = vec![0.0; m * d];
                    let mut db = vec![0.0; n * d];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let (ai, bj) = (&ta.data()[i * d..(i + 1) * d], &tb.data()[j * d..(j + 1) * d]);
                            da[i * d..(i + 1) * d].iter_mut().zip(bj).for_each(|(x, y)| *x += gij * y);
                            db[j * d..(j + 1) * d].iter_mut().zip(ai).for_each(|(x, y)| *x += gij * y);
                        }
                    }
                    send(*a, &da);
                    send(*b, &db);
                }
                Op::Transpose(x) => {
                    let (m, n) = self.value(*x).matrix_dims()?;
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = g[j * m + i];
                        }
                    }
                    send(*x, &dx);
                }
                Op::Add(a, b) => {
                    send(*a, &g);
                    send(*b, &g);
                }
                Op::AddRowBias(x, bias) => {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    g.iter().enumerate().for_each(|(i, v)| db[i % n] += v);
                    send(*x, &g);
                    send(*bias, &db);
                }
                Op::Scale(x, factor) => {
                    let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    send(*x, &dx);
                }
                Op::DivScalar(x, divisor) => {
                    let dx: Vec<f64> = g.iter().map(|v| v / divisor).collect();
                    send(*x, &dx);
                }
                Op::Tanh(x) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    send(*x, &dx);
                }
                Op::ConcatCols(a, b) => {
                    let (m, p) = self.value(*a).matrix_dims()?;
                    let (_, q) = self.value(*b).matrix_dims()?;
                    let mut da = Vec::with_capacity(m * p);
                    let mut db = Vec::with_capacity(m * q);
                    for i in 0..m {
                        let row = &g[i * (p + q)..(i + 1) * (p + q)];
                        da.extend_from_slice(&row[..p]);
                        db.extend_from_slice(&row[p..]);
                    }
                    send(*a, &da);
                    send(*b, &db);
                }
                Op::ConcatRows(a, b) => {
                    let split = self.value(*a).len();
                    send(*a, &g[..split]);
                    send(*b, &g[split..]);
                }
                Op::Embedding { table, ids } => {
                    let t = self.value(*table);
                    let d = t.shape()[1];
                    let mut dt = vec![0.0; t.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(x, y)| *x += y);
                    }
                    send(*table, &dt);
                }
                Op::MeanPool { x, mask, count } => {
                    let d = g.len();
                    let inv = 1.0 / *count as f64;
                    let mut dx = vec![0.0; mask.len() * d];
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        dx[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(x, y)| *x = y * inv);
                    }
                    send(*x, &dx);
                }
                Op::StackRows(rows) => {
                    let d = g.len() / rows.len();
                    for (r, &row) in rows.iter().enumerate() {
                        send(row, &g[r * d..(r + 1) * d]);
                    }
                }
                Op::L2NormalizeRows { x, norms } => {
                    // d x̂ = (I - x̂ x̂ᵀ) dx / ‖x‖
                    let y = node.value.data();
                    let d = y.len() / norms.len();
                    let mut dx = vec![0.0; y.len()];
                    for (r, norm) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let proj = dot(yr, gr);
                        for c in 0..d {
                            dx[r * d + c] = (gr[c] - yr[c] * proj) / norm;
                        }
                    }
                    send(*x, &dx);
                }
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let b = targets.len();
                    let n = probs.len() / b;
                    let scale = g[0] / b as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * n + t] -= scale;
                    }
                    send(*logits, &dl);
                }
                Op::BceWithLogits { logits, labels } => {
                    let scale = g[0] / labels.len() as f64;
                    let dz: Vec<f64> = self
                        .value(*logits)
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                        .collect();
                    send(*logits, &dz);
                }
                Op::Dropout { x, mask } => {
                    let dx: Vec<f64> = g.iter().zip(mask).map(|(a, b)| a * b).collect();
                    send(*x, &dx);
                }
            }
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic function, evaluated without overflow for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut tape = Tape::new();
        let eye = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 1, vec![0.0, 5.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn embedding_lookup_rows_and_repeated_ids() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let row0 = tape.embedding_lookup(table, &[0]).unwrap();
        assert_eq!(tape.value(row0).data(), &[1.0, 2.0]);

        let rep = tape.embedding_lookup(table, &[2, 2]).unwrap();
        let pooled = tape.mean_rows(rep).unwrap();
        // sum of outputs, so upstream gradient is all ones on each looked-up row
        let ones = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let s = tape.matmul(pooled, ones).unwrap();
        let s = tape.scale(s, 2.0);
        let grads = tape.backward(s).unwrap();
        let g = grads.wrt(table).unwrap();
        assert_eq!(g, &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_lookup_rejects_out_of_range() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::zeros(vec![3, 2]));
        match tape.embedding_lookup(table, &[1, 7]) {
            Err(Error::Index { index: 7, bound: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mean_pool_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let p = tape.mean_pool_masked(x, &[true]).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0]);

        let x = tape.leaf(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap());
        let p = tape.mean_pool_masked(x, &[true, true]).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 1.0]);

        assert!(matches!(
            tape.mean_pool_masked(x, &[false, false]),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn l2_normalize_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.l2_normalize(x).unwrap();
        assert!(close(tape.value(y).data()[0], 0.6, 1e-15));
        assert!(close(tape.value(y).data()[1], 0.8, 1e-15));

        let z = tape.leaf(Tensor::vector(vec![0.0, 1e-14]));
        assert!(matches!(tape.l2_normalize(z), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn l2_normalize_gradient_is_tangent() {
        // scaling direction of a unit vector is the vector itself; the
        // Jacobian annihilates it
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.6, 0.8]));
        let y = tape.l2_normalize(x).unwrap();
        let dir = tape.leaf(Tensor::matrix(2, 1, vec![0.6, 0.8]).unwrap());
        let s = tape.matmul(y, dir).unwrap();
        let grads = tape.backward(s).unwrap();
        let g = grads.wrt(x).unwrap();
        assert!(close(dot(g, &[0.6, 0.8]), 0.0, 1e-15));
    }

    #[test]
    fn cosine_matrix_spot_values() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap());
        let s = tape.cosine_sim_matrix(u, u).unwrap();
        assert!(close(tape.value(s).item(), 1.0, 1e-15));

        let c = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let s = tape.cosine_sim_matrix(c, c).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_spot_values() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap());
        let ce = tape.softmax_cross_entropy_rows(l, &[0]).unwrap();
        assert!(close(tape.value(ce).item(), (1.0 + (-2.0f64).exp()).ln(), 1e-15));
        assert!(close(tape.value(ce).item(), 0.126928, 1e-6));

        let single = tape.leaf(Tensor::matrix(3, 1, vec![5.0, -1.0, 0.0]).unwrap());
        let ce = tape.softmax_cross_entropy_rows(single, &[0, 0, 0]).unwrap();
        assert_eq!(tape.value(ce).item(), 0.0);

        assert!(matches!(
            tape.softmax_cross_entropy_rows(l, &[2]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn bce_spot_values() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0));
        let one = tape.bce_with_logits(z, &[1.0]).unwrap();
        let zero = tape.bce_with_logits(z, &[0.0]).unwrap();
        assert!(close(tape.value(one).item(), std::f64::consts::LN_2, 1e-15));
        assert!(close(tape.value(zero).item(), std::f64::consts::LN_2, 1e-15));

        let z3 = tape.leaf(Tensor::scalar(3.0));
        let l = tape.bce_with_logits(z3, &[1.0]).unwrap();
        assert!(close(tape.value(l).item(), 0.048587, 1e-6));

        let huge = tape.leaf(Tensor::vector(vec![800.0, -800.0]));
        let l = tape.bce_with_logits(huge, &[0.0, 1.0]).unwrap();
        assert!(close(tape.value(l).item(), 800.0, 1e-9));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_inverted_in_train() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0; 1000]));
        let same = tape.dropout::<ChaCha8Rng>(x, 0.2, None).unwrap();
        assert_eq!(same, x);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = tape.dropout(x, 0.2, Some(&mut rng)).unwrap();
        let vals = tape.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || close(v, 1.25, 1e-15)));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((700..900).contains(&kept), "{kept}");
    }

    #[test]
    fn shared_param_is_a_single_node() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let ones = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let loss = tape.matmul(s, ones).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.param_grads(), vec![(id, vec![2.0, 2.0])]);
    }
}
