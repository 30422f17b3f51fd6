//! Reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; calling
//! [`Tape::backward`] on a scalar node walks the list in reverse and
//! accumulates gradients into the tape's inputs and into a [`ParamSet`].
//! Everything is `f64` so analytic gradients can be validated against central
//! finite differences to tight tolerances.
//!
//! Vectors are 1×d rows, scalars are 1×1 matrices, sequences are N×d
//! matrices. Shape violations are programming errors and panic.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
pub type Var = usize;

/// Handle to a parameter in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

struct ParamEntry {
    name: String,
    value: Array2<f64>,
    adam_m: Array2<f64>,
    adam_v: Array2<f64>,
    trainable: bool,
}

/// Gradients for every parameter of a [`ParamSet`], kept outside the set so
/// per-item backward passes can run in parallel over shared read-only
/// parameters and reduce in a fixed order.
pub struct GradStore {
    grads: Vec<Array2<f64>>,
}

impl GradStore {
    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn add_from(&mut self, other: &GradStore) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            *g *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .fold(0.0_f64, |acc, &g| acc.max(g.abs()))
    }
}

/// Named parameter tensors with Adam moments.
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let shape = value.raw_dim();
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            adam_m: Array2::zeros(shape),
            adam_v: Array2::zeros(shape),
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Zeroed gradient storage matching this set's layout.
    pub fn grad_store(&self) -> GradStore {
        GradStore {
            grads: self
                .entries
                .iter()
                .map(|e| Array2::zeros(e.value.raw_dim()))
                .collect(),
        }
    }

    /// Marks exactly the parameters whose name matches `pred` as trainable.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            e.trainable = pred(&e.name);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// One Adam update over the trainable parameters. `step` is 1-based and
    /// drives bias correction; frozen parameters (value and moments) are left
    /// untouched byte-for-byte.
    pub fn adam_step(
        &mut self,
        grads: &GradStore,
        step: usize,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        assert_eq!(self.entries.len(), grads.grads.len());
        let bc1 = 1.0 - beta1.powi(step as i32);
        let bc2 = 1.0 - beta2.powi(step as i32);
        for (e, grad) in self.entries.iter_mut().zip(&grads.grads) {
            if !e.trainable {
                continue;
            }
            for ((w, &g), (m, v)) in e
                .value
                .iter_mut()
                .zip(grad.iter())
                .zip(e.adam_m.iter_mut().zip(e.adam_v.iter_mut()))
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// SHA-256 over the little-endian bytes of every parameter whose name
    /// matches `pred`, in insertion order. Used by the frozen-stage contract
    /// tests to prove bit-identity.
    pub fn digest_where(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut bytes = Vec::new();
        for e in &self.entries {
            if pred(&e.name) {
                bytes.extend_from_slice(e.name.as_bytes());
                for &v in e.value.iter() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        crate::util::sha256_hex(&bytes)
    }

    /// Exports `(name, tensor)` pairs for checkpointing.
    pub fn export_tensors(&self) -> Vec<(String, Array2<f64>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Restores parameter values by name. Every parameter in the set must be
    /// present in `tensors` with a matching shape.
    pub fn import_tensors(&mut self, tensors: &[(String, Array2<f64>)]) -> Result<()> {
        let by_name: HashMap<&str, &Array2<f64>> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for e in &mut self.entries {
            let t = by_name.get(e.name.as_str()).ok_or_else(|| {
                Error::format(format!("checkpoint is missing tensor '{}'", e.name))
            })?;
            if t.raw_dim() != e.value.raw_dim() {
                return Err(Error::format(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value.assign(t);
        }
        Ok(())
    }
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.clone(),
                    adam_m: e.adam_m.clone(),
                    adam_v: e.adam_v.clone(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

enum Op {
    Const,
    Input,
    Param(usize),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Embedding(Var, Vec<usize>),
    MeanRows(Var),
    SumAll(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        row_stats: Vec<(f64, f64)>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NllRows(Var, Vec<usize>),
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// One recorded forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<ParamId, Var>,
}

const LN_EPS: f64 = 1e-5;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v].value
    }

    /// Gradient of the last `backward` call w.r.t. an input/const node.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v].grad.as_ref()
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// A differentiable leaf; its gradient is retrievable after `backward`.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Brings a parameter onto the tape (cached: one node per parameter).
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Param(id.0), true);
        self.param_cache.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a].value.raw_dim(), self.nodes[b].value.raw_dim());
        let value = &self.nodes[a].value + &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// `a` (n×d) plus row vector `b` (1×d) broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[b].value.nrows(), 1);
        assert_eq!(self.nodes[a].value.ncols(), self.nodes[b].value.ncols());
        let value = &self.nodes[a].value + &self.nodes[b].value.row(0);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::AddRow(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a].value.raw_dim(), self.nodes[b].value.raw_dim());
        let value = &self.nodes[a].value * &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a].value * c;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.nodes[a].value.ncols(),
            self.nodes[b].value.nrows(),
            "matmul inner dims"
        );
        let value = self.nodes[a].value.dot(&self.nodes[b].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a].value.t().to_owned();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[a].value.slice(s![.., start..start + len]).to_owned();
        let ng = self.needs(a);
        self.push(value, Op::SliceCols(a, start, len), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[a].value.slice(s![start..start + len, ..]).to_owned();
        let ng = self.needs(a);
        self.push(value, Op::SliceRows(a, start, len), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&v| self.nodes[v].value.view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols shapes");
        let ng = parts.iter().any(|&v| self.needs(v));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&v| self.nodes[v].value.view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows shapes");
        let ng = parts.iter().any(|&v| self.needs(v));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Gathers `ids` rows from an embedding table node.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = &self.nodes[table].value;
        let mut value = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).assign(&t.row(id));
        }
        let ng = self.needs(table);
        self.push(value, Op::Embedding(table, ids.to_vec()), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a].value;
        let value = v
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        let ng = self.needs(a);
        self.push(value, Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a].value.sum());
        let ng = self.needs(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a].value.mapv(gelu_scalar);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a].value.mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Row-wise layer normalization with learnable 1×d scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = &self.nodes[x].value;
        let d = xv.ncols() as f64;
        let mut value = Array2::zeros(xv.raw_dim());
        let mut row_stats = Vec::with_capacity(xv.nrows());
        let g = self.nodes[gamma].value.row(0).to_owned();
        let b = self.nodes[beta].value.row(0).to_owned();
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for (j, &v) in row.iter().enumerate() {
                value[[i, j]] = (v - mean) * rstd * g[j] + b[j];
            }
            row_stats.push((mean, rstd));
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                row_stats,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let xv = &self.nodes[a].value;
        let mut value = xv.clone();
        for mut row in value.outer_iter_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let xv = &self.nodes[a].value;
        let mut value = xv.clone();
        for mut row in value.outer_iter_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|v| v - lse);
        }
        let ng = self.needs(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    /// Sum over rows of the negative log-probability at each row's target
    /// column. `a` must hold row-wise log-probabilities; output is 1×1.
    pub fn nll_rows(&mut self, a: Var, targets: &[usize]) -> Var {
        let lp = &self.nodes[a].value;
        assert_eq!(lp.nrows(), targets.len(), "nll target count");
        let total: f64 = targets.iter().enumerate().map(|(i, &t)| -lp[[i, t]]).sum();
        let value = Array2::from_elem((1, 1), total);
        let ng = self.needs(a);
        self.push(value, Op::NllRows(a, targets.to_vec()), ng)
    }

    fn add_grad(&mut self, v: Var, delta: &Array2<f64>) {
        if !self.nodes[v].needs_grad {
            return;
        }
        match &mut self.nodes[v].grad {
            Some(g) => *g += delta,
            slot => {
                *slot = Some(delta.clone());
            }
        }
    }

    /// Backpropagates from a 1×1 loss node. Parameter gradients accumulate
    /// into `grads`; input-node gradients stay on the tape.
    pub fn backward(&mut self, loss: Var, grads: &mut GradStore) {
        assert_eq!(
            self.nodes[loss].value.raw_dim(),
            ndarray::Dim([1, 1]),
            "backward expects a scalar loss"
        );
        self.nodes[loss].grad = Some(Array2::ones((1, 1)));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            // Param leaves flush into the ParamSet; everything else
            // propagates to parents.
            match &self.nodes[i].op {
                Op::Const | Op::Input => {
                    self.nodes[i].grad = Some(g);
                    continue;
                }
                Op::Param(idx) => {
                    grads.grads[*idx] += &g;
                    continue;
                }
                _ => {}
            }
            match std::mem::replace(&mut self.nodes[i].op, Op::Const) {
                Op::Const | Op::Input | Op::Param(_) => unreachable!(),
                Op::Add(a, b) => {
                    self.add_grad(a, &g);
                    self.add_grad(b, &g);
                    self.nodes[i].op = Op::Add(a, b);
                }
                Op::AddRow(a, b) => {
                    self.add_grad(a, &g);
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.add_grad(b, &gb);
                    self.nodes[i].op = Op::AddRow(a, b);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b].value;
                    let gb = &g * &self.nodes[a].value;
                    self.add_grad(a, &ga);
                    self.add_grad(b, &gb);
                    self.nodes[i].op = Op::Mul(a, b);
                }
                Op::Scale(a, c) => {
                    let ga = &g * c;
                    self.add_grad(a, &ga);
                    self.nodes[i].op = Op::Scale(a, c);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b].value.t());
                    let gb = self.nodes[a].value.t().dot(&g);
                    self.add_grad(a, &ga);
                    self.add_grad(b, &gb);
                    self.nodes[i].op = Op::MatMul(a, b);
                }
                Op::Transpose(a) => {
                    let ga = g.t().to_owned();
                    self.add_grad(a, &ga);
                    self.nodes[i].op = Op::Transpose(a);
                }
                Op::SliceCols(a, start, len) => {
                    let mut ga = Array2::zeros(self.nodes[a].value.raw_dim());
                    ga.slice_mut(s![.., start..start + len]).assign(&g);
                    self.add_grad(a, &ga);
                    self.nodes[i].op = Op::SliceCols(a, start, len);
                }
                Op::SliceRows(a, start, len) => {
                    let mut ga = Array2::zeros(self.nodes[a].value.raw_dim());
                    ga.slice_mut(s![start..start + len, ..]).assign(&g);
                    self.add_grad(a, &ga);
                    self.nodes[i].op = Op::SliceRows(a, start, len);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in &parts {
                        let w = self.nodes[p].value.ncols();
                        let gp = g.slice(s![.., offset..offset + w]).to_owned();
                        self.add_grad(p, &gp);
                        offset += w;
                    }
                    self.nodes[i].op = Op::ConcatCols(parts);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in &parts {
                        let h = self.nodes[p].value.nrows();
                        let gp = g.slice(s![offset..offset + h, ..]).to_owned();
                        self.add_grad(p, &gp);
                        offset += h;
                    }
                    self.nodes[i].op = Op::ConcatRows(parts);
                }
                Op::Embedding(table, ids) => {
                    let mut gt = Array2::zeros(self.nodes[table].value.raw_dim());
                    for (row, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(row);
                    }
                    self.add_grad(table, &gt);
                    self.nodes[i].op = Op::Embedding(table, ids);
                }
                Op::MeanRows(a) => {
                    let n = self.nodes[a].value.nrows() as f64;
                    let row = &g.row(0) / n;
                    let ga = Array2::from_shape_fn(self.nodes[a].value.raw_dim(), |(_, j)| row[j]);
                    self.add_grad(a, &ga);
                    self.nodes[i].op = Op::MeanRows(a);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.nodes[a].value.raw_dim(), g[[0, 0]]);
                    self.add_grad(a, &ga);
                    self.nodes[i].op = Op::SumAll(a);
                }
                Op::Gelu(a) => {
                    let ga = &g * &self.nodes[a].value.mapv(gelu_grad_scalar);
                    self.add_grad(a, &ga);
                    self.nodes[i].op = Op::Gelu(a);
                }
                Op::Relu(a) => {
                    let ga = &g * &self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    self.add_grad(a, &ga);
                    self.nodes[i].op = Op::Relu(a);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    row_stats,
                } => {
                    let xv = &self.nodes[x].value;
                    let d = xv.ncols();
                    let gv = self.nodes[gamma].value.row(0).to_owned();
                    let mut gx = Array2::zeros(xv.raw_dim());
                    let mut ggamma = Array2::zeros((1, d));
                    let mut gbeta = Array2::zeros((1, d));
                    for (r, (mean, rstd)) in row_stats.iter().enumerate() {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            let dxhat = gr[j] * gv[j];
                            ggamma[[0, j]] += gr[j] * xhat;
                            gbeta[[0, j]] += gr[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            let dxhat = gr[j] * gv[j];
                            gx[[r, j]] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    self.add_grad(x, &gx);
                    self.add_grad(gamma, &ggamma);
                    self.add_grad(beta, &gbeta);
                    self.nodes[i].op = Op::LayerNorm {
                        x,
                        gamma,
                        beta,
                        row_stats,
                    };
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut ga = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| g[[r, j]] * y[[r, j]]).sum();
                        for j in 0..y.ncols() {
                            ga[[r, j]] = y[[r, j]] * (g[[r, j]] - dot);
                        }
                    }
                    self.add_grad(a, &ga);
                    self.nodes[i].op = Op::SoftmaxRows(a);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut ga = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let gsum: f64 = (0..y.ncols()).map(|j| g[[r, j]]).sum();
                        for j in 0..y.ncols() {
                            ga[[r, j]] = g[[r, j]] - y[[r, j]].exp() * gsum;
                        }
                    }
                    self.add_grad(a, &ga);
                    self.nodes[i].op = Op::LogSoftmaxRows(a);
                }
                Op::NllRows(a, targets) => {
                    let mut ga = Array2::zeros(self.nodes[a].value.raw_dim());
                    let gs = g[[0, 0]];
                    for (r, &t) in targets.iter().enumerate() {
                        ga[[r, t]] = -gs;
                    }
                    self.add_grad(a, &ga);
                    self.nodes[i].op = Op::NllRows(a, targets);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
