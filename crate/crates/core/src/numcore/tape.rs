//! Reverse-mode differentiation over a linear tape of matrix primitives.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! already a reverse topological order. Parameters enter the tape through
//! [`Tape::param`], which copies the current value once per tape; after
//! [`Tape::backward`] their gradients are added back into the store.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{check_temperature, softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Drops every recorded node, saved activation and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.grads.clear();
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn row(&self, v: Var, i: usize) -> &[f64] {
        let n = self.node(v);
        &n.value[i * n.cols..(i + 1) * n.cols]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).unwrap()
    }

    /// Records a leaf. Its gradient is tracked iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a constant matrix.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "constant: shape/value mismatch");
        self.push(rows, cols, value, Op::Leaf, false)
    }

    /// Loads a parameter (once per tape) as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let t = store.get(id);
        let v = self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul of [{m}x{k}] by [{k2}x{n}]")));
        }
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for t in 0..k {
                let x = av[i * k + t];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[t * n..(t + 1) * n];
                for (cj, bj) in crow.iter_mut().zip(brow) {
                    *cj += x * bj;
                }
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(m, n, c, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt of [{m}x{k}] by transposed [{n}x{k2}]"
            )));
        }
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] = dot(arow, &bv[j * k..(j + 1) * k]);
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(m, n, c, Op::MatMulNt(a, b), ng))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(format!(
                "{what} of [{}x{}] and [{}x{}]",
                da.0, da.1, db.0, db.1
            )));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "add")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, v, Op::Add(a, b), ng))
    }

    /// Adds a `[1×c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(bias) != (1, c) {
            let (br, bc) = self.dims(bias);
            return Err(Error::shape(format!("add_row of [{r}x{c}] and [{br}x{bc}]")));
        }
        let b = self.value(bias);
        let v: Vec<f64> = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(&[a, bias]);
        Ok(self.push(r, c, v, Op::AddRow(a, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "mul")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, v, Op::Mul(a, b), ng))
    }

    /// `alpha * a + beta`, elementwise.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|x| alpha * x + beta).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, v, Op::Affine(a, alpha), ng)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        self.affine(a, alpha, 0.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, v, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Row-wise softmax of `a / temperature`.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        self.masked_softmax(a, temperature, None)
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries get probability zero. `mask` is row-major with `a`'s shape.
    pub fn masked_softmax(&mut self, a: Var, temperature: f64, mask: Option<&[bool]>) -> Result<Var> {
        check_temperature(temperature)?;
        let (r, c) = self.dims(a);
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::shape(format!(
                    "mask of {} entries for [{r}x{c}] scores",
                    m.len()
                )));
            }
        }
        let mut v = self.value(a).to_vec();
        for (i, row) in v.chunks_mut(c).enumerate() {
            softmax_in_place(row, temperature, mask.map(|m| &m[i * c..(i + 1) * c]))
                .map_err(|_| Error::contract(format!("row {i} has no attendable entry")))?;
        }
        let ng = self.ng(&[a]);
        Ok(self.push(r, c, v, Op::Softmax(a, temperature), ng))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.dims(x);
        if self.dims(gain) != (1, d) || self.dims(bias) != (1, d) {
            return Err(Error::shape(format!(
                "layer_norm over width {d} with gain {:?} and bias {:?}",
                self.dims(gain),
                self.dims(bias)
            )));
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            r,
            d,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Output row `r` is input row `idx[r]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.is_empty() {
            return Err(Error::shape("gather_rows with no indices"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!("row index {bad} out of range for {r} rows")));
        }
        let av = self.value(a);
        let mut v = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            v.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(idx.len(), c, v, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Output column `k` is input column `idx[k]`.
    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.is_empty() {
            return Err(Error::shape("select_cols with no indices"));
        }
        if let Some(bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::shape(format!("column index {bad} out of range for {c} columns")));
        }
        let av = self.value(a);
        let n = idx.len();
        let mut v = vec![0.0; r * n];
        for i in 0..r {
            for (k, &j) in idx.iter().enumerate() {
                v[i * n + k] = av[i * c + j];
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(r, n, v, Op::SelectCols(a, idx.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > c {
            return Err(Error::shape(format!("columns {start}..{} of width {c}", start + len)));
        }
        let av = self.value(a);
        let mut v = Vec::with_capacity(r * len);
        for i in 0..r {
            v.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(r, len, v, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|p| self.dims(*p).0)
            .ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        if parts.iter().any(|p| self.dims(*p).0 != r) {
            return Err(Error::shape("concat_cols row count mismatch"));
        }
        let c: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut v = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                v.extend_from_slice(self.row(*p, i));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(r, c, v, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|p| self.dims(*p).1)
            .ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        if parts.iter().any(|p| self.dims(*p).1 != c) {
            return Err(Error::shape("concat_rows column count mismatch"));
        }
        let mut v = Vec::new();
        for p in parts {
            v.extend_from_slice(self.value(*p));
        }
        let r = v.len() / c;
        let ng = self.ng(parts);
        Ok(self.push(r, c, v, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    /// Column means: `[r×c] → [1×c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut v = vec![0.0; c];
        for row in self.value(a).chunks(c) {
            for (acc, x) in v.iter_mut().zip(row) {
                *acc += x;
            }
        }
        v.iter_mut().for_each(|x| *x /= r as f64);
        let ng = self.ng(&[a]);
        self.push(1, c, v, Op::MeanRows(a), ng)
    }

    /// Summed cross-entropy of row-wise softmax(logits) against a per-row
    /// target distribution. Rows whose target is `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<Vec<f64>>]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::shape(format!("{} targets for {r} rows", targets.len())));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut target = vec![0.0; r * c];
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            if t.len() != c {
                return Err(Error::shape(format!("target row of width {} for {c} classes", t.len())));
            }
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                let logp = row[j] - lse;
                probs[i * c + j] = logp.exp();
                target[i * c + j] = t[j];
                if t[j] != 0.0 {
                    loss -= t[j] * logp;
                }
            }
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                probs,
                target,
            },
            ng,
        ))
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Propagates d(loss)/d(node) to every node that needs it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.dims(loss) != (1, 1) {
            let (r, c) = self.dims(loss);
            return Err(Error::contract(format!("backward from non-scalar [{r}x{c}]")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of every parameter on this tape into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.node(*a).needs_grad {
                    let da = slot(grads, *a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for t in 0..k {
                            da[i * k + t] += dot(grow, &bv[t * n..(t + 1) * n]);
                        }
                    }
                }
                if self.node(*b).needs_grad {
                    let db = slot(grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for t in 0..k {
                            let x = av[i * k + t];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, gj) in db[t * n..(t + 1) * n].iter_mut().zip(grow) {
                                *d += x * gj;
                            }
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.node(*a).needs_grad {
                    let da = slot(grads, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for (d, bj) in da[i * k..(i + 1) * k].iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                                *d += gij * bj;
                            }
                        }
                    }
                }
                if self.node(*b).needs_grad {
                    let db = slot(grads, *b, n * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for (d, ai) in db[j * k..(j + 1) * k].iter_mut().zip(&av[i * k..(i + 1) * k]) {
                                *d += gij * ai;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.node(*v).needs_grad {
                        add_into(slot(grads, *v, g.len()), g);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.node(*a).needs_grad {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.node(*bias).needs_grad {
                    let db = slot(grads, *bias, cols);
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.node(*a).needs_grad {
                    let da = slot(grads, *a, g.len());
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if self.node(*b).needs_grad {
                    let db = slot(grads, *b, g.len());
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Affine(a, alpha) => {
                let da = slot(grads, *a, g.len());
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += alpha * gi;
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let da = slot(grads, *a, g.len());
                for ((d, gi), x) in da.iter_mut().zip(g).zip(av) {
                    if *x > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let da = slot(grads, *a, g.len());
                for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let da = slot(grads, *a, g.len());
                for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                    *d += gi * (1.0 - yi * yi);
                }
            }
            Op::Softmax(a, t) => {
                let y = &node.value;
                let da = slot(grads, *a, g.len());
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let s = dot(yr, gr);
                    for j in 0..cols {
                        da[i * cols + j] += yr[j] * (gr[j] - s) / t;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = cols;
                let gv = self.value(*gain);
                if self.node(*x).needs_grad {
                    let dx = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for i in 0..rows {
                        let gr = &g[i * d..(i + 1) * d];
                        let hr = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = dot(&dxhat, hr);
                        let k = inv_std[i] / d as f64;
                        for j in 0..d {
                            dx[i * d + j] += k * (d as f64 * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                }
                if self.node(*gain).needs_grad {
                    let dg = slot(grads, *gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.node(*bias).needs_grad {
                    let db = slot(grads, *bias, d);
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let (ar, c) = self.dims(*a);
                let da = slot(grads, *a, ar * c);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut da[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::SelectCols(a, idx) => {
                let (ar, ac) = self.dims(*a);
                let da = slot(grads, *a, ar * ac);
                let n = idx.len();
                for i in 0..ar {
                    for (k, &j) in idx.iter().enumerate() {
                        da[i * ac + j] += g[i * n + k];
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let (ar, ac) = self.dims(*a);
                let da = slot(grads, *a, ar * ac);
                for i in 0..ar {
                    add_into(
                        &mut da[i * ac + start..i * ac + start + cols],
                        &g[i * cols..(i + 1) * cols],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (pr, pc) = self.dims(*p);
                    if self.node(*p).needs_grad {
                        let dp = slot(grads, *p, pr * pc);
                        for i in 0..pr {
                            add_into(
                                &mut dp[i * pc..(i + 1) * pc],
                                &g[i * cols + off..i * cols + off + pc],
                            );
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.node(*p).value.len();
                    if self.node(*p).needs_grad {
                        add_into(slot(grads, *p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Sum(a) => {
                let n = self.node(*a).value.len();
                let da = slot(grads, *a, n);
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::MeanRows(a) => {
                let (ar, c) = self.dims(*a);
                let da = slot(grads, *a, ar * c);
                let inv = 1.0 / ar as f64;
                for row in da.chunks_mut(c) {
                    for (d, gj) in row.iter_mut().zip(g) {
                        *d += gj * inv;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                target,
            } => {
                let (r, c) = self.dims(*logits);
                let dl = slot(grads, *logits, r * c);
                for i in 0..r {
                    let t = &target[i * c..(i + 1) * c];
                    let mass: f64 = t.iter().sum();
                    if mass == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        dl[i * c + j] += g[0] * (mass * probs[i * c + j] - t[j]);
                    }
                }
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, n: usize) -> &'g mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
