//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is built eagerly: every operation computes its value when it
//! is recorded, and [`Graph::backward`] walks the tape in reverse to produce
//! exact gradients. Operations are fused at the granularity the model needs
//! (layer norm, batch norm, grouped multi-head attention, contrastive NLL),
//! each with a hand-derived backward rule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    ColumnAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        probs: Vec<Matrix>,
    },
    MeanPool(Var, usize),
    ConcatRows(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Nll {
        logits: Var,
        targets: Vec<usize>,
        excluded: Vec<Option<usize>>,
        probs: Matrix,
    },
    HalfSumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics computed by a train-mode batch norm, for the caller to
/// fold into running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient of `v`; zero when no path connects `v` to the loss.
    pub fn of(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient per named parameter. Parameters the loss does not depend on
    /// are omitted.
    pub fn by_name(&self) -> BTreeMap<String, Matrix> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.grads[v.0].clone().map(|g| (name.clone(), g)))
            .collect()
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Row-wise softmax with row-max subtraction, in place.
pub(crate) fn softmax_rows_in_place(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Normalize each row over its features; returns (xhat, 1/std per row).
fn normalize_rows(x: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let d = x.cols() as f64;
    let mut xhat = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = xhat.row_mut(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv.push(is);
    }
    (xhat, inv)
}

/// Per-column batch statistics (population variance).
pub(crate) fn column_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mut mean = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

fn scale_columns(xhat: &Matrix, gamma: &Matrix, beta: &Matrix) -> Matrix {
    let mut out = xhat.clone();
    for r in 0..out.rows() {
        for ((o, g), b) in out.row_mut(r).iter_mut().zip(gamma.data()).zip(beta.data()) {
            *o = *o * g + b;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable leaf that is not tracked by name.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Param, true)
    }

    /// Named differentiable leaf. Registering the same name twice returns the
    /// first node.
    pub fn param(&mut self, name: &str, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Named leaf that is recorded as a constant (frozen parameter).
    pub fn frozen(&mut self, name: &str, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.push(value.clone(), Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let n = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), n)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let n = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulNT(a, b), n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), self.value(b).shape(), "add shapes");
        value.add_assign(self.value(b));
        let n = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), n)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let value = hadamard(self.value(a), self.value(b));
        let n = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), n)
    }

    /// `x + 1·bias` with `bias` a 1xC row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!((1, self.value(x).cols()), b.shape(), "row bias shape");
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            for (o, bv) in value.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let n = self.needs(x) || self.needs(bias);
        self.push(value, Op::AddRow(x, bias), n)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let n = self.needs(x);
        self.push(value, Op::Scale(x, s), n)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let n = self.needs(x);
        self.push(value, Op::Gelu(x), n)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let n = self.needs(x);
        self.push(value, Op::Relu(x), n)
    }

    /// Per-row layer normalization followed by `· gain + shift` (1xD rows).
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Var {
        let (xhat, inv_std) = normalize_rows(self.value(x), eps);
        let value = scale_columns(&xhat, self.value(gain), self.value(shift));
        let n = self.needs(x) || self.needs(gain) || self.needs(shift);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            n,
        )
    }

    /// Train-mode batch norm over the rows of `x`. Returns the batch
    /// statistics alongside the output node.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (mean, var) = column_stats(xv);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for r in 0..xhat.rows() {
            for ((o, m), is) in xhat.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
                *o = (*o - m) * is;
            }
        }
        let value = scale_columns(&xhat, self.value(gamma), self.value(beta));
        let n = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            n,
        );
        (v, BatchStats { mean, var })
    }

    /// Eval-mode batch norm: normalize with fixed statistics.
    pub fn column_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = self.value(x).clone();
        for r in 0..xhat.rows() {
            for ((o, m), is) in xhat.row_mut(r).iter_mut().zip(mean).zip(&inv_std) {
                *o = (*o - m) * is;
            }
        }
        let value = scale_columns(&xhat, self.value(gamma), self.value(beta));
        let n = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::ColumnAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            n,
        )
    }

    /// Multi-head scaled dot-product attention applied independently to
    /// consecutive groups of `group` rows. Head `h` uses the column block
    /// `[h·dh, (h+1)·dh)` of `q`, `k`, `v`; outputs are concatenated in the
    /// same column layout.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, group: usize, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qm.shape(), km.shape(), "attention q/k shapes");
        assert_eq!(qm.shape(), vm.shape(), "attention q/v shapes");
        let (rows, d) = qm.shape();
        assert!(group > 0 && rows % group == 0, "rows not a multiple of group");
        assert!(heads > 0 && d % heads == 0, "d_model not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(rows, d);
        let mut probs = Vec::with_capacity(rows / group * heads);
        for s in 0..rows / group {
            let base = s * group;
            for h in 0..heads {
                let col = h * dh;
                let mut p = Matrix::zeros(group, group);
                for i in 0..group {
                    let qi = &qm.row(base + i)[col..col + dh];
                    for j in 0..group {
                        let kj = &km.row(base + j)[col..col + dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        p.set(i, j, dot * scale);
                    }
                }
                softmax_rows_in_place(&mut p);
                for i in 0..group {
                    let orow = &mut out.row_mut(base + i)[col..col + dh];
                    for j in 0..group {
                        let w = p.get(i, j);
                        let vj = &vm.row(base + j)[col..col + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let n = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            },
            n,
        )
    }

    /// Attention probability matrices recorded by an attention node, in
    /// (group, head) order.
    pub fn attention_maps(&self, v: Var) -> Option<&[Matrix]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        assert!(group > 0 && xv.rows().is_multiple_of(group), "mean_pool group");
        let groups = xv.rows() / group;
        let mut out = Matrix::zeros(groups, xv.cols());
        for r in 0..xv.rows() {
            for (o, v) in out.row_mut(r / group).iter_mut().zip(xv.row(r)) {
                *o += v / group as f64;
            }
        }
        let n = self.needs(x);
        self.push(out, Op::MeanPool(x, group), n)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(self.value(p).cols(), cols, "concat_rows cols");
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let value = Matrix::from_vec(rows, cols, data).expect("concat shape");
        let n = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), n)
    }

    /// Scale each row to unit L2 norm. An all-zero row maps to the first
    /// standard basis vector and passes no gradient.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            } else {
                row.fill(0.0);
                if let Some(first) = row.first_mut() {
                    *first = 1.0;
                }
            }
            norms.push(norm);
        }
        let n = self.needs(x);
        self.push(value, Op::L2NormalizeRows { x, norms }, n)
    }

    /// Mean negative log-likelihood over rows of `logits`:
    /// `-logits[i, t_i] + log Σ_{k ≠ excluded_i} exp(logits[i, k])`.
    /// With no exclusions this is ordinary softmax cross-entropy.
    pub fn nll(&mut self, logits: Var, targets: &[usize], excluded: &[Option<usize>]) -> Var {
        let lm = self.value(logits);
        let (rows, cols) = lm.shape();
        assert_eq!(targets.len(), rows, "nll targets");
        assert_eq!(excluded.len(), rows, "nll exclusions");
        let mut probs = Matrix::zeros(rows, cols);
        let mut total = 0.0;
        for i in 0..rows {
            let row = lm.row(i);
            let skip = excluded[i];
            let max = row
                .iter()
                .enumerate()
                .filter(|(k, _)| Some(*k) != skip)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, &v) in row.iter().enumerate() {
                if Some(k) != skip {
                    let e = (v - max).exp();
                    probs.set(i, k, e);
                    sum += e;
                }
            }
            for k in 0..cols {
                probs.set(i, k, probs.get(i, k) / sum);
            }
            total += max + sum.ln() - row[targets[i]];
        }
        let value = Matrix::filled(1, 1, total / rows as f64);
        let n = self.needs(logits);
        self.push(
            value,
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                excluded: excluded.to_vec(),
                probs,
            },
            n,
        )
    }

    /// `Σ x² / 2`
    pub fn half_sum_squares(&mut self, x: Var) -> Var {
        let value = Matrix::filled(1, 1, 0.5 * self.value(x).frobenius_sq());
        let n = self.needs(x);
        self.push(value, Op::HalfSumSquares(x), n)
    }

    /// Reverse sweep from the 1x1 node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, gy: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, gy.matmul_nt(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(gy));
                }
            }
            Op::MatMulNT(a, b) => {
                // y = a bᵀ: da = gy b, db = gyᵀ a
                if self.needs(*a) {
                    self.accumulate(grads, *a, gy.matmul(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gy.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, hadamard(gy, self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, hadamard(gy, self.value(*a)));
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, gy.clone());
                if self.needs(*bias) {
                    self.accumulate(grads, *bias, column_sums(gy));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, gy.scale(*s)),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut g = gy.clone();
                for (o, &xi) in g.data_mut().iter_mut().zip(xv.data()) {
                    *o *= gelu_grad(xi);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut g = gy.clone();
                for (o, &xi) in g.data_mut().iter_mut().zip(xv.data()) {
                    if xi <= 0.0 {
                        *o = 0.0;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gain);
                if self.needs(*gain) {
                    self.accumulate(grads, *gain, column_sums(&hadamard(gy, xhat)));
                }
                if self.needs(*shift) {
                    self.accumulate(grads, *shift, column_sums(gy));
                }
                if self.needs(*x) {
                    let d = xhat.cols() as f64;
                    let mut dx = Matrix::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        let dxhat: Vec<f64> =
                            gy.row(r).iter().zip(g.data()).map(|(a, b)| a * b).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let dot: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / d;
                        for ((o, dh), xh) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                            *o = k * (d * dh - sum - xh * dot);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, column_sums(&hadamard(gy, xhat)));
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, column_sums(gy));
                }
                if self.needs(*x) {
                    let gm = self.value(*gamma);
                    let n = xhat.rows() as f64;
                    let mut dxhat = gy.clone();
                    for r in 0..dxhat.rows() {
                        for (o, gv) in dxhat.row_mut(r).iter_mut().zip(gm.data()) {
                            *o *= gv;
                        }
                    }
                    let sum = column_sums(&dxhat);
                    let dot = column_sums(&hadamard(&dxhat, xhat));
                    let mut dx = Matrix::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        for c in 0..xhat.cols() {
                            let v = inv_std[c] / n
                                * (n * dxhat.get(r, c) - sum.get(0, c) - xhat.get(r, c) * dot.get(0, c));
                            dx.set(r, c, v);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ColumnAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, column_sums(&hadamard(gy, xhat)));
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, column_sums(gy));
                }
                if self.needs(*x) {
                    let gm = self.value(*gamma);
                    let mut dx = gy.clone();
                    for r in 0..dx.rows() {
                        for ((o, gv), is) in dx.row_mut(r).iter_mut().zip(gm.data()).zip(inv_std) {
                            *o *= gv * is;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *group, *heads, probs, gy, grads),
            Op::MeanPool(x, group) => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let inv = 1.0 / *group as f64;
                for r in 0..xv.rows() {
                    for (o, g) in dx.row_mut(r).iter_mut().zip(gy.row(r / group)) {
                        *o = g * inv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.needs(p) {
                        let slice = gy.data()[at * cols..(at + rows) * cols].to_vec();
                        self.accumulate(grads, p, Matrix::from_vec(rows, cols, slice).unwrap());
                    }
                    at += rows;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    if norms[r] == 0.0 {
                        continue;
                    }
                    let dot: f64 = y.row(r).iter().zip(gy.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, yv), g) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(gy.row(r)) {
                        *o = (g - yv * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Nll {
                logits,
                targets,
                excluded,
                probs,
            } => {
                let up = gy.data()[0] / probs.rows() as f64;
                let mut dl = probs.clone();
                for i in 0..dl.rows() {
                    if let Some(e) = excluded[i] {
                        dl.set(i, e, 0.0);
                    }
                    let t = targets[i];
                    dl.set(i, t, dl.get(i, t) - 1.0);
                }
                self.accumulate(grads, *logits, dl.scale(up));
            }
            Op::HalfSumSquares(x) => {
                let s = gy.data()[0];
                self.accumulate(grads, *x, self.value(*x).scale(s));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        probs: &[Matrix],
        gy: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qm.shape();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Matrix::zeros(rows, d);
        let mut dk = Matrix::zeros(rows, d);
        let mut dv = Matrix::zeros(rows, d);
        let mut dp = Matrix::zeros(group, group);
        for s in 0..rows / group {
            let base = s * group;
            for h in 0..heads {
                let col = h * dh;
                let p = &probs[s * heads + h];
                // dV = Pᵀ dO ; dP = dO Vᵀ
                for i in 0..group {
                    let go = &gy.row(base + i)[col..col + dh];
                    for j in 0..group {
                        let w = p.get(i, j);
                        let dvj = &mut dv.row_mut(base + j)[col..col + dh];
                        for (o, g) in dvj.iter_mut().zip(go) {
                            *o += w * g;
                        }
                        let vj = &vm.row(base + j)[col..col + dh];
                        dp.set(i, j, go.iter().zip(vj).map(|(a, b)| a * b).sum());
                    }
                }
                // dS = P ⊙ (dP - rowsum(dP ⊙ P)), then through the scaled dot products.
                for i in 0..group {
                    let dot: f64 = (0..group).map(|j| dp.get(i, j) * p.get(i, j)).sum();
                    for j in 0..group {
                        let ds = p.get(i, j) * (dp.get(i, j) - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in col..col + dh {
                            let qi = qm.get(base + i, c);
                            let kj = km.get(base + j, c);
                            dq.set(base + i, c, dq.get(base + i, c) + ds * kj);
                            dk.set(base + j, c, dk.get(base + j, c) + ds * qi);
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Central-difference check of d(loss)/d(leaf) for every coordinate.
    fn check<F>(inputs: Vec<Matrix>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let eval = |inputs: &[Matrix]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
            let l = build(&mut g, &vars);
            g.scalar(l)
        };
        let h = 1e-5;
        for (vi, m) in inputs.iter().enumerate() {
            let analytic = grads.of(vars[vi], m.shape());
            for idx in 0..m.len() {
                let mut plus = inputs.clone();
                plus[vi].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {vi} coord {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn matmul_and_bias_grads() {
        let mut rng = RngStream::new(1);
        check(
            vec![random(3, 4, &mut rng), random(4, 2, &mut rng), random(1, 2, &mut rng), random(3, 2, &mut rng)],
            |g, v| {
                let y = g.matmul(v[0], v[1]);
                let y = g.add_row(y, v[2]);
                let y = g.mul(y, y);
                let z = g.matmul_nt(y, v[3]);
                let z = g.gelu(z);
                g.half_sum_squares(z)
            },
        );
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = RngStream::new(2);
        check(
            vec![random(3, 5, &mut rng), random(1, 5, &mut rng), random(1, 5, &mut rng), random(3, 5, &mut rng)],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
                let t = g.constant(Matrix::zeros(3, 5));
                let y = g.add(y, t);
                let z = g.matmul_nt(y, v[3]);
                g.half_sum_squares(z)
            },
        );
    }

    #[test]
    fn batch_norm_and_relu_grads() {
        let mut rng = RngStream::new(3);
        check(
            vec![random(4, 3, &mut rng), random(1, 3, &mut rng), random(1, 3, &mut rng), random(4, 3, &mut rng)],
            |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5);
                let y = g.relu(y);
                let z = g.matmul_nt(y, v[3]);
                g.half_sum_squares(z)
            },
        );
    }

    #[test]
    fn column_affine_grads() {
        let mut rng = RngStream::new(13);
        check(
            vec![random(4, 3, &mut rng), random(1, 3, &mut rng), random(1, 3, &mut rng)],
            |g, v| {
                let y = g.column_affine(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5);
                let y = g.gelu(y);
                g.half_sum_squares(y)
            },
        );
    }

    #[test]
    fn attention_grads() {
        let mut rng = RngStream::new(4);
        check(
            vec![random(6, 4, &mut rng), random(6, 4, &mut rng), random(6, 4, &mut rng), random(6, 4, &mut rng)],
            |g, v| {
                let a = g.attention(v[0], v[1], v[2], 3, 2);
                let m = g.matmul_nt(a, v[3]);
                g.half_sum_squares(m)
            },
        );
    }

    #[test]
    fn pool_norm_concat_nll_grads() {
        let mut rng = RngStream::new(5);
        check(
            vec![random(6, 3, &mut rng), random(2, 3, &mut rng)],
            |g, v| {
                let p = g.mean_pool(v[0], 3);
                let c = g.concat_rows(&[p, v[1]]);
                let n = g.l2_normalize_rows(c);
                let s = g.matmul_nt(n, n);
                let s = g.scale(s, 2.0);
                g.nll(s, &[2, 3, 0, 1], &[Some(0), Some(1), Some(2), Some(3)])
            },
        );
        check(vec![random(3, 4, &mut rng)], |g, v| {
            g.nll(v[0], &[1, 1, 3], &[None, Some(1), None])
        });
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param("p", &Matrix::filled(2, 2, 3.0));
        let z = g.scale(p, 0.0);
        let l = g.half_sum_squares(z);
        let grads = g.backward(l).unwrap();
        assert!(grads.by_name()["p"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_loss_gradient_is_identity() {
        let mut g = Graph::new();
        let value = Matrix::from_vec(1, 3, vec![1.5, -2.0, 0.25]).unwrap();
        let p = g.param("p", &value);
        let l = g.half_sum_squares(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.by_name()["p"], value);
    }

    #[test]
    fn zero_row_normalizes_to_first_basis() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::zeros(1, 3));
        let y = g.l2_normalize_rows(x);
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0]);
        let l = g.half_sum_squares(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.of(x, (1, 3)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::zeros(2, 2));
        assert!(g.backward(x).is_err());
    }
}
