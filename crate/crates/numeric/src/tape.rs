//! Reverse-mode differentiation over a linear recording of operations.
//!
//! A [`Tape`] is filled by forward calls that each push one node holding the
//! computed value and the operation that produced it. [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints; parameter leaves
//! forward their adjoint into the owning [`ParamStore`].

use crate::tensor::matmul_into;
use crate::{NumericError, ParamStore, Result, Tensor};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    SoftmaxRows(Var),
    Slice { src: Var, start: usize },
    GatherRows { src: Var, idx: Vec<usize> },
    ScatterAddRows { src: Var, idx: Vec<usize> },
    ScaleRows { src: Var, weights: Var },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Min(Var, Var),
    Max(Var, Var),
    ClampMax(Var, f64),
    MeanRows(Var),
    Sum(Var),
    SumSquares(Var),
    Mse { pred: Var, target: Tensor },
    Bce { prob: Var, target: Tensor, mean: bool },
    CrossEntropy { prob: Var, target: Tensor },
    Kl { mu: Var, log_var: Var },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    requires_grad: bool,
}

/// Single-threaded recording context.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub(crate) fn in_prob_range(p: f64) -> bool {
    (PROB_EPS..=1.0 - PROB_EPS).contains(&p)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of one clamped probability.
pub fn bce_scalar(p: f64, t: f64) -> f64 {
    let p = clamp_prob(p);
    -(t * libm::log(p) + (1.0 - t) * libm::log(1.0 - p))
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            other => inputs(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Whether gradients flow from `v` back to at least one parameter.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Trainable leaf bound to `store[name]`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    /// Leaf holding the current value of `store[name]` with no gradient path.
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        Ok(self.constant(value))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericError::shape(op, ta, tb));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a bias of `cols` entries to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() {
            return Err(NumericError::shape("add_bias", tx, tb));
        }
        let q = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % q])
            .collect();
        let value = Tensor::new(vec![tx.rows(), q], data)?;
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    /// `x · w + b` with `x: n×p`, `w: p×q`, `b: q`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.cols() != tw.rows() || tb.len() != tw.cols() {
            return Err(NumericError::Shape {
                op: "affine",
                left: format!("{:?}", tx.shape()),
                right: format!("{:?} + {:?}", tw.shape(), tb.shape()),
            });
        }
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("min", a, b, |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("max", a, b, |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, libm::exp, Op::Exp(x))
    }

    /// Elementwise `min(x, c)`; the gradient is zero where the bound is active.
    pub fn clamp_max(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| if v > c { c } else { v }, Op::ClampMax(x, c))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, q) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(n * q);
        for i in 0..n {
            let row = tx.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| libm::exp(v - m)).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / z));
        }
        let value = Tensor::new(vec![n, q], data).expect("softmax shape");
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Flat slice `[start, start + numel(shape))` of `x`'s row-major data, reshaped.
    pub fn slice(&mut self, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let tx = self.value(x);
        if start + len > tx.len() {
            return Err(NumericError::Shape {
                op: "slice",
                left: format!("{:?}", tx.shape()),
                right: format!("[{start}..{}] as {shape:?}", start + len),
            });
        }
        let value = Tensor::new(shape.to_vec(), tx.data()[start..start + len].to_vec())?;
        Ok(self.push(value, Op::Slice { src: x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != self.value(x).len() {
            return Err(NumericError::Shape {
                op: "reshape",
                left: format!("{:?}", self.value(x).shape()),
                right: format!("{shape:?}"),
            });
        }
        self.slice(x, 0, shape)
    }

    /// Row `k` of the output is row `idx[k]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let q = tx.cols();
        if idx.is_empty() {
            return Err(NumericError::Empty("gather_rows"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= tx.rows()) {
            return Err(NumericError::Index {
                op: "gather_rows",
                index: bad,
                len: tx.rows(),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * q);
        for &i in idx {
            data.extend_from_slice(tx.row(i));
        }
        let value = Tensor::new(vec![idx.len(), q], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                src: x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Output row `r` is the sum of the rows `k` of `x` with `idx[k] == r`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let tx = self.value(x);
        if idx.len() != tx.rows() {
            return Err(NumericError::Index {
                op: "scatter_add_rows",
                index: idx.len(),
                len: tx.rows(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(NumericError::Index {
                op: "scatter_add_rows",
                index: bad,
                len: n_out,
            });
        }
        let q = tx.cols();
        let mut out = Tensor::zeros(&[n_out, q]);
        for (k, &r) in idx.iter().enumerate() {
            let src = tx.row(k);
            for (o, v) in out.data_mut()[r * q..(r + 1) * q].iter_mut().zip(src) {
                *o += v;
            }
        }
        Ok(self.push(
            out,
            Op::ScatterAddRows {
                src: x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Multiplies row `k` of `x` by `weights[k]`.
    pub fn scale_rows(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weights));
        if tw.len() != tx.rows() {
            return Err(NumericError::shape("scale_rows", tx, tw));
        }
        let q = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * tw.data()[i / q])
            .collect();
        let value = Tensor::new(vec![tx.rows(), q], data)?;
        Ok(self.push(value, Op::ScaleRows { src: x, weights }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumericError::Empty("concat_cols"))?;
        let n = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != n {
                return Err(NumericError::shape("concat_cols", self.value(first), self.value(p)));
            }
        }
        let q: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(n * q);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![n, q], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumericError::Empty("concat_rows"))?;
        let q = self.value(first).cols();
        for &p in parts {
            if self.value(p).cols() != q {
                return Err(NumericError::shape("concat_rows", self.value(first), self.value(p)));
            }
        }
        let n: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(n * q);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![n, q], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Column means, as a `1 × q` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, q) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; q];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(tx.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let value = Tensor::new(vec![1, q], out).expect("mean_rows shape");
        self.push(value, Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    /// Sum of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let mut acc = *iter.next().ok_or(NumericError::Empty("add_all"))?;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Mean squared difference against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let tp = self.value(pred);
        if tp.len() != target.len() {
            return Err(NumericError::shape("mse", tp, target));
        }
        let s: f64 = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let value = Tensor::scalar(s / tp.len() as f64);
        Ok(self.push(
            value,
            Op::Mse {
                pred,
                target: target.clone(),
            },
        ))
    }

    fn bce_impl(&mut self, prob: Var, target: &Tensor, mean: bool) -> Result<Var> {
        let tp = self.value(prob);
        if tp.len() != target.len() {
            return Err(NumericError::shape("bce", tp, target));
        }
        let s: f64 = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| bce_scalar(p, t))
            .sum();
        let s = if mean { s / tp.len() as f64 } else { s };
        Ok(self.push(
            Tensor::scalar(s),
            Op::Bce {
                prob,
                target: target.clone(),
                mean,
            },
        ))
    }

    /// `−mean(t·ln p + (1−t)·ln(1−p))` with clamped `p`.
    pub fn bce(&mut self, prob: Var, target: &Tensor) -> Result<Var> {
        self.bce_impl(prob, target, true)
    }

    /// Like [`Tape::bce`] but summed instead of averaged.
    pub fn bce_sum(&mut self, prob: Var, target: &Tensor) -> Result<Var> {
        self.bce_impl(prob, target, false)
    }

    /// `−Σ t·ln p` over all entries, `p` clamped.
    pub fn cross_entropy(&mut self, prob: Var, target: &Tensor) -> Result<Var> {
        let tp = self.value(prob);
        if tp.len() != target.len() {
            return Err(NumericError::shape("cross_entropy", tp, target));
        }
        let s: f64 = tp
            .data()
            .iter()
            .zip(target.data())
            .filter(|(_, &t)| t != 0.0)
            .map(|(&p, &t)| -t * libm::log(clamp_prob(p)))
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::CrossEntropy {
                prob,
                target: target.clone(),
            },
        ))
    }

    /// KL divergence of `N(mu, diag(exp(log_var)))` from the standard normal.
    pub fn kl_diag_gaussian(&mut self, mu: Var, log_var: Var) -> Result<Var> {
        self.same_shape("kl_diag_gaussian", mu, log_var)?;
        let s = kl_diag_gaussian(self.value(mu).data(), self.value(log_var).data());
        Ok(self.push(Tensor::scalar(s), Op::Kl { mu, log_var }))
    }

    /// Accumulates `∂loss/∂p` into the gradient slot of every parameter leaf.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let tl = self.value(loss);
        if !tl.is_scalar() {
            return Err(NumericError::NotScalar(tl.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => store.accumulate_grad(name, &g)?,
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, p, q) = (ta.rows(), ta.cols(), tb.cols());
                    if self.requires_grad(*a) {
                        // dA = G · Bᵀ
                        let mut ga = vec![0.0; n * p];
                        for r in 0..n {
                            let g_row = &g[r * q..(r + 1) * q];
                            for k in 0..p {
                                let b_row = &tb.data()[k * q..(k + 1) * q];
                                ga[r * p + k] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.requires_grad(*b) {
                        // dB = Aᵀ · G
                        let mut gb = vec![0.0; p * q];
                        let at = transpose(ta.data(), n, p);
                        matmul_into(&at, &g, &mut gb, p, n, q);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddBias(x, b) => {
                    let q = self.value(*b).len();
                    let mut gb = vec![0.0; q];
                    for (k, v) in g.iter().enumerate() {
                        gb[k % q] += v;
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(node.op, Op::Min(..));
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut ga = vec![0.0; g.len()];
                    let mut gb = vec![0.0; g.len()];
                    for k in 0..g.len() {
                        let (x, y) = (ta.data()[k], tb.data()[k]);
                        let pick_a = if is_min { x <= y } else { x >= y };
                        if pick_a {
                            ga[k] = g[k];
                        } else {
                            gb[k] = g[k];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, g.iter().map(|v| v * c).collect());
                }
                Op::Relu(x) => {
                    let tx = self.value(*x);
                    let gx = g
                        .iter()
                        .zip(tx.data())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let gx = g
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = g.iter().zip(node.value.data()).map(|(a, b)| a * b).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::ClampMax(x, c) => {
                    let tx = self.value(*x);
                    let gx = g
                        .iter()
                        .zip(tx.data())
                        .map(|(gv, &xv)| if xv > *c { 0.0 } else { *gv })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let (n, q) = (y.rows(), y.cols());
                    let mut gx = vec![0.0; n * q];
                    for r in 0..n {
                        let yr = y.row(r);
                        let gr = &g[r * q..(r + 1) * q];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..q {
                            gx[r * q + k] = yr[k] * (gr[k] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Slice { src, start } => {
                    let mut gx = vec![0.0; self.value(*src).len()];
                    gx[*start..*start + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *src, gx);
                }
                Op::GatherRows { src, idx } => {
                    let ts = self.value(*src);
                    let q = ts.cols();
                    let mut gx = vec![0.0; ts.len()];
                    for (k, &r) in idx.iter().enumerate() {
                        for c in 0..q {
                            gx[r * q + c] += g[k * q + c];
                        }
                    }
                    accumulate(&mut grads, *src, gx);
                }
                Op::ScatterAddRows { src, idx } => {
                    let ts = self.value(*src);
                    let q = ts.cols();
                    let mut gx = Vec::with_capacity(ts.len());
                    for &r in idx {
                        gx.extend_from_slice(&g[r * q..(r + 1) * q]);
                    }
                    accumulate(&mut grads, *src, gx);
                }
                Op::ScaleRows { src, weights } => {
                    let (ts, tw) = (self.value(*src), self.value(*weights));
                    let q = ts.cols();
                    let mut gs = vec![0.0; ts.len()];
                    let mut gw = vec![0.0; tw.len()];
                    for k in 0..ts.len() {
                        let r = k / q;
                        gs[k] = g[k] * tw.data()[r];
                        gw[r] += g[k] * ts.data()[k];
                    }
                    accumulate(&mut grads, *src, gs);
                    accumulate(&mut grads, *weights, gw);
                }
                Op::ConcatCols(parts) => {
                    let n = node.value.rows();
                    let q = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pq = self.value(p).cols();
                        let mut gp = Vec::with_capacity(n * pq);
                        for r in 0..n {
                            gp.extend_from_slice(&g[r * q + offset..r * q + offset + pq]);
                        }
                        offset += pq;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        accumulate(&mut grads, p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::MeanRows(x) => {
                    let tx = self.value(*x);
                    let (n, q) = (tx.rows(), tx.cols());
                    let inv = 1.0 / n as f64;
                    let mut gx = Vec::with_capacity(n * q);
                    for _ in 0..n {
                        gx.extend(g.iter().map(|v| v * inv));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![g[0]; len]);
                }
                Op::SumSquares(x) => {
                    let gx = self.value(*x).data().iter().map(|v| 2.0 * v * g[0]).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mse { pred, target } => {
                    let tp = self.value(*pred);
                    let scale = 2.0 * g[0] / tp.len() as f64;
                    let gx = tp
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(p, t)| scale * (p - t))
                        .collect();
                    accumulate(&mut grads, *pred, gx);
                }
                Op::Bce { prob, target, mean } => {
                    let tp = self.value(*prob);
                    let scale = if *mean { g[0] / tp.len() as f64 } else { g[0] };
                    let gx = tp
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| {
                            if in_prob_range(p) {
                                scale * (-(t / p) + (1.0 - t) / (1.0 - p))
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *prob, gx);
                }
                Op::CrossEntropy { prob, target } => {
                    let tp = self.value(*prob);
                    let gx = tp
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| {
                            if t != 0.0 && in_prob_range(p) {
                                -g[0] * t / p
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *prob, gx);
                }
                Op::Kl { mu, log_var } => {
                    let gm = self.value(*mu).data().iter().map(|m| g[0] * m).collect();
                    let gl = self
                        .value(*log_var)
                        .data()
                        .iter()
                        .map(|&lv| g[0] * 0.5 * (libm::exp(lv) - 1.0))
                        .collect();
                    accumulate(&mut grads, *mu, gm);
                    accumulate(&mut grads, *log_var, gl);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Constant | Op::Param(_) => vec![],
        Op::MatMul(a, b)
        | Op::AddBias(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Min(a, b)
        | Op::Max(a, b) => vec![*a, *b],
        Op::Scale(x, _)
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Exp(x)
        | Op::SoftmaxRows(x)
        | Op::ClampMax(x, _)
        | Op::MeanRows(x)
        | Op::Sum(x)
        | Op::SumSquares(x) => vec![*x],
        Op::Slice { src, .. } | Op::GatherRows { src, .. } | Op::ScatterAddRows { src, .. } => vec![*src],
        Op::ScaleRows { src, weights } => vec![*src, *weights],
        Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        Op::Mse { pred, .. } => vec![*pred],
        Op::Bce { prob, .. } | Op::CrossEntropy { prob, .. } => vec![*prob],
        Op::Kl { mu, log_var } => vec![*mu, *log_var],
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&g) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn transpose(a: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for k in 0..p {
            out[k * n + i] = a[i * p + k];
        }
    }
    out
}

/// `½ Σ (μ² + exp(log σ²) − 1 − log σ²)`.
pub fn kl_diag_gaussian(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(&m, &lv)| m * m + libm::exp(lv) - 1.0 - lv)
        .sum::<f64>()
}
