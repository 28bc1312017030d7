//! Differences between two recordings of one computation at nearby inputs.

use crate::tape::{bce_scalar, clamp_prob, in_prob_range, Op, Tape, Var};

impl Tape {
    /// `value(root)` on `self` minus `value(root)` on `other`, where both
    /// tapes were recorded by the same computation at nearby parameter values.
    ///
    /// Every node's difference is built from its inputs' differences using
    /// identities such as `exp(a) − exp(b) = exp(b)·expm1(a − b)`, so a
    /// difference many orders of magnitude below the values themselves keeps
    /// its relative accuracy. Elements on different sides of a kink, and
    /// tapes of different structure, fall back to plain subtraction.
    pub fn difference(&self, other: &Tape, root: Var) -> f64 {
        if self.nodes.len() != other.nodes.len() {
            return self.value(root).item() - other.value(root).item();
        }
        let mut diffs: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        for i in 0..=root.0 {
            let d = self.node_difference(other, i, &diffs);
            diffs.push(d);
        }
        diffs[root.0].as_ref().map_or(0.0, |d| d.iter().sum())
    }

    /// Whether every relu, min, max, clamp and probability clamp took the
    /// same branch on both tapes.
    pub fn same_branches(&self, other: &Tape) -> bool {
        if self.nodes.len() != other.nodes.len() {
            return false;
        }
        let band = |p: f64| {
            if in_prob_range(p) {
                0
            } else if p < 0.5 {
                -1
            } else {
                1
            }
        };
        (0..self.nodes.len()).all(|i| {
            let (a, b) = (&self.nodes[i], &other.nodes[i]);
            let both = |v: &Var| (self.value(*v).data(), other.value(*v).data());
            let all = |x: &[f64], y: &[f64], f: &dyn Fn(f64) -> i8| x.iter().zip(y).all(|(&p, &q)| f(p) == f(q));
            match (&a.op, &b.op) {
                (Op::Relu(x), Op::Relu(_)) => {
                    let (p, q) = both(x);
                    all(p, q, &|v| (v > 0.0) as i8)
                }
                (Op::ClampMax(x, c), Op::ClampMax(..)) => {
                    let (p, q) = both(x);
                    all(p, q, &|v| (v > *c) as i8)
                }
                (Op::Min(x, y), Op::Min(..)) | (Op::Max(x, y), Op::Max(..)) => {
                    let is_min = matches!(a.op, Op::Min(..));
                    let pick = |u: f64, w: f64| if is_min { u <= w } else { u >= w };
                    let ((xp, xm), (yp, ym)) = (both(x), both(y));
                    (0..xp.len()).all(|k| pick(xp[k], yp[k]) == pick(xm[k], ym[k]))
                }
                (Op::Bce { prob, .. }, Op::Bce { .. }) | (Op::CrossEntropy { prob, .. }, Op::CrossEntropy { .. }) => {
                    let (p, q) = both(prob);
                    all(p, q, &band)
                }
                (x, y) => std::mem::discriminant(x) == std::mem::discriminant(y),
            }
        })
    }

    fn node_difference(&self, other: &Tape, i: usize, diffs: &[Option<Vec<f64>>]) -> Option<Vec<f64>> {
        let (a, b) = (&self.nodes[i], &other.nodes[i]);
        let plain_at = |k: usize| a.value.data()[k] - b.value.data()[k];
        let plain = || nonzero((0..a.value.len()).map(plain_at).collect());
        if std::mem::discriminant(&a.op) != std::mem::discriminant(&b.op) || a.value.len() != b.value.len() {
            return plain();
        }
        match &a.op {
            Op::Constant => return None,
            Op::Param(_) => return plain(),
            op => {
                if crate::tape::inputs(op).iter().all(|v| diffs[v.0].is_none()) {
                    return None;
                }
            }
        }
        // Difference of an input, zeros when unchanged.
        let d = |v: &Var| -> Vec<f64> {
            diffs[v.0]
                .clone()
                .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
        };
        let hi = |v: &Var| self.nodes[v.0].value.data();
        let lo = |v: &Var| other.nodes[v.0].value.data();
        let len = a.value.len();

        let out: Vec<f64> = match &a.op {
            Op::Constant | Op::Param(_) => unreachable!(),
            Op::MatMul(x, y) => {
                let tx = &self.nodes[x.0].value;
                let (n, p, q) = (tx.rows(), tx.cols(), a.value.cols());
                let mut out = vec![0.0; n * q];
                if let Some(dx) = &diffs[x.0] {
                    mm_add(&mut out, dx, hi(y), n, p, q);
                }
                if let Some(dy) = &diffs[y.0] {
                    mm_add(&mut out, lo(x), dy, n, p, q);
                }
                out
            }
            Op::AddBias(x, bias) => {
                let q = a.value.cols();
                let (dx, db) = (d(x), d(bias));
                (0..len).map(|k| dx[k] + db[k % q]).collect()
            }
            Op::Add(x, y) => d(x).iter().zip(d(y)).map(|(p, q)| p + q).collect(),
            Op::Sub(x, y) => d(x).iter().zip(d(y)).map(|(p, q)| p - q).collect(),
            Op::Mul(x, y) => {
                let (dx, dy) = (d(x), d(y));
                (0..len).map(|k| dx[k] * hi(y)[k] + lo(x)[k] * dy[k]).collect()
            }
            Op::Scale(x, c) => d(x).iter().map(|v| c * v).collect(),
            Op::Relu(x) => {
                let dx = d(x);
                (0..len)
                    .map(|k| match (hi(x)[k] > 0.0, lo(x)[k] > 0.0) {
                        (true, true) => dx[k],
                        (false, false) => 0.0,
                        _ => plain_at(k),
                    })
                    .collect()
            }
            // σ(u) − σ(w) = σ(u)·(1 − σ(w))·(1 − e^{−(u − w)})
            Op::Sigmoid(x) => {
                let dx = d(x);
                let (yh, yl) = (a.value.data(), b.value.data());
                (0..len).map(|k| yh[k] * (1.0 - yl[k]) * -libm::expm1(-dx[k])).collect()
            }
            Op::Exp(x) => {
                let dx = d(x);
                let yl = b.value.data();
                (0..len).map(|k| yl[k] * libm::expm1(dx[k])).collect()
            }
            // s(u)_i − s(w)_i = s(w)_i·(E_i − S)/(1 + S), E = expm1(u − w), S = Σ s(w)_j·E_j
            Op::SoftmaxRows(x) => {
                let dx = d(x);
                let q = a.value.cols();
                let sl = b.value.data();
                let mut out = vec![0.0; len];
                for r in 0..len / q {
                    let e: Vec<f64> = (0..q).map(|j| libm::expm1(dx[r * q + j])).collect();
                    let s: f64 = (0..q).map(|j| sl[r * q + j] * e[j]).sum();
                    for j in 0..q {
                        out[r * q + j] = sl[r * q + j] * (e[j] - s) / (1.0 + s);
                    }
                }
                out
            }
            Op::Slice { src, start } => d(src)[*start..*start + len].to_vec(),
            Op::GatherRows { src, idx } => {
                let q = self.nodes[src.0].value.cols();
                let dx = d(src);
                idx.iter().flat_map(|&r| dx[r * q..(r + 1) * q].to_vec()).collect()
            }
            Op::ScatterAddRows { src, idx } => {
                let q = a.value.cols();
                let dx = d(src);
                let mut out = vec![0.0; len];
                for (m, &r) in idx.iter().enumerate() {
                    for c in 0..q {
                        out[r * q + c] += dx[m * q + c];
                    }
                }
                out
            }
            Op::ScaleRows { src, weights } => {
                let q = a.value.cols();
                let (dx, dw) = (d(src), d(weights));
                (0..len)
                    .map(|k| dx[k] * hi(weights)[k / q] + lo(src)[k] * dw[k / q])
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let (n, q) = (a.value.rows(), a.value.cols());
                let mut out = vec![0.0; len];
                let mut offset = 0;
                for part in parts {
                    let w = self.nodes[part.0].value.cols();
                    let dp = d(part);
                    for r in 0..n {
                        out[r * q + offset..r * q + offset + w].copy_from_slice(&dp[r * w..(r + 1) * w]);
                    }
                    offset += w;
                }
                out
            }
            Op::ConcatRows(parts) => parts.iter().flat_map(d).collect(),
            Op::Min(x, y) | Op::Max(x, y) => {
                let is_min = matches!(a.op, Op::Min(..));
                let pick = |u: f64, w: f64| if is_min { u <= w } else { u >= w };
                let (dx, dy) = (d(x), d(y));
                (0..len)
                    .map(|k| match (pick(hi(x)[k], hi(y)[k]), pick(lo(x)[k], lo(y)[k])) {
                        (true, true) => dx[k],
                        (false, false) => dy[k],
                        _ => plain_at(k),
                    })
                    .collect()
            }
            Op::ClampMax(x, c) => {
                let dx = d(x);
                (0..len)
                    .map(|k| match (hi(x)[k] > *c, lo(x)[k] > *c) {
                        (false, false) => dx[k],
                        (true, true) => 0.0,
                        _ => plain_at(k),
                    })
                    .collect()
            }
            Op::MeanRows(x) => {
                let tx = &self.nodes[x.0].value;
                let (n, q) = (tx.rows(), tx.cols());
                let dx = d(x);
                (0..q)
                    .map(|c| (0..n).map(|r| dx[r * q + c]).sum::<f64>() / n as f64)
                    .collect()
            }
            Op::Sum(x) => vec![d(x).iter().sum()],
            Op::SumSquares(x) => {
                let dx = d(x);
                vec![(0..dx.len()).map(|k| dx[k] * (hi(x)[k] + lo(x)[k])).sum()]
            }
            Op::Mse { pred, target } => {
                let dx = d(pred);
                let t = target.data();
                let s: f64 = (0..dx.len()).map(|k| dx[k] * (hi(pred)[k] + lo(pred)[k] - 2.0 * t[k])).sum();
                vec![s / dx.len() as f64]
            }
            Op::Bce { prob, target, mean } => {
                let dx = d(prob);
                let t = target.data();
                let s: f64 = (0..dx.len())
                    .map(|k| {
                        let (ph, pl) = (hi(prob)[k], lo(prob)[k]);
                        if in_prob_range(ph) && in_prob_range(pl) {
                            -t[k] * libm::log1p(dx[k] / pl) - (1.0 - t[k]) * libm::log1p(-dx[k] / (1.0 - pl))
                        } else if clamp_prob(ph) == clamp_prob(pl) {
                            0.0
                        } else {
                            bce_scalar(ph, t[k]) - bce_scalar(pl, t[k])
                        }
                    })
                    .sum();
                vec![if *mean { s / dx.len() as f64 } else { s }]
            }
            Op::CrossEntropy { prob, target } => {
                let dx = d(prob);
                let t = target.data();
                let s: f64 = (0..dx.len())
                    .filter(|&k| t[k] != 0.0)
                    .map(|k| {
                        let (ph, pl) = (hi(prob)[k], lo(prob)[k]);
                        if in_prob_range(ph) && in_prob_range(pl) {
                            -t[k] * libm::log1p(dx[k] / pl)
                        } else {
                            -t[k] * (libm::log(clamp_prob(ph)) - libm::log(clamp_prob(pl)))
                        }
                    })
                    .sum();
                vec![s]
            }
            Op::Kl { mu, log_var } => {
                let (dm, dl) = (d(mu), d(log_var));
                let s: f64 = (0..dm.len())
                    .map(|k| dm[k] * (hi(mu)[k] + lo(mu)[k]) + libm::exp(lo(log_var)[k]) * libm::expm1(dl[k]) - dl[k])
                    .sum();
                vec![0.5 * s]
            }
        };
        nonzero(out)
    }
}

fn nonzero(v: Vec<f64>) -> Option<Vec<f64>> {
    if v.iter().all(|&x| x == 0.0) {
        None
    } else {
        Some(v)
    }
}

// out += a (n×p) · b (p×q)
fn mm_add(out: &mut [f64], a: &[f64], b: &[f64], n: usize, p: usize, q: usize) {
    for i in 0..n {
        for k in 0..p {
            let av = a[i * p + k];
            if av == 0.0 {
                continue;
            }
            for j in 0..q {
                out[i * q + j] += av * b[k * q + j];
            }
        }
    }
}
