use std::borrow::Cow;

use rand::Rng;

use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Mask(usize, Vec<f64>),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    Sum(usize),
    LogSumExp(usize, usize),
    Biaffine {
        h: usize,
        r: usize,
        t: usize,
        /// `h · R` viewed as `rows(h) × (r·d)`, kept for the backward pass.
        hr: Vec<f64>,
    },
    SoftmaxCe(usize, usize),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Linear record of executed operations. Parents always precede children, so
/// a reverse sweep over the node list is a valid topological order.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Numerically stable `ln Σ exp(x)`.
pub(crate) fn logsumexp_slice(xs: &[f64]) -> Result<f64> {
    let max = xs
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if xs.is_empty() {
        return Err(Error::Invariant("logsumexp over an empty axis".into()));
    }
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

/// `lse(s) - s[gold]`, accurate when the gold score dominates.
fn cross_entropy_value(s: &[f64], gold: usize) -> f64 {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let others: f64 = s
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != gold)
        .map(|(_, &x)| (x - max).exp())
        .sum();
    let g = (s[gold] - max).exp();
    if s[gold] == max {
        others.ln_1p()
    } else {
        (max - s[gold]) + (g + others).ln()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a trainable leaf that borrows its storage.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, &ta.data, false, &tb.data, false, &mut out.data, 0.0);
        check_finite("matmul", &out)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Dimension {
                op: "add",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        check_finite("add", &out)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    /// `a[m×n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.cols();
        if tb.numel() != n {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut out = ta.clone();
        for row in out.data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(&tb.data) {
                *x += y;
            }
        }
        check_finite("add_row", &out)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::AddRow(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Dimension {
                op: "mul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        check_finite("mul", &out)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    /// Scales row `i` of `a[m×n]` by `g[i]`.
    pub fn mul_col(&mut self, a: Var, g: Var) -> Result<Var> {
        let (ta, tg) = (self.value(a), self.value(g));
        let (m, n) = (ta.rows(), ta.cols());
        if tg.numel() != m {
            return Err(Error::Dimension {
                op: "mul_col",
                lhs: ta.shape.clone(),
                rhs: tg.shape.clone(),
            });
        }
        let mut out = ta.clone();
        for (row, s) in out.data.chunks_mut(n).zip(&tg.data) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        check_finite("mul_col", &out)?;
        let rg = self.rg(&[a.0, g.0]);
        Ok(self.push(out, Op::MulCol(a.0, g.0), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.scale_assign(factor);
        check_finite("scale", &out)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Scale(a.0, factor), rg))
    }

    fn unary(&mut self, a: Var, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| f(x)).collect(),
        };
        check_finite(name, &out)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, op, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", Op::Relu(a.0), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", Op::Sigmoid(a.0), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", Op::Tanh(a.0), f64::tanh)
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config("dropout", format!("rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let ta = self.value(a);
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Mask(a.0, mask), rg))
    }

    /// Selects rows of a matrix (embedding lookup, message sources).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || idx.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                msg: format!("source {:?}, {} indices", ta.shape, idx.len()),
            });
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Shape {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {m} rows"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&ta.data[i * n..(i + 1) * n]);
        }
        let out = Tensor {
            shape: vec![idx.len(), n],
            data,
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::GatherRows(a.0, idx.to_vec()), rg))
    }

    /// `out[idx[r]] += a[r]` into a zero matrix with `rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() != idx.len() || idx.iter().any(|&i| i >= rows) || rows == 0 {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                msg: format!("source {:?}, {} indices, {rows} target rows", ta.shape, idx.len()),
            });
        }
        let n = ta.cols();
        let mut out = Tensor::zeros(&[rows, n]);
        for (r, &i) in idx.iter().enumerate() {
            let src = &ta.data[r * n..(r + 1) * n];
            for (o, s) in out.data[i * n..(i + 1) * n].iter_mut().zip(src) {
                *o += s;
            }
        }
        check_finite("scatter_add_rows", &out)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::ScatterAddRows(a.0, idx.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let m = self.value(*first).rows();
        for p in parts {
            let t = self.value(*p);
            if t.rank() != 2 || t.rows() != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(*first).shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor {
            shape: vec![m, total],
            data,
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::ConcatCols(ids), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data.iter().sum();
        let out = Tensor::scalar(s);
        check_finite("sum", &out)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Sum(a.0), rg))
    }

    /// Log-sum-exp along `axis`. A vector reduces to a scalar; a matrix
    /// reduces over rows (`axis = 0`) or columns (`axis = 1`).
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let out = match (ta.rank(), axis) {
            (1, 0) => Tensor::scalar(logsumexp_slice(&ta.data)?),
            (2, 0) => {
                let (m, n) = (ta.shape[0], ta.shape[1]);
                let mut col = vec![0.0; m];
                let mut res = Vec::with_capacity(n);
                for j in 0..n {
                    for (i, c) in col.iter_mut().enumerate() {
                        *c = ta.data[i * n + j];
                    }
                    res.push(logsumexp_slice(&col)?);
                }
                Tensor::vector(res)
            }
            (2, 1) => {
                let n = ta.shape[1];
                let res = ta
                    .data
                    .chunks(n)
                    .map(logsumexp_slice)
                    .collect::<Result<Vec<_>>>()?;
                Tensor::vector(res)
            }
            _ => {
                return Err(Error::Shape {
                    op: "logsumexp",
                    msg: format!("axis {axis} invalid for shape {:?}", ta.shape),
                })
            }
        };
        check_finite("logsumexp", &out)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::LogSumExp(a.0, axis), rg))
    }

    /// Bi-affine scores `out[i·b + j, c] = h_i · R[:, c, :] · t_j` for
    /// `h[a×d]`, `R[d×r×d]`, `t[b×d]`. Output is `(a·b) × r`.
    pub fn biaffine(&mut self, h: Var, r: Var, t: Var) -> Result<Var> {
        let (th, tr, tt) = (self.value(h), self.value(r), self.value(t));
        if th.rank() != 2
            || tt.rank() != 2
            || tr.rank() != 3
            || tr.shape[0] != th.shape[1]
            || tr.shape[2] != tt.shape[1]
        {
            return Err(Error::Dimension {
                op: "biaffine",
                lhs: th.shape.clone(),
                rhs: tr.shape.clone(),
            });
        }
        let (a, dh) = (th.shape[0], th.shape[1]);
        let (nr, dt) = (tr.shape[1], tr.shape[2]);
        let b = tt.shape[0];
        let mut hr = vec![0.0; a * nr * dt];
        gemm(a, dh, nr * dt, &th.data, false, &tr.data, false, &mut hr, 0.0);
        let mut out = vec![0.0; a * b * nr];
        for i in 0..a {
            for j in 0..b {
                let tj = tt.row(j);
                for c in 0..nr {
                    let u = &hr[(i * nr + c) * dt..(i * nr + c + 1) * dt];
                    out[(i * b + j) * nr + c] = u.iter().zip(tj).map(|(x, y)| x * y).sum();
                }
            }
        }
        let out = Tensor {
            shape: vec![a * b, nr],
            data: out,
        };
        check_finite("biaffine", &out)?;
        let rg = self.rg(&[h.0, r.0, t.0]);
        Ok(self.push(
            out,
            Op::Biaffine {
                h: h.0,
                r: r.0,
                t: t.0,
                hr,
            },
            rg,
        ))
    }

    /// `ln Σ_c exp(s_c) − s_gold` for a score vector.
    pub fn softmax_cross_entropy(&mut self, scores: Var, gold: usize) -> Result<Var> {
        let ts = self.value(scores);
        if ts.rank() != 1 || gold >= ts.numel() {
            return Err(Error::Label(format!(
                "gold category {gold} outside score vector of shape {:?}",
                ts.shape
            )));
        }
        let loss = cross_entropy_value(&ts.data, gold);
        let out = Tensor::scalar(loss);
        check_finite("softmax_cross_entropy", &out)?;
        let rg = self.rg(&[scores.0]);
        Ok(self.push(out, Op::SoftmaxCe(scores.0, gold), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Invariant("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let val = &node.value;
            match &node.op {
                Op::Leaf => {
                    leaf_grads[idx] = Some(Tensor {
                        shape: val.shape.clone(),
                        data: g,
                    });
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    if self.nodes[*a].requires_grad {
                        self.acc(&mut grads, *a, |ga| {
                            gemm(m, n, k, &g, false, &tb.data, true, ga, 1.0)
                        });
                    }
                    if self.nodes[*b].requires_grad {
                        self.acc(&mut grads, *b, |gb| {
                            gemm(k, m, n, &ta.data, true, &g, false, gb, 1.0)
                        });
                    }
                }
                Op::Add(a, b) => {
                    for p in [*a, *b] {
                        self.acc(&mut grads, p, |gp| add_into(gp, &g));
                    }
                }
                Op::AddRow(a, b) => {
                    self.acc(&mut grads, *a, |ga| add_into(ga, &g));
                    let n = val.cols();
                    self.acc(&mut grads, *b, |gb| {
                        for row in g.chunks(n) {
                            add_into(gb, row);
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    self.acc(&mut grads, *a, |ga| {
                        for ((o, gi), y) in ga.iter_mut().zip(&g).zip(&tb.data) {
                            *o += gi * y;
                        }
                    });
                    self.acc(&mut grads, *b, |gb| {
                        for ((o, gi), x) in gb.iter_mut().zip(&g).zip(&ta.data) {
                            *o += gi * x;
                        }
                    });
                }
                Op::MulCol(a, s) => {
                    let (ta, ts) = (&self.nodes[*a].value, &self.nodes[*s].value);
                    let n = ta.cols();
                    self.acc(&mut grads, *a, |ga| {
                        for ((grow, orow), sv) in ga.chunks_mut(n).zip(g.chunks(n)).zip(&ts.data) {
                            for (o, gi) in grow.iter_mut().zip(orow) {
                                *o += gi * sv;
                            }
                        }
                    });
                    self.acc(&mut grads, *s, |gs| {
                        for ((o, grow), xrow) in gs.iter_mut().zip(g.chunks(n)).zip(ta.data.chunks(n)) {
                            *o += grow.iter().zip(xrow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    });
                }
                Op::Scale(a, f) => {
                    self.acc(&mut grads, *a, |ga| {
                        for (o, gi) in ga.iter_mut().zip(&g) {
                            *o += gi * f;
                        }
                    });
                }
                Op::Relu(a) => {
                    let ta = &self.nodes[*a].value;
                    self.acc(&mut grads, *a, |ga| {
                        for ((o, gi), x) in ga.iter_mut().zip(&g).zip(&ta.data) {
                            if *x > 0.0 {
                                *o += gi;
                            }
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    self.acc(&mut grads, *a, |ga| {
                        for ((o, gi), y) in ga.iter_mut().zip(&g).zip(&val.data) {
                            *o += gi * y * (1.0 - y);
                        }
                    });
                }
                Op::Tanh(a) => {
                    self.acc(&mut grads, *a, |ga| {
                        for ((o, gi), y) in ga.iter_mut().zip(&g).zip(&val.data) {
                            *o += gi * (1.0 - y * y);
                        }
                    });
                }
                Op::Mask(a, mask) => {
                    self.acc(&mut grads, *a, |ga| {
                        for ((o, gi), m) in ga.iter_mut().zip(&g).zip(mask) {
                            *o += gi * m;
                        }
                    });
                }
                Op::GatherRows(a, idx) => {
                    let n = val.cols();
                    self.acc(&mut grads, *a, |ga| {
                        for (r, &i) in idx.iter().enumerate() {
                            add_into(&mut ga[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                        }
                    });
                }
                Op::ScatterAddRows(a, idx) => {
                    let n = val.cols();
                    self.acc(&mut grads, *a, |ga| {
                        for (r, &i) in idx.iter().enumerate() {
                            add_into(&mut ga[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = val.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        self.acc(&mut grads, p, |gp| {
                            for (grow, orow) in gp.chunks_mut(w).zip(g.chunks(total)) {
                                add_into(grow, &orow[offset..offset + w]);
                            }
                        });
                        offset += w;
                    }
                }
                Op::Sum(a) => {
                    let gi = g[0];
                    self.acc(&mut grads, *a, |ga| ga.iter_mut().for_each(|o| *o += gi));
                }
                Op::LogSumExp(a, axis) => {
                    let ta = &self.nodes[*a].value;
                    let out = &val.data;
                    match (ta.rank(), axis) {
                        (1, _) => self.acc(&mut grads, *a, |ga| {
                            for (o, x) in ga.iter_mut().zip(&ta.data) {
                                *o += g[0] * (x - out[0]).exp();
                            }
                        }),
                        (_, 0) => {
                            let n = ta.shape[1];
                            self.acc(&mut grads, *a, |ga| {
                                for (grow, xrow) in ga.chunks_mut(n).zip(ta.data.chunks(n)) {
                                    for j in 0..n {
                                        grow[j] += g[j] * (xrow[j] - out[j]).exp();
                                    }
                                }
                            })
                        }
                        _ => {
                            let n = ta.shape[1];
                            self.acc(&mut grads, *a, |ga| {
                                for (i, (grow, xrow)) in
                                    ga.chunks_mut(n).zip(ta.data.chunks(n)).enumerate()
                                {
                                    for j in 0..n {
                                        grow[j] += g[i] * (xrow[j] - out[i]).exp();
                                    }
                                }
                            })
                        }
                    }
                }
                Op::Biaffine { h, r, t, hr } => {
                    let (th, tr, tt) = (
                        &self.nodes[*h].value,
                        &self.nodes[*r].value,
                        &self.nodes[*t].value,
                    );
                    let (a, dh) = (th.shape[0], th.shape[1]);
                    let (nr, dt) = (tr.shape[1], tr.shape[2]);
                    let b = tt.shape[0];
                    // d(hr)[i, c, q] = Σ_j g[ij, c] t[j, q]
                    let need_hr = self.nodes[*h].requires_grad || self.nodes[*r].requires_grad;
                    let mut dhr = vec![0.0; if need_hr { a * nr * dt } else { 0 }];
                    if need_hr {
                        for i in 0..a {
                            for j in 0..b {
                                let tj = tt.row(j);
                                for c in 0..nr {
                                    let gv = g[(i * b + j) * nr + c];
                                    let dst = &mut dhr[(i * nr + c) * dt..(i * nr + c + 1) * dt];
                                    for (o, y) in dst.iter_mut().zip(tj) {
                                        *o += gv * y;
                                    }
                                }
                            }
                        }
                    }
                    if self.nodes[*t].requires_grad {
                        self.acc(&mut grads, *t, |gt| {
                            for i in 0..a {
                                for j in 0..b {
                                    let dst = &mut gt[j * dt..(j + 1) * dt];
                                    for c in 0..nr {
                                        let gv = g[(i * b + j) * nr + c];
                                        let u = &hr[(i * nr + c) * dt..(i * nr + c + 1) * dt];
                                        for (o, x) in dst.iter_mut().zip(u) {
                                            *o += gv * x;
                                        }
                                    }
                                }
                            }
                        });
                    }
                    if self.nodes[*h].requires_grad {
                        self.acc(&mut grads, *h, |gh| {
                            gemm(a, nr * dt, dh, &dhr, false, &tr.data, true, gh, 1.0)
                        });
                    }
                    if self.nodes[*r].requires_grad {
                        self.acc(&mut grads, *r, |gr| {
                            gemm(dh, a, nr * dt, &th.data, true, &dhr, false, gr, 1.0)
                        });
                    }
                }
                Op::SoftmaxCe(s, gold) => {
                    let ts = &self.nodes[*s].value;
                    let lse = logsumexp_slice(&ts.data)?;
                    self.acc(&mut grads, *s, |gs| {
                        for (c, (o, x)) in gs.iter_mut().zip(&ts.data).enumerate() {
                            let p = (x - lse).exp();
                            *o += g[0] * (p - if c == *gold { 1.0 } else { 0.0 });
                        }
                    });
                }
            }
        }
        Ok(Gradients { leaf_grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], idx: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let buf = grads[idx].get_or_insert_with(|| vec![0.0; self.nodes[idx].value.numel()]);
        f(buf);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    leaf_grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, `None` if the leaf did not participate in the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.leaf_grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of a leaf, zeros when it did not participate.
    pub fn wrt(&self, tape: &Tape<'_>, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}
