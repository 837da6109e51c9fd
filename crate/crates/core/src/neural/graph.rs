//! Tape-based reverse-mode differentiation.
//!
//! A `Graph` records every op applied during one forward pass. `backward`
//! consumes the tape once, keeps per-node gradients for inspection and adds
//! parameter gradients into the `ParamStore`.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvSpec};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub const BCE_EPS: f64 = 1e-7;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    graph: u64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    BroadcastRows(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Var, Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Minimum(Var, Var),
    Bce {
        pred: Var,
        target: Var,
    },
    BceLogits {
        logits: Var,
        target: Var,
    },
    GaussianKl {
        mu: Var,
        log_var: Var,
    },
    GaussianLogProb {
        mean: Var,
        log_std: Var,
        actions: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            index: self.nodes.len() - 1,
            graph: self.id,
        }
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        &self.nodes[v.index]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// `x (B, in)`, `w (out, in)`, `b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (out_f, in_f) = (wt.rows(), wt.cols());
        if xt.cols() != in_f {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", xt.shape(), wt.shape()),
            ));
        }
        let batch = xt.rows();
        let y = kernels::linear(xt.data(), batch, wt.data(), self.value(b).data(), in_f, out_f)?;
        Ok(self.push(Tensor::new(&[batch, out_f], y)?, Op::Linear { x, w, b }))
    }

    /// `x (B, C_in, L) -> (B, C_out, L_out)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xt = self.value(x);
        let [batch, len] = self.conv_dims("conv1d", xt, spec.in_channels)?;
        let l_out = spec.output_len(len)?;
        let y = kernels::conv1d(
            xt.data(),
            batch,
            len,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &spec,
        )?;
        let t = Tensor::new(&[batch, spec.out_channels, l_out], y)?;
        Ok(self.push(t, Op::Conv { x, w, b, spec }))
    }

    /// Adjoint of `conv1d` for the same `spec`: `(B, C_out, L) -> (B, C_in, L_out)`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xt = self.value(x);
        let [batch, len] = self.conv_dims("conv_transpose1d", xt, spec.out_channels)?;
        let l_out = spec.transposed_len(len)?;
        let y = kernels::conv_transpose1d(
            xt.data(),
            batch,
            len,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &spec,
        )?;
        let t = Tensor::new(&[batch, spec.in_channels, l_out], y)?;
        Ok(self.push(t, Op::ConvT { x, w, b, spec }))
    }

    fn conv_dims(&self, op: &'static str, t: &Tensor, channels: usize) -> Result<[usize; 2]> {
        match t.shape() {
            [b, c, l] if *c == channels => Ok([*b, *l]),
            s => Err(Error::shape(op, format!("expected (B, {channels}, L), got {s:?}"))),
        }
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        self.push(t, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape(op_name, format!("{:?} vs {:?}", at.shape(), bt.shape())));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(at.shape(), data)?;
        Ok(self.push(t, op))
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

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// `(B, ...) -> (B, 1)` sums over everything but the leading dimension.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let rows = t.rows();
        let data = (0..rows).map(|i| t.row(i).iter().sum()).collect();
        let out = Tensor::new(&[rows, 1], data).expect("row count");
        self.push(out, Op::RowSum(x))
    }

    /// `(1, d) -> (n, d)`.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != 1 {
            return Err(Error::shape(
                "broadcast_rows",
                format!("expected one row, got {:?}", t.shape()),
            ));
        }
        let d = t.cols();
        let data = t.data().iter().copied().cycle().take(n * d).collect();
        let out = Tensor::new(&[n, d], data)?;
        Ok(self.push(out, Op::BroadcastRows(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Columns `start..end` of a `(B, D)` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if start >= end || end > cols {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {cols}")));
        }
        let data = (0..rows).flat_map(|i| t.row(i)[start..end].to_vec()).collect();
        let out = Tensor::new(&[rows, end - start], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rows() != bt.rows() {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} vs {:?}", at.shape(), bt.shape()),
            ));
        }
        let rows = at.rows();
        let data = (0..rows)
            .flat_map(|i| at.row(i).iter().chain(bt.row(i)).copied().collect::<Vec<_>>())
            .collect();
        let out = Tensor::new(&[rows, at.cols() + bt.cols()], data)?;
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Per-sample binary cross-entropy summed over features: `(B, D) -> (B, 1)`.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape("bce", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let rows = p.rows();
        let data = (0..rows)
            .map(|i| {
                p.row(i)
                    .iter()
                    .zip(t.row(i))
                    .map(|(&p, &t)| -(t * (p + BCE_EPS).ln() + (1.0 - t) * (1.0 - p + BCE_EPS).ln()))
                    .sum()
            })
            .collect();
        let out = Tensor::new(&[rows, 1], data)?;
        Ok(self.push(out, Op::Bce { pred, target }))
    }

    /// Same loss as `bce(sigmoid(logits), target)`, with `1 - sigmoid(l)`
    /// evaluated as `sigmoid(-l)` so saturated outputs keep full precision.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (l, t) = (self.value(logits), self.value(target));
        if l.shape() != t.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", l.shape(), t.shape()),
            ));
        }
        let rows = l.rows();
        let data = (0..rows)
            .map(|i| {
                l.row(i)
                    .iter()
                    .zip(t.row(i))
                    .map(|(&l, &t)| {
                        let (p, q) = (kernels::sigmoid(l), kernels::sigmoid(-l));
                        -(t * (p + BCE_EPS).ln() + (1.0 - t) * (q + BCE_EPS).ln())
                    })
                    .sum()
            })
            .collect();
        let out = Tensor::new(&[rows, 1], data)?;
        Ok(self.push(out, Op::BceLogits { logits, target }))
    }

    /// Per-sample `KL(N(mu, exp(log_var)) || N(0, I))`: `(B, D) -> (B, 1)`.
    pub fn gaussian_kl(&mut self, mu: Var, log_var: Var) -> Result<Var> {
        let (m, lv) = (self.value(mu), self.value(log_var));
        if m.shape() != lv.shape() {
            return Err(Error::shape(
                "gaussian_kl",
                format!("{:?} vs {:?}", m.shape(), lv.shape()),
            ));
        }
        let rows = m.rows();
        let data = (0..rows)
            .map(|i| {
                m.row(i)
                    .iter()
                    .zip(lv.row(i))
                    .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
                    .sum()
            })
            .collect();
        let out = Tensor::new(&[rows, 1], data)?;
        Ok(self.push(out, Op::GaussianKl { mu, log_var }))
    }

    /// Diagonal Gaussian log-density per row; `log_std` is `(1, D)` shared by all rows.
    pub fn gaussian_log_prob(&mut self, mean: Var, log_std: Var, actions: Var) -> Result<Var> {
        let (m, ls, a) = (self.value(mean), self.value(log_std), self.value(actions));
        if m.shape() != a.shape() || ls.len() != m.cols() {
            return Err(Error::shape(
                "gaussian_log_prob",
                format!(
                    "mean {:?}, log_std {:?}, actions {:?}",
                    m.shape(),
                    ls.shape(),
                    a.shape()
                ),
            ));
        }
        let rows = m.rows();
        let data = (0..rows)
            .map(|i| {
                m.row(i)
                    .iter()
                    .zip(a.row(i))
                    .zip(ls.data())
                    .map(|((&m, &a), &ls)| {
                        let z = (a - m) * (-ls).exp();
                        -0.5 * z * z - ls - 0.5 * LN_2PI
                    })
                    .sum()
            })
            .collect();
        let out = Tensor::new(&[rows, 1], data)?;
        Ok(self.push(out, Op::GaussianLogProb { mean, log_std, actions }))
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Reverse pass from the scalar `loss`; parameter gradients are added to `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if loss.graph != self.id {
            return Err(Error::Usage("loss variable belongs to a different graph".into()));
        }
        if self.consumed {
            return Err(Error::Usage("backward called twice on the same graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.index].value;
            let mut send = |v: Var, d: Vec<f64>| match &mut grads[v.index] {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::Linear { x, w, b } => {
                    let (xt, wt) = (val(*x), val(*w));
                    let (dx, dw, db) =
                        kernels::linear_backward(xt.data(), xt.rows(), wt.data(), &g, wt.cols(), wt.rows());
                    send(*x, dx);
                    send(*w, dw);
                    send(*b, db);
                }
                Op::Conv { x, w, b, spec } => {
                    let xt = val(*x);
                    let s = xt.shape();
                    let (dx, dw, db) = kernels::conv1d_backward(xt.data(), s[0], s[2], val(*w).data(), &g, spec)?;
                    send(*x, dx);
                    send(*w, dw);
                    if let Some(b) = b {
                        send(*b, db);
                    }
                }
                Op::ConvT { x, w, b, spec } => {
                    let xt = val(*x);
                    let s = xt.shape();
                    let (dx, dw, db) =
                        kernels::conv_transpose1d_backward(xt.data(), s[0], s[2], val(*w).data(), &g, spec)?;
                    send(*x, dx);
                    send(*w, dw);
                    if let Some(b) = b {
                        send(*b, db);
                    }
                }
                Op::Relu(x) => {
                    let d = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    send(*x, d);
                }
                Op::Sigmoid(x) => {
                    let d = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, &s)| g * s * (1.0 - s))
                        .collect();
                    send(*x, d);
                }
                Op::Tanh(x) => {
                    let d = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, &t)| g * (1.0 - t * t))
                        .collect();
                    send(*x, d);
                }
                Op::Exp(x) => {
                    let d = g.iter().zip(node.value.data()).map(|(g, &e)| g * e).collect();
                    send(*x, d);
                }
                Op::Square(x) => {
                    let d = g.iter().zip(val(*x).data()).map(|(g, &v)| 2.0 * g * v).collect();
                    send(*x, d);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (at, bt) = (val(*a), val(*b));
                    let da = g.iter().zip(bt.data()).map(|(g, y)| g * y).collect();
                    let db = g.iter().zip(at.data()).map(|(g, x)| g * x).collect();
                    send(*a, da);
                    send(*b, db);
                }
                Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
                Op::AddScalar(x) => send(*x, g.clone()),
                Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
                Op::Mean(x) => {
                    let n = val(*x).len();
                    send(*x, vec![g[0] / n as f64; n]);
                }
                Op::RowSum(x) => {
                    let c = val(*x).cols();
                    send(*x, g.iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect());
                }
                Op::BroadcastRows(x) => {
                    let d = val(*x).cols();
                    let mut acc = vec![0.0; d];
                    for (i, v) in g.iter().enumerate() {
                        acc[i % d] += v;
                    }
                    send(*x, acc);
                }
                Op::Reshape(x) => send(*x, g.clone()),
                Op::SliceCols { x, start } => {
                    let xt = val(*x);
                    let (rows, cols) = (xt.rows(), xt.cols());
                    let width = node.value.cols();
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        d[r * cols + start..r * cols + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
                    }
                    send(*x, d);
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (val(*a).cols(), val(*b).cols());
                    let rows = node.value.rows();
                    let mut da = Vec::with_capacity(rows * ca);
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        let row = &g[r * (ca + cb)..(r + 1) * (ca + cb)];
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::Clamp { x, lo, hi } => {
                    let d = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(g, v)| if v >= lo && v <= hi { *g } else { 0.0 })
                        .collect();
                    send(*x, d);
                }
                Op::Minimum(a, b) => {
                    let (at, bt) = (val(*a), val(*b));
                    let mut da = vec![0.0; g.len()];
                    let mut db = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        if at.data()[i] <= bt.data()[i] {
                            da[i] = g[i];
                        } else {
                            db[i] = g[i];
                        }
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::Bce { pred, target } => {
                    let (p, t) = (val(*pred), val(*target));
                    let c = p.cols();
                    let mut dp = vec![0.0; p.len()];
                    let mut dt = vec![0.0; p.len()];
                    for i in 0..p.len() {
                        let (pv, tv, gi) = (p.data()[i], t.data()[i], g[i / c]);
                        dp[i] = gi * (-tv / (pv + BCE_EPS) + (1.0 - tv) / (1.0 - pv + BCE_EPS));
                        dt[i] = gi * (-(pv + BCE_EPS).ln() + (1.0 - pv + BCE_EPS).ln());
                    }
                    send(*pred, dp);
                    send(*target, dt);
                }
                Op::BceLogits { logits, target } => {
                    let (l, t) = (val(*logits), val(*target));
                    let c = l.cols();
                    let mut dl = vec![0.0; l.len()];
                    let mut dt = vec![0.0; l.len()];
                    for i in 0..l.len() {
                        let (lv, tv, gi) = (l.data()[i], t.data()[i], g[i / c]);
                        let (p, q) = (kernels::sigmoid(lv), kernels::sigmoid(-lv));
                        let pq = p * q;
                        dl[i] = gi * (-tv * pq / (p + BCE_EPS) + (1.0 - tv) * pq / (q + BCE_EPS));
                        dt[i] = gi * (-(p + BCE_EPS).ln() + (q + BCE_EPS).ln());
                    }
                    send(*logits, dl);
                    send(*target, dt);
                }
                Op::GaussianKl { mu, log_var } => {
                    let (m, lv) = (val(*mu), val(*log_var));
                    let c = m.cols();
                    let dm = m.data().iter().enumerate().map(|(i, &m)| g[i / c] * m).collect();
                    let dlv = lv
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &l)| g[i / c] * 0.5 * (l.exp() - 1.0))
                        .collect();
                    send(*mu, dm);
                    send(*log_var, dlv);
                }
                Op::GaussianLogProb { mean, log_std, actions } => {
                    let (m, ls, a) = (val(*mean), val(*log_std), val(*actions));
                    let c = m.cols();
                    let mut dm = vec![0.0; m.len()];
                    let mut da = vec![0.0; m.len()];
                    let mut dls = vec![0.0; c];
                    for i in 0..m.len() {
                        let j = i % c;
                        let inv_var = (-2.0 * ls.data()[j]).exp();
                        let diff = a.data()[i] - m.data()[i];
                        let gi = g[i / c];
                        dm[i] = gi * diff * inv_var;
                        da[i] = -gi * diff * inv_var;
                        dls[j] += gi * (diff * diff * inv_var - 1.0);
                    }
                    send(*mean, dm);
                    send(*log_std, dls);
                    send(*actions, da);
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}
