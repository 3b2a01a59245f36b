use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Guard added under the square root of every L2 norm.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of a backward rule, used by the self-check to prove
/// that the gradient checker notices a broken derivative.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    FlipMatMulSign,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    ScalarMul(Var, f64),
    ScalarAdd(Var),
    Sum(Var),
    Mean(Var),
    RowL2Norm(Var),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    ScaleBy(Var, Vec<f64>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_coupled: bool,
    },
    Slice(Var, usize),
    ConcatRows(Var, Var),
    Rows(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of tensor operations for reverse-mode
/// differentiation.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// A tape is built for one forward pass, differentiated once with
/// [`Tape::backward`], and then dropped.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    differentiated: bool,
    fault: Option<BackwardFault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Same value as `v`, cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last differentiated loss with respect to `v`.
    /// `None` when `v` was not reachable from the loss or did not require
    /// gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    /// Clears stored gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.differentiated = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(Error::shape(op, t.shape(), &[0, 0]));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    // ---------------------------------------------------------------- linear

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Adds the vector `bias` (length n) to every row of the m×n matrix `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("add_row", x)?;
        if self.value(bias).len() != n || self.value(bias).rank() != 1 {
            return Err(Error::shape(
                "add_row",
                self.value(x).shape(),
                self.value(bias).shape(),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(x, bias), rg))
    }

    // ----------------------------------------------------------- elementwise

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), op, rg)
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

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so a blown-up pre-activation is not silently zeroed
        self.unary(x, |v| if v > 0.0 || v.is_nan() { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {v}"),
            });
        }
        Ok(self.unary(x, f64::sqrt, Op::Sqrt(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("nonpositive input {v}"),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::ScalarMul(x, c))
    }

    pub fn scalar_add(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::ScalarAdd(x))
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn scale_by(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(Error::shape("scale_by", self.value(x).shape(), &[factors.len()]));
        }
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().zip(&factors).map(|(v, s)| v * s).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ScaleBy(x, factors), rg))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Per-row `sqrt(sum_j x_ij^2 + NORM_EPS)` of a batch × features matrix.
    pub fn row_l2_norm(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("row_l2_norm", x)?;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(n)
            .map(|row| (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m], out), Op::RowL2Norm(x), rg))
    }

    // ---------------------------------------------------------- classification

    /// Row-wise log-softmax in the max-shifted form.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("log_softmax", x)?;
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).data().chunks_exact(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::LogSoftmax(x), rg))
    }

    /// Selects `x[i, cols[i]]` for every row, producing a vector.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("pick", x)?;
        if cols.len() != m {
            return Err(Error::shape("pick", self.value(x).shape(), &[cols.len()]));
        }
        if let Some((i, c)) = cols.iter().enumerate().find(|(_, &c)| c >= n) {
            return Err(Error::Data(format!(
                "label {c} of sample {i} is outside [0, {n})"
            )));
        }
        let d = self.value(x).data();
        let out: Vec<f64> = cols.iter().enumerate().map(|(i, &c)| d[i * n + c]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m], out), Op::Pick(x, cols.to_vec()), rg))
    }

    // ------------------------------------------------------------ batch norm

    /// Normalizes each column with the statistics of the current batch
    /// (biased variance) and applies `gamma * xhat + beta`.
    ///
    /// Returns the output together with the batch mean and variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (m, n) = self.matrix_dims("batch_norm", x)?;
        if m < 2 {
            return Err(Error::Data(
                "batch norm in train mode needs a batch of at least 2".into(),
            ));
        }
        let d = self.value(x).data();
        let mut mean = vec![0.0; n];
        for row in d.chunks_exact(n) {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; n];
        for row in d.chunks_exact(n) {
            for j in 0..n {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let out = self.normalize(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, mean, var))
    }

    /// Normalizes with fixed statistics (evaluation mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.normalize(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_coupled: bool,
    ) -> Result<Var> {
        let (m, n) = self.matrix_dims("batch_norm", x)?;
        for p in [gamma, beta] {
            if self.value(p).len() != n {
                return Err(Error::shape("batch_norm", self.value(x).shape(), self.value(p).shape()));
            }
        }
        if mean.len() != n || var.len() != n {
            return Err(Error::shape("batch_norm", self.value(x).shape(), &[mean.len()]));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).data().chunks_exact(n) {
            for j in 0..n {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_coupled,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------- structure

    /// Contiguous flat range of `x` reinterpreted with `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let src = self.value(x);
        if offset + len > src.len() {
            return Err(Error::shape("slice", src.shape(), shape));
        }
        let data = src.data()[offset..offset + len].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Slice(x, offset), rg))
    }

    /// Stacks two matrices with equal column counts.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.matrix_dims("concat_rows", a)?;
        let (mb, nb) = self.matrix_dims("concat_rows", b)?;
        if na != nb {
            return Err(Error::shape("concat_rows", self.value(a).shape(), self.value(b).shape()));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![ma + mb, na], data), Op::ConcatRows(a, b), rg))
    }

    /// Rows `start..end` of a matrix (or elements of a vector).
    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || start >= end || end > t.rows() {
            return Err(Error::shape("rows", t.shape(), &[start, end]));
        }
        let c = t.cols();
        let data = t.data()[start * c..end * c].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Rows(x, start), rg))
    }

    // -------------------------------------------------------------- backward

    /// Accumulates d`loss`/d`v` for every recorded value that requires
    /// gradients and is reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::State(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[]));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let flip = matches!(self.fault, Some(BackwardFault::FlipMatMulSign));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, flip);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], flip: bool) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut send = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let elementwise = |x: Var, f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..val(x).len()).map(|k| g[k] * f(k)).collect()
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let sign = if flip { -1.0 } else { 1.0 };
                if self.nodes[a.0].requires_grad {
                    let mut da = matmul_bt_kernel(g, tb.data(), m, n, k);
                    da.iter_mut().for_each(|v| *v *= sign);
                    send(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = matmul_at_kernel(ta.data(), g, m, k, n);
                    db.iter_mut().for_each(|v| *v *= sign);
                    send(*b, db);
                }
            }
            Op::AddRow(x, b) => {
                let n = val(*b).len();
                let mut db = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                send(*x, g.to_vec());
                send(*b, db);
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, elementwise(*a, &|k| vb[k]));
                send(*b, elementwise(*b, &|k| va[k]));
            }
            Op::Relu(x) => {
                let vx = val(*x);
                send(*x, elementwise(*x, &|k| if vx[k] > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::Square(x) => {
                let vx = val(*x);
                send(*x, elementwise(*x, &|k| 2.0 * vx[k]));
            }
            Op::Sqrt(x) => {
                let floor = NORM_EPS.sqrt();
                send(*x, elementwise(*x, &|k| 0.5 / out[k].max(floor)));
            }
            Op::Exp(x) => send(*x, elementwise(*x, &|k| out[k])),
            Op::Log(x) => {
                let vx = val(*x);
                send(*x, elementwise(*x, &|k| 1.0 / vx[k]));
            }
            Op::ScalarMul(x, c) => send(*x, elementwise(*x, &|_| *c)),
            Op::ScalarAdd(x) => send(*x, g.to_vec()),
            Op::ScaleBy(x, s) => send(*x, elementwise(*x, &|k| s[k])),
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::RowL2Norm(x) => {
                let vx = val(*x);
                let n = vx.len() / out.len();
                let dx = (0..vx.len()).map(|k| g[k / n] * vx[k] / out[k / n]).collect();
                send(*x, dx);
            }
            Op::LogSoftmax(x) => {
                let n = node.value.cols();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, orow) in g.chunks_exact(n).zip(out.chunks_exact(n)) {
                    let total: f64 = grow.iter().sum();
                    dx.extend(grow.iter().zip(orow).map(|(gv, lp)| gv - lp.exp() * total));
                }
                send(*x, dx);
            }
            Op::Pick(x, cols) => {
                let n = self.nodes[x.0].value.cols();
                let mut dx = vec![0.0; val(*x).len()];
                for (i, &c) in cols.iter().enumerate() {
                    dx[i * n + c] += g[i];
                }
                send(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_coupled,
            } => {
                let n = inv_std.len();
                let m = g.len() / n;
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; g.len()];
                    if *batch_coupled {
                        // dx = inv_std/m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat)),
                        // with dxhat = g*gamma, so the sums are gamma*dbeta and gamma*dgamma.
                        let mf = m as f64;
                        for (idx, d) in dx.iter_mut().enumerate() {
                            let j = idx % n;
                            let dxhat = g[idx] * gam[j];
                            *d = inv_std[j] / mf
                                * (mf * dxhat - gam[j] * dbeta[j] - xhat[idx] * gam[j] * dgamma[j]);
                        }
                    } else {
                        for (idx, d) in dx.iter_mut().enumerate() {
                            let j = idx % n;
                            *d = g[idx] * gam[j] * inv_std[j];
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::Slice(x, offset) => {
                let mut dx = vec![0.0; val(*x).len()];
                dx[*offset..*offset + g.len()].copy_from_slice(g);
                send(*x, dx);
            }
            Op::ConcatRows(a, b) => {
                let la = val(*a).len();
                send(*a, g[..la].to_vec());
                send(*b, g[la..].to_vec());
            }
            Op::Rows(x, start) => {
                let c = node.value.cols();
                let mut dx = vec![0.0; val(*x).len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                send(*x, dx);
            }
        }
    }
}

/// `a[m×k] · b[k×n]`.
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `g[m×n] · bᵀ` where `b` is k×n.
fn matmul_bt_kernel(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is m×k and `g` is m×n.
fn matmul_at_kernel(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let m = t.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let c = t.matmul(i, m).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = t.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let col = t.constant(Tensor::from_rows(&[[5.0], [7.0]]).unwrap());
        let c = t.matmul(r, col).unwrap();
        assert_eq!(t.value(c).shape(), &[1, 1]);
        assert_eq!(t.value(c).data(), &[5.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[3, 4]));
        let b = t.constant(Tensor::zeros(&[3, 2]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let b = random(&[4, 2], 2);
        let report = grad_check(
            |t, a| {
                let a = t.slice(a, 0, &[3, 4])?;
                let b = t.constant(b.clone());
                let c = t.matmul(a, b)?;
                let c = t.square(c);
                Ok(t.sum(c))
            },
            &random(&[12], 1),
            1e-4,
        );
        assert!(report.max_rel_err < 1e-6, "{report:?}");

        let a = random(&[3, 4], 3);
        let report = grad_check(
            |t, b| {
                let b = t.slice(b, 0, &[4, 2])?;
                let a = t.constant(a.clone());
                let c = t.matmul(a, b)?;
                let c = t.exp(c);
                Ok(t.sum(c))
            },
            &random(&[8], 4),
            1e-4,
        );
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn relu_sign_cases_and_subgradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]), true);
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_propagates_nan() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![f64::NAN, -1.0]));
        let y = t.relu(x);
        assert!(t.value(y).data()[0].is_nan());
    }

    #[test]
    fn square_backward() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![3.0]), true);
        let y = t.square(x);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn exp_of_log_is_identity() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.5, 2.0]), true);
        let l = t.log(x).unwrap();
        let e = t.exp(l);
        for (a, b) in t.value(e).data().iter().zip([0.5, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let s = t.sum(e);
        t.backward(s).unwrap();
        for g in t.grad(x).unwrap().data() {
            assert!((g - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn log_domain_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Domain { .. })));
        let y = t.constant(Tensor::vector(vec![-1.0]));
        assert!(matches!(t.sqrt(y), Err(Error::Domain { .. })));
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2]));
        let b = t.constant(Tensor::zeros(&[3]));
        assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(t.mul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let m = t.mean(x);
        assert_eq!(t.value(m).item(), 2.5);
        let f = t.constant(Tensor::from_rows(&[[3.0, 4.0]]).unwrap());
        let n = t.row_l2_norm(f).unwrap();
        assert!((t.value(n).item() - 5.0).abs() < 1e-6);
        let v = t.constant(Tensor::vector(vec![1.0]));
        assert!(t.row_l2_norm(v).is_err());
    }

    #[test]
    fn row_l2_norm_gradient() {
        let report = grad_check(
            |t, x| {
                let x = t.slice(x, 0, &[4, 8])?;
                let n = t.row_l2_norm(x)?;
                let n = t.square(n);
                let s = t.exp(n);
                let s = t.scalar_mul(s, 1e-3);
                Ok(t.sum(s))
            },
            &random(&[32], 9),
            1e-4,
        );
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn norm_guard_at_zero_vector() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[1, 3]), true);
        let n = t.row_l2_norm(x).unwrap();
        assert!(t.value(n).is_finite());
        let s = t.sum(n);
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap();
        assert!(g.is_finite());
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_and_mean_square_backward() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.3, -1.0, 2.0]), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = t.square(x);
        let m = t.mean(sq);
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn reused_tensor_accumulates_both_paths() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.5), true);
        let y = t.add(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_state_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = t.square(x);
        assert!(matches!(t.backward(sq), Err(Error::Shape { .. })));
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::State(_))));
        t.reset_grads();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_leaves_get_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0), true);
        let unused = t.leaf(Tensor::scalar(3.0), true);
        let c = t.constant(Tensor::scalar(2.0));
        let y = t.mul(x, c).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0]);
        assert!(t.grad(unused).is_none());
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let gamma = random(&[4], 21);
        let beta = random(&[4], 22);
        let report = grad_check(
            |t, x| {
                let x = t.slice(x, 0, &[8, 4])?;
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let (y, _, _) = t.batch_norm_train(x, g, b, 1e-5)?;
                let y = t.square(y);
                Ok(t.mean(y))
            },
            &random(&[32], 20),
            1e-4,
        );
        assert!(report.max_rel_err < 1e-5, "{report:?}");

        // gamma and beta gradients through a nonlinear readout
        let x = random(&[6, 3], 23);
        let report = grad_check(
            |t, p| {
                let g = t.slice(p, 0, &[3])?;
                let b = t.slice(p, 3, &[3])?;
                let xv = t.constant(x.clone());
                let (y, _, _) = t.batch_norm_train(xv, g, b, 1e-5)?;
                let y = t.exp(y);
                Ok(t.mean(y))
            },
            &random(&[6], 24),
            1e-4,
        );
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn log_softmax_pick_gradient() {
        let labels = [0usize, 2, 1, 1, 0];
        let report = grad_check(
            |t, x| {
                let x = t.slice(x, 0, &[5, 3])?;
                let l = t.log_softmax(x)?;
                let p = t.pick(l, &labels)?;
                Ok(t.mean(p))
            },
            &random(&[15], 30),
            1e-4,
        );
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn structural_ops_route_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[[1.0, 2.0]]).unwrap(), true);
        let b = t.leaf(Tensor::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap(), true);
        let c = t.concat_rows(a, b).unwrap();
        let tail = t.rows(c, 1, 3).unwrap();
        let w = t.constant(Tensor::from_rows(&[[1.0, 10.0], [100.0, 1000.0]]).unwrap());
        let p = t.mul(tail, w).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert!(t.grad(a).is_none() || t.grad(a).unwrap().data() == [0.0, 0.0]);
        assert_eq!(t.grad(b).unwrap().data(), &[1.0, 10.0, 100.0, 1000.0]);
    }

    #[test]
    fn identical_tapes_give_identical_grads() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(random(&[5, 6], 40), true);
            let w = t.leaf(random(&[6, 3], 41), true);
            let h = t.matmul(x, w).unwrap();
            let l = t.log_softmax(h).unwrap();
            let s = t.mean(l);
            t.backward(s).unwrap();
            (t.grad(x).unwrap(), t.grad(w).unwrap())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
    }

    #[test]
    fn injected_fault_breaks_matmul_gradient() {
        let mut t = Tape::new();
        t.inject_fault(BackwardFault::FlipMatMulSign);
        let a = t.leaf(Tensor::from_rows(&[[1.0, 2.0]]).unwrap(), true);
        let b = t.constant(Tensor::from_rows(&[[1.0], [1.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[-1.0, -1.0]);
    }
}
