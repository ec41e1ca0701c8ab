//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape and returns a [`Var`] handle.
//! Nodes only reference earlier nodes, so the tape order is already a
//! topological order and [`Tape::backward`] walks it back to front.

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which statistics a batch-norm node normalized with.
#[derive(Clone, Debug)]
pub(crate) enum NormStats {
    /// Current-batch mean and biased variance; gradients flow through them.
    Batch,
    /// Externally supplied statistics (running averages); treated as constants.
    Fixed,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    Square(Var),
    LogClamp(Var, f64),
    Softmax(Var),
    Sum(Var),
    MeanRows(Var),
    Transpose(Var),
    Gather(Var, Vec<usize>),
    GradReverse(Var, f64),
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        stats: NormStats,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Statistics observed by a batch-normalized forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide-by-B) variance.
    pub var: Vec<f64>,
    pub batch_size: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, materialising zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(dim_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = Tensor::from_parts(vec![m, n], matmul(av.data(), bv.data(), m, k, n));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x[B×O] + b[O]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.shape().len() != 2 || bv.len() != xv.cols() {
            return Err(dim_err("add_row", xv, bv));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % c];
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// `x[B×F] − r[F]`, broadcasting `r` over rows.
    pub fn sub_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        if xv.shape().len() != 2 || rv.len() != xv.cols() {
            return Err(dim_err("sub_row", xv, rv));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o -= rv.data()[i % c];
        }
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(out, Op::SubRow(x, r), rg))
    }

    /// `x·W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(name, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `ln(max(x, eps))`; zero gradient where the clamp is active.
    pub fn log_clamp(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, |x| x.max(eps).ln(), Op::LogClamp(a, eps))
    }

    /// Identity forward; backward multiplies the upstream gradient by `−eta`.
    pub fn grad_reverse(&mut self, a: Var, eta: f64) -> Var {
        let out = self.value(a).clone();
        let rg = self.rg(a);
        self.push(out, Op::GradReverse(a, eta), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let zv = self.value(z);
        if zv.shape().len() != 2 || zv.cols() < 2 {
            return Err(Error::Dimension {
                op: "softmax",
                left: zv.shape().to_vec(),
                right: vec![2],
            });
        }
        let c = zv.cols();
        let mut data = Vec::with_capacity(zv.len());
        for i in 0..zv.rows() {
            let row = zv.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &v in row {
                let e = (v - m).exp();
                total += e;
                data.push(e);
            }
            for e in &mut data[start..start + c] {
                *e /= total;
            }
        }
        let out = Tensor::from_parts(zv.shape().to_vec(), data);
        let rg = self.rg(z);
        Ok(self.push(out, Op::Softmax(z), rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Column means over the batch: `[B×C] → [1×C]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (b, c) = (av.rows(), av.cols());
        let mut m = vec![0.0; c];
        for i in 0..b {
            for (acc, &v) in m.iter_mut().zip(av.row(i)) {
                *acc += v;
            }
        }
        for v in &mut m {
            *v /= b as f64;
        }
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![1, c], m), Op::MeanRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = av.data()[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a), rg)
    }

    /// Picks `a[i, idx[i]]` for every row: `[B×C] → [B×1]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if idx.len() != av.rows() {
            return Err(Error::Dimension {
                op: "gather",
                left: av.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(idx.len());
        for (i, &k) in idx.iter().enumerate() {
            if k >= c {
                return Err(Error::Index {
                    what: "class label",
                    index: k,
                    len: c,
                });
            }
            data.push(av.data()[i * c + k]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), 1], data),
            Op::Gather(a, idx.to_vec()),
            rg,
        ))
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// observed statistics so the caller can maintain running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (b, f) = (xv.rows(), xv.cols());
        let mut mean = vec![0.0; f];
        for i in 0..b {
            for (m, &v) in mean.iter_mut().zip(xv.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= b as f64;
        }
        let mut var = vec![0.0; f];
        for i in 0..b {
            for ((s, &v), &m) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        for s in &mut var {
            *s /= b as f64;
        }
        let out = self.normalize(x, scale, shift, &mean, &var, eps, NormStats::Batch)?;
        Ok((
            out,
            BatchStats {
                mean,
                var,
                batch_size: b,
            },
        ))
    }

    /// Batch normalization with fixed statistics (e.g. running averages).
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.normalize(x, scale, shift, mean, var, eps, NormStats::Fixed)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        stats: NormStats,
    ) -> Result<Var> {
        let (xv, sv, hv) = (self.value(x), self.value(scale), self.value(shift));
        let f = xv.cols();
        if xv.shape().len() != 2 || sv.len() != f || hv.len() != f || mean.len() != f {
            return Err(dim_err("batch_norm", xv, sv));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut x_hat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..xv.rows() {
            for (j, &v) in xv.row(i).iter().enumerate() {
                let n = (v - mean[j]) * inv_std[j];
                x_hat.push(n);
                out.push(sv.data()[j] * n + hv.data()[j]);
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                scale,
                shift,
                x_hat,
                inv_std,
                stats,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Buffers start at zero on every call.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let ga = matmul_nt(gd, bv.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.rg(*b) {
                    let gb = matmul_tn(av.data(), gd, m, k, n);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*b) {
                    let gb = column_sums(g);
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_parts(shape, gb));
                }
            }
            Op::SubRow(x, r) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*r) {
                    let gr = column_sums(g).into_iter().map(|v| -v).collect();
                    let shape = self.value(*r).shape().to_vec();
                    self.accumulate(grads, *r, Tensor::from_parts(shape, gr));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, zip_map(g, bv, |gi, y| gi * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, zip_map(g, av, |gi, x| gi * x));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| c * v)),
            Op::Relu(a) => {
                let av = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    zip_map(g, av, |gi, x| if x > 0.0 { gi } else { 0.0 }),
                );
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                let sign = |x: f64| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                self.accumulate(grads, *a, zip_map(g, av, |gi, x| gi * sign(x)));
            }
            Op::Square(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, zip_map(g, av, |gi, x| 2.0 * x * gi));
            }
            Op::LogClamp(a, eps) => {
                let av = self.value(*a);
                let eps = *eps;
                self.accumulate(
                    grads,
                    *a,
                    zip_map(g, av, |gi, x| if x >= eps { gi / x } else { 0.0 }),
                );
            }
            Op::GradReverse(a, eta) => self.accumulate(grads, *a, g.map(|v| -eta * v)),
            Op::Softmax(z) => {
                let p = &node.value;
                let c = p.cols();
                let mut gz = Vec::with_capacity(p.len());
                for i in 0..p.rows() {
                    let (pr, gr) = (p.row(i), &gd[i * c..(i + 1) * c]);
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gz.extend(pr.iter().zip(gr).map(|(pi, gi)| pi * (gi - dot)));
                }
                self.accumulate(grads, *z, Tensor::from_parts(p.shape().to_vec(), gz));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::full(shape, g.item()));
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let b = av.rows() as f64;
                let c = av.cols();
                let data = (0..av.len()).map(|i| gd[i % c] / b).collect();
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::Transpose(a) => {
                let (r, c) = (g.rows(), g.cols());
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        data[j * r + i] = gd[i * c + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![c, r], data));
            }
            Op::Gather(a, idx) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut data = vec![0.0; av.len()];
                for (i, &k) in idx.iter().enumerate() {
                    data[i * c + k] = gd[i];
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                x_hat,
                inv_std,
                stats,
            } => {
                let xv = self.value(*x);
                let (b, f) = (xv.rows(), xv.cols());
                let sv = self.value(*scale).data();
                let mut g_scale = vec![0.0; f];
                let mut g_shift = vec![0.0; f];
                for i in 0..b {
                    for j in 0..f {
                        let k = i * f + j;
                        g_scale[j] += gd[k] * x_hat[k];
                        g_shift[j] += gd[k];
                    }
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; b * f];
                    match stats {
                        NormStats::Fixed => {
                            for k in 0..b * f {
                                let j = k % f;
                                gx[k] = gd[k] * sv[j] * inv_std[j];
                            }
                        }
                        NormStats::Batch => {
                            // dx = s·σ⁻¹/B · (B·dy − Σdy − x̂·Σ(dy·x̂))
                            let bf = b as f64;
                            for k in 0..b * f {
                                let j = k % f;
                                gx[k] = sv[j] * inv_std[j] / bf
                                    * (bf * gd[k] - g_shift[j] - x_hat[k] * g_scale[j]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                let s_shape = self.value(*scale).shape().to_vec();
                let h_shape = self.value(*shift).shape().to_vec();
                self.accumulate(grads, *scale, Tensor::from_parts(s_shape, g_scale));
                self.accumulate(grads, *shift, Tensor::from_parts(h_shape, g_shift));
            }
        }
    }
}

fn column_sums(g: &Tensor) -> Vec<f64> {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % c] += v;
    }
    out
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::from_parts(g.shape().to_vec(), data)
}
