//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! topological order, so backward is a single reverse sweep.

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, tb: bool },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MulCols { x: Var, g: Var },
    BroadcastRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Unfold { x: Var, offsets: Vec<isize>, stride: usize },
    SoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<S> },
    Silu(Var),
    SnakeBeta { x: Var, log_alpha: Var, log_beta: Var },
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CrossEntropy { logits: Var, target: Tensor<S>, probs: Tensor<S> },
    Gather { table: Var, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Offset added to the snake-beta divisor.
pub const SNAKE_EPS: f64 = 1e-9;

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    param_vars: Vec<(ParamId, Var)>,
    grads: Vec<Option<Tensor<S>>>,
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient (an input under test).
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_vars.push((id, v));
        v
    }

    pub fn require_finite(&self, v: Var, context: &str) -> Result<()> {
        self.value(v).check_finite(context)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, format!("expected a matrix, got shape {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    /// `a · b` (or `a · bᵀ` when `transpose_b`).
    pub fn matmul_ext(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (k2, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim("matmul", format!("{}x{} · {}x{}", m, k, k2, n)));
        }
        let mut out = vec![S::zero(); m * n];
        let (rsb, csb) = if transpose_b { (1, bc as isize) } else { (bc as isize, 1) };
        S::gemm(
            m, k, n, S::one(), self.value(a).data(), k as isize, 1, self.value(b).data(), rsb,
            csb, S::zero(), &mut out, n as isize, 1,
        );
        let r = self.req(a) || self.req(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, tb: transpose_b }, r))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// Adds a `[n]` bias to every row of a `[t, n]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (t, n) = self.matrix_dims(x, "add_bias")?;
        if self.value(b).len() != n {
            return Err(Error::dim("add_bias", format!("bias {:?} for width {}", self.shape(b), n)));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for r in 0..t {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let r = self.req(x) || self.req(b);
        Ok(self.push(out, Op::AddBias { x, b }, r))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let va = self.value(a);
        let vb = self.value(b);
        va.expect_same_shape(vb, op)?;
        va.zip_map(vb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Add(a, b), r))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Sub(a, b), r))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Mul(a, b), r))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).scale(s);
        let r = self.req(a);
        self.push(out, Op::Scale(a, s), r)
    }

    /// Sums any number of same-shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::dim("add_all", "no operands"))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// Multiplies every row of `[t, n]` elementwise by a `[n]` vector.
    pub fn mul_cols(&mut self, x: Var, g: Var) -> Result<Var> {
        let (t, n) = self.matrix_dims(x, "mul_cols")?;
        if self.value(g).len() != n {
            return Err(Error::dim("mul_cols", format!("{:?} for width {}", self.shape(g), n)));
        }
        let gv = self.value(g).data().to_vec();
        let mut out = self.value(x).clone();
        for r in 0..t {
            for (o, &s) in out.row_mut(r).iter_mut().zip(&gv) {
                *o *= s;
            }
        }
        let r = self.req(x) || self.req(g);
        Ok(self.push(out, Op::MulCols { x, g }, r))
    }

    /// Repeats a vector as `rows` identical rows.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Var {
        let data = self.value(v).data().to_vec();
        let n = data.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(&data);
        }
        let r = self.req(v);
        self.push(Tensor::matrix(rows, n, out).expect("sized"), Op::BroadcastRows(v), r)
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        let t = self
            .matrix_dims(*vars.first().ok_or_else(|| Error::dim("concat_cols", "no operands"))?, "concat_cols")?
            .0;
        let mut widths = Vec::with_capacity(vars.len());
        for &v in vars {
            let (rows, cols) = self.matrix_dims(v, "concat_cols")?;
            if rows != t {
                return Err(Error::dim("concat_cols", format!("row counts {} vs {}", rows, t)));
            }
            widths.push(cols);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(t * total);
        for r in 0..t {
            for &v in vars {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let req = vars.iter().any(|&v| self.req(v));
        Ok(self.push(Tensor::matrix(t, total, out)?, Op::ConcatCols(vars.to_vec()), req))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (t, n) = self.matrix_dims(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::dim("slice_cols", format!("cols {}..{} of {}", start, start + len, n)));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(t * len);
        for r in 0..t {
            out.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let req = self.req(x);
        Ok(self.push(Tensor::matrix(t, len, out)?, Op::SliceCols { x, start }, req))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.matrix_dims(x, "slice_rows")?;
        let out = self.value(x).slice_rows(start, len)?;
        let req = self.req(x);
        Ok(self.push(out, Op::SliceRows { x, start }, req))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let req = self.req(x);
        Ok(self.push(out, Op::Reshape(x), req))
    }

    /// Gathers shifted copies of each frame side by side:
    /// `out[r, j*C + c] = x[r*stride + offsets[j], c]`, zero outside the sequence.
    /// Output has `ceil(T / stride)` rows. A convolution is this followed by a matmul.
    pub fn unfold(&mut self, x: Var, offsets: &[isize], stride: usize) -> Result<Var> {
        let (t, c) = self.matrix_dims(x, "unfold")?;
        if stride == 0 {
            return Err(Error::Config("unfold stride must be positive".into()));
        }
        let rows = t.div_ceil(stride);
        let k = offsets.len();
        let src = self.value(x);
        let mut out = vec![S::zero(); rows * k * c];
        for r in 0..rows {
            let center = (r * stride) as isize;
            for (j, &off) in offsets.iter().enumerate() {
                let s = center + off;
                if s < 0 || s >= t as isize {
                    continue;
                }
                let dst = r * k * c + j * c;
                out[dst..dst + c].copy_from_slice(src.row(s as usize));
            }
        }
        let req = self.req(x);
        Ok(self.push(
            Tensor::matrix(rows, k * c, out)?,
            Op::Unfold { x, offsets: offsets.to_vec(), stride },
            req,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (t, _) = self.matrix_dims(x, "softmax_rows")?;
        let mut out = self.value(x).clone();
        for r in 0..t {
            softmax_in_place(out.row_mut(r));
        }
        let req = self.req(x);
        Ok(self.push(out, Op::SoftmaxRows(x), req))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: S) -> Result<Var> {
        let (t, n) = self.matrix_dims(x, "layer_norm")?;
        let nn = S::lit(n as f64);
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(t);
        for r in 0..t {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<S>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
            let is = S::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let req = self.req(x);
        Ok(self.push(out, Op::LayerNorm { x, inv_std }, req))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let req = self.req(x);
        self.push(out, Op::Silu(x), req)
    }

    /// `x + sin²(αx) / (β + 1e-9)` with per-column `α = exp(log_alpha)`,
    /// `β = exp(log_beta)`.
    pub fn snake_beta(&mut self, x: Var, log_alpha: Var, log_beta: Var) -> Result<Var> {
        let (t, n) = self.matrix_dims(x, "snake_beta")?;
        if self.value(log_alpha).len() != n || self.value(log_beta).len() != n {
            return Err(Error::dim("snake_beta", format!("{} channels", n)));
        }
        let eps = S::lit(SNAKE_EPS);
        let alpha: Vec<S> = self.value(log_alpha).data().iter().map(|v| v.exp()).collect();
        let beta: Vec<S> = self.value(log_beta).data().iter().map(|v| v.exp()).collect();
        let mut out = self.value(x).clone();
        for r in 0..t {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                let s = (alpha[c] * *v).sin();
                *v += s * s / (beta[c] + eps);
            }
        }
        let req = self.req(x) || self.req(log_alpha) || self.req(log_beta);
        Ok(self.push(out, Op::SnakeBeta { x, log_alpha, log_beta }, req))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        let req = self.req(x);
        self.push(out, Op::Abs(x), req)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let req = self.req(x);
        self.push(out, Op::Square(x), req)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let req = self.req(x);
        self.push(out, Op::Sum(x), req)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let req = self.req(x);
        self.push(out, Op::Mean(x), req)
    }

    /// Column means of a `[t, n]` matrix as a `[n]` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.matrix_dims(x, "mean_rows")?;
        let out = Tensor::vector(self.value(x).mean_rows());
        let req = self.req(x);
        Ok(self.push(out, Op::MeanRows(x), req))
    }

    /// Mean over rows of `-Σ_k target[k] · log softmax(logits)[k]`.
    /// Each target row must be a probability distribution.
    pub fn cross_entropy(&mut self, logits: Var, target: Tensor<S>) -> Result<Var> {
        let (t, k) = self.matrix_dims(logits, "cross_entropy")?;
        if target.shape() != [t, k] {
            return Err(Error::dim("cross_entropy", format!("target {:?} vs [{}, {}]", target.shape(), t, k)));
        }
        for r in 0..t {
            let s: S = target.row(r).iter().copied().sum();
            if (s - S::one()).abs() > S::lit(1e-6) || target.row(r).iter().any(|&p| p < S::zero()) {
                return Err(Error::Validation(format!("cross_entropy target row {} is not a distribution", r)));
            }
        }
        let lv = self.value(logits);
        let mut probs = lv.clone();
        let mut total = S::zero();
        for r in 0..t {
            let row = lv.row(r);
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<S>().ln();
            for (j, &z) in row.iter().enumerate() {
                let p = target.get(r, j);
                if p != S::zero() {
                    total -= p * (z - lse);
                }
            }
            softmax_in_place(probs.row_mut(r));
        }
        let out = Tensor::scalar(total / S::lit(t.max(1) as f64));
        let req = self.req(logits);
        Ok(self.push(out, Op::CrossEntropy { logits, target, probs }, req))
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (k, d) = self.matrix_dims(table, "gather")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= k {
                return Err(Error::dim("gather", format!("index {} of {}", i, k)));
            }
            out.extend_from_slice(tv.row(i));
        }
        let req = self.req(table);
        Ok(self.push(Tensor::matrix(ids.len(), d, out)?, Op::Gather { table, ids: ids.to_vec() }, req))
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Back-propagates from a scalar node, seeding with `d loss = 1`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", format!("loss shape {:?} is not scalar", self.shape(loss))));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), S::one()));
        for i in (0..=loss.0).rev() {
            let (lo, hi) = self.grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&self.nodes, node, g, lo);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of node {}", i)));
                }
            }
        }
        Ok(())
    }

    /// Adds the gradients of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<S>) {
        for &(id, v) in &self.param_vars {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let mut z = S::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn slot<'a, S: Scalar>(grads: &'a mut [Option<Tensor<S>>], nodes: &[Node<S>], v: Var) -> Option<&'a mut Tensor<S>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape())))
}

fn backprop_node<S: Scalar>(nodes: &[Node<S>], node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::MatMul { a, b, tb } => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = node.value.cols();
            let bv = val(*b).data();
            let av = val(*a).data();
            if let Some(da) = slot(grads, nodes, *a) {
                // dA = dC · op(B)ᵀ
                let (rs, cs) = if *tb { (k as isize, 1) } else { (1, n as isize) };
                S::gemm(m, n, k, S::one(), g.data(), n as isize, 1, bv, rs, cs, S::one(), da.data_mut(), k as isize, 1);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                if *tb {
                    // B is n×k: dB = dCᵀ · A
                    S::gemm(n, m, k, S::one(), g.data(), 1, n as isize, av, k as isize, 1, S::one(), db.data_mut(), k as isize, 1);
                } else {
                    // B is k×n: dB = Aᵀ · dC
                    S::gemm(k, m, n, S::one(), av, 1, k as isize, g.data(), n as isize, 1, S::one(), db.data_mut(), n as isize, 1);
                }
            }
        }
        Op::AddBias { x, b } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                dx.add_assign(g);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for r in 0..g.rows() {
                    for (d, &gg) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *d += gg;
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.add_assign(g);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                db.add_assign(g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.add_assign(g);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for (d, &gg) in db.data_mut().iter_mut().zip(g.data()) {
                    *d -= gg;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, &gg), &y) in da.data_mut().iter_mut().zip(g.data()).zip(bv) {
                    *d += gg * y;
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for ((d, &gg), &x) in db.data_mut().iter_mut().zip(g.data()).zip(av) {
                    *d += gg * x;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = slot(grads, nodes, *a) {
                for (d, &gg) in da.data_mut().iter_mut().zip(g.data()) {
                    *d += gg * *s;
                }
            }
        }
        Op::MulCols { x, g: gv } => {
            let xv = val(*x);
            let scale = val(*gv).data();
            if let Some(dx) = slot(grads, nodes, *x) {
                for r in 0..g.rows() {
                    for ((d, &gg), &s) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(scale) {
                        *d += gg * s;
                    }
                }
            }
            if let Some(dg) = slot(grads, nodes, *gv) {
                for r in 0..g.rows() {
                    for ((d, &gg), &xx) in dg.data_mut().iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                        *d += gg * xx;
                    }
                }
            }
        }
        Op::BroadcastRows(v) => {
            if let Some(dv) = slot(grads, nodes, *v) {
                for r in 0..g.rows() {
                    for (d, &gg) in dv.data_mut().iter_mut().zip(g.row(r)) {
                        *d += gg;
                    }
                }
            }
        }
        Op::ConcatCols(vars) => {
            let mut start = 0;
            for &v in vars {
                let w = val(v).cols();
                if let Some(dv) = slot(grads, nodes, v) {
                    for r in 0..g.rows() {
                        for (d, &gg) in dv.row_mut(r).iter_mut().zip(&g.row(r)[start..start + w]) {
                            *d += gg;
                        }
                    }
                }
                start += w;
            }
        }
        Op::SliceCols { x, start } => {
            let w = g.cols();
            if let Some(dx) = slot(grads, nodes, *x) {
                for r in 0..g.rows() {
                    for (d, &gg) in dx.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                        *d += gg;
                    }
                }
            }
        }
        Op::SliceRows { x, start } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                let c = g.cols();
                let off = start * c;
                for (d, &gg) in dx.data_mut()[off..off + g.len()].iter_mut().zip(g.data()) {
                    *d += gg;
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for (d, &gg) in dx.data_mut().iter_mut().zip(g.data()) {
                    *d += gg;
                }
            }
        }
        Op::Unfold { x, offsets, stride } => {
            let (t, c) = (val(*x).rows(), val(*x).cols());
            let k = offsets.len();
            if let Some(dx) = slot(grads, nodes, *x) {
                for r in 0..g.rows() {
                    let center = (r * stride) as isize;
                    for (j, &off) in offsets.iter().enumerate() {
                        let s = center + off;
                        if s < 0 || s >= t as isize {
                            continue;
                        }
                        let src = &g.row(r)[j * c..(j + 1) * c];
                        for (d, &gg) in dx.row_mut(s as usize).iter_mut().zip(src) {
                            *d += gg;
                        }
                    }
                }
                debug_assert_eq!(g.cols(), k * c);
            }
        }
        Op::SoftmaxRows(x) => {
            let y = &node.value;
            if let Some(dx) = slot(grads, nodes, *x) {
                for r in 0..g.rows() {
                    let dot: S = g.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                    for ((d, &gg), &yy) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d += yy * (gg - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, inv_std } => {
            let y = &node.value;
            let n = S::lit(y.cols() as f64);
            if let Some(dx) = slot(grads, nodes, *x) {
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mg = gr.iter().copied().sum::<S>() / n;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>() / n;
                    for ((d, &gg), &yy) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d += inv_std[r] * (gg - mg - yy * mgy);
                    }
                }
            }
        }
        Op::Silu(x) => {
            let xv = val(*x).data();
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, &gg), &v) in dx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                    let s = sigmoid(v);
                    *d += gg * s * (S::one() + v * (S::one() - s));
                }
            }
        }
        Op::SnakeBeta { x, log_alpha, log_beta } => {
            let eps = S::lit(SNAKE_EPS);
            let xv = val(*x);
            let alpha: Vec<S> = val(*log_alpha).data().iter().map(|v| v.exp()).collect();
            let beta: Vec<S> = val(*log_beta).data().iter().map(|v| v.exp()).collect();
            let (t, n) = (xv.rows(), xv.cols());
            let mut dxs = vec![S::zero(); t * n];
            let mut dla = vec![S::zero(); n];
            let mut dlb = vec![S::zero(); n];
            let two = S::lit(2.0);
            for r in 0..t {
                for c in 0..n {
                    let gg = g.get(r, c);
                    let xx = xv.get(r, c);
                    let inv = S::one() / (beta[c] + eps);
                    let s = (alpha[c] * xx).sin();
                    let s2 = (two * alpha[c] * xx).sin();
                    dxs[r * n + c] = gg * (S::one() + alpha[c] * s2 * inv);
                    dla[c] += gg * xx * s2 * inv * alpha[c];
                    dlb[c] -= gg * s * s * inv * inv * beta[c];
                }
            }
            if let Some(dx) = slot(grads, nodes, *x) {
                for (d, v) in dx.data_mut().iter_mut().zip(dxs) {
                    *d += v;
                }
            }
            if let Some(da) = slot(grads, nodes, *log_alpha) {
                for (d, v) in da.data_mut().iter_mut().zip(dla) {
                    *d += v;
                }
            }
            if let Some(db) = slot(grads, nodes, *log_beta) {
                for (d, v) in db.data_mut().iter_mut().zip(dlb) {
                    *d += v;
                }
            }
        }
        Op::Abs(x) => {
            let xv = val(*x).data();
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, &gg), &v) in dx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                    // subgradient 0 at the kink
                    if v > S::zero() {
                        *d += gg;
                    } else if v < S::zero() {
                        *d -= gg;
                    }
                }
            }
        }
        Op::Square(x) => {
            let xv = val(*x).data();
            let two = S::lit(2.0);
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, &gg), &v) in dx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                    *d += two * v * gg;
                }
            }
        }
        Op::Sum(x) => {
            let gg = g.data()[0];
            if let Some(dx) = slot(grads, nodes, *x) {
                dx.data_mut().iter_mut().for_each(|d| *d += gg);
            }
        }
        Op::Mean(x) => {
            let n = S::lit(val(*x).len().max(1) as f64);
            let gg = g.data()[0] / n;
            if let Some(dx) = slot(grads, nodes, *x) {
                dx.data_mut().iter_mut().for_each(|d| *d += gg);
            }
        }
        Op::MeanRows(x) => {
            let t = val(*x).rows();
            let inv = S::one() / S::lit(t.max(1) as f64);
            if let Some(dx) = slot(grads, nodes, *x) {
                for r in 0..t {
                    for (d, &gg) in dx.row_mut(r).iter_mut().zip(g.data()) {
                        *d += gg * inv;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, target, probs } => {
            let t = probs.rows();
            let scale = g.data()[0] / S::lit(t.max(1) as f64);
            if let Some(dl) = slot(grads, nodes, *logits) {
                for r in 0..t {
                    let mass: S = target.row(r).iter().copied().sum();
                    for ((d, &p), &q) in dl.row_mut(r).iter_mut().zip(probs.row(r)).zip(target.row(r)) {
                        *d += scale * (mass * p - q);
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            if let Some(dt) = slot(grads, nodes, *table) {
                for (r, &i) in ids.iter().enumerate() {
                    for (d, &gg) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += gg;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_backward_matches_closed_form() {
        let mut g = Graph::new();
        let a = g.input(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.input(m(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        // d sum(AB)/dA = 1·Bᵀ row sums
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn transposed_matmul_agrees_with_explicit_transpose() {
        let av = m(2, 3, &[0.3, -1.0, 2.0, 0.5, 0.1, -0.7]);
        let bv = m(4, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 0.2, 0.3, 0.3, 0.3, 2.0, -2.0, 1.0]);
        let mut g = Graph::new();
        let a = g.input(av.clone());
        let b = g.input(bv.clone());
        let c = g.matmul_ext(a, b, true).unwrap();
        let sq = g.square(c);
        let s = g.sum(sq);
        g.backward(s).unwrap();

        let mut h = Graph::new();
        let a2 = h.input(av);
        let b2 = h.input(bv.transpose());
        let c2 = h.matmul(a2, b2).unwrap();
        let sq2 = h.square(c2);
        let s2 = h.sum(sq2);
        h.backward(s2).unwrap();
        assert_eq!(g.value(c).data(), h.value(c2).data());
        for (x, y) in g.grad(a).unwrap().data().iter().zip(h.grad(a2).unwrap().data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let gb = g.grad(b).unwrap();
        let hb = h.grad(b2).unwrap().transpose();
        for (x, y) in gb.data().iter().zip(hb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(m(1, 2, &[1.0, 2.0]));
        let b = g.input(m(1, 2, &[3.0, 4.0]));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn unfold_strided_row_count() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[5, 2]));
        let u = g.unfold(x, &[-1, 0, 1], 2).unwrap();
        assert_eq!(g.shape(u), &[3, 6]);
    }

    #[test]
    fn cross_entropy_rejects_non_distribution() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 3]));
        let bad = m(1, 3, &[0.5, 0.2, 0.2]);
        assert!(matches!(g.cross_entropy(x, bad), Err(Error::Validation(_))));
    }

    #[test]
    fn abs_subgradient_is_zero_at_tie() {
        let mut g = Graph::new();
        let x = g.input(m(1, 3, &[-2.0, 0.0, 3.0]));
        let a = g.abs(x);
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }
}
