use std::collections::HashMap;

use super::{ParamStore, Tensor, TensorError};
use crate::scalar::{sigmoid, silu, softplus};
use crate::ssm::kernel::{selective_scan_backward, selective_scan_forward, ScanDims, ScanInputs};
use crate::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Neg(Var),
    MatMul(Var, Var),
    Exp(Var),
    Softplus(Var),
    Silu(Var),
    Sqrt(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CausalConv { x: Var, w: Var, b: Var, seq_len: usize },
    TimeMix { x: Var, w: Var, b: Var, seq_len: usize },
    SelectiveScan { args: [Var; 6], dims: ScanDims },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation record for reverse-mode differentiation.
///
/// Every operation appends a node holding its forward value; [`Tape::backward`]
/// walks the nodes in reverse and applies each op's adjoint rule. Nodes that
/// do not depend on a parameter or leaf are skipped.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

/// Adjoints of every node, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `var`; zeros when `var` was unreachable.
    pub fn get(&self, var: Var) -> Tensor<T> {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_reachable(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

// out[m x n] = a[m x k] * b[k x n]
fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Records a value that is never differentiated (data, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a free variable whose gradient is reported by [`Tape::gradients`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter. Repeated calls with the same path return the
    /// same handle so its adjoint accumulates in one place.
    pub fn param(&mut self, store: &ParamStore<T>, path: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.params.get(path) {
            return Ok(v);
        }
        let value = store
            .get(path)
            .ok_or_else(|| TensorError::UnknownParam(path.to_string()))?
            .clone();
        let v = self.push(value, Op::Param, true);
        self.params.insert(path.to_string(), v);
        Ok(v)
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.derived(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (vx, vr) = (self.value(x), self.value(row));
        if !vx.is_matrix() || vr.len() != vx.cols() || vr.rows() != 1 {
            return Err(mismatch(name, vx.shape(), vr.shape()));
        }
        let cols = vx.cols();
        let r = vr.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, r[i % cols]))
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.derived(value, op, &[x, row]))
    }

    /// Adds a row vector to every row of a matrix (bias broadcast).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast("add_row", x, row, |a, b| a + b, Op::AddRow(x, row))
    }

    /// Multiplies every row of a matrix elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast("mul_row", x, row, |a, b| a * b, Op::MulRow(x, row))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.derived(value, op, &[x])
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, silu, Op::Silu(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, TensorError> {
        self.mul(x, x)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_matrix() || !vb.is_matrix() || va.cols() != vb.rows() {
            return Err(mismatch("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let data = matmul_kernel(va.data(), vb.data(), m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Normalizes each row to zero mean and unit (population) variance.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if !vx.is_matrix() {
            return Err(mismatch("layer_norm", vx.shape(), &[]));
        }
        let (rows, cols) = (vx.rows(), vx.cols());
        let n = T::from_usize(cols).unwrap();
        let mut out = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &vx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            inv_std.push(rs);
            out.extend(row.iter().map(|&v| (v - mean) * rs));
        }
        let value = Tensor::matrix(rows, cols, out)?;
        Ok(self.derived(value, Op::LayerNorm { x, inv_std }, &[x]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if !vx.is_matrix() || start >= end || end > vx.cols() {
            return Err(mismatch("slice_cols", vx.shape(), &[start, end]));
        }
        let (rows, cols) = (vx.rows(), vx.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&vx.data()[r * cols + start..r * cols + end]);
        }
        let value = Tensor::matrix(rows, w, data)?;
        Ok(self.derived(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = xs.first().ok_or(TensorError::EmptyConcat)?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &v in xs {
            let t = self.value(v);
            if !t.is_matrix() || t.rows() != rows {
                return Err(mismatch("concat_cols", self.shape(*first), t.shape()));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                let t = self.value(v);
                let c = t.cols();
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.derived(value, Op::ConcatCols(xs.to_vec()), xs))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = xs.first().ok_or(TensorError::EmptyConcat)?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.value(v);
            if !t.is_matrix() || t.cols() != cols {
                return Err(mismatch("concat_rows", self.shape(*first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.derived(value, Op::ConcatRows(xs.to_vec()), xs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.derived(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = T::from_usize(vx.len()).unwrap();
        let s = vx.data().iter().copied().sum::<T>() / n;
        self.derived(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Depthwise causal convolution along time.
    ///
    /// `x` is `(seqs * seq_len) x channels`, `w` is `channels x width`, `b`
    /// has one entry per channel. Output row `t` only sees rows `t-width+1..=t`
    /// of its own sequence; earlier positions are zero-padded.
    pub fn causal_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        seq_len: usize,
    ) -> Result<Var, TensorError> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let ch = vx.cols();
        if !vx.is_matrix()
            || seq_len == 0
            || vx.rows() % seq_len != 0
            || !vw.is_matrix()
            || vw.rows() != ch
            || vb.len() != ch
        {
            return Err(mismatch("causal_conv", vx.shape(), vw.shape()));
        }
        let k = vw.cols();
        let seqs = vx.rows() / seq_len;
        let (xd, wd, bd) = (vx.data(), vw.data(), vb.data());
        let mut out = vec![T::zero(); vx.len()];
        for s in 0..seqs {
            for t in 0..seq_len {
                let r = s * seq_len + t;
                for j in 0..ch {
                    let mut acc = bd[j];
                    for tap in 0..k {
                        if t + tap + 1 >= k {
                            let src = s * seq_len + t + tap + 1 - k;
                            acc += wd[j * k + tap] * xd[src * ch + j];
                        }
                    }
                    out[r * ch + j] = acc;
                }
            }
        }
        let value = Tensor::matrix(vx.rows(), ch, out)?;
        Ok(self.derived(value, Op::CausalConv { x, w, b, seq_len }, &[x, w, b]))
    }

    /// Linear map across the time axis of each sequence, channels untouched.
    ///
    /// `x` is `(seqs * seq_len) x channels`, `w` is `out_len x seq_len`, `b`
    /// has `out_len` entries; the result is `(seqs * out_len) x channels`.
    pub fn time_mix(&mut self, x: Var, w: Var, b: Var, seq_len: usize) -> Result<Var, TensorError> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if !vx.is_matrix()
            || seq_len == 0
            || vx.rows() % seq_len != 0
            || !vw.is_matrix()
            || vw.cols() != seq_len
            || vb.len() != vw.rows()
        {
            return Err(mismatch("time_mix", vx.shape(), vw.shape()));
        }
        let ch = vx.cols();
        let out_len = vw.rows();
        let seqs = vx.rows() / seq_len;
        let (xd, wd, bd) = (vx.data(), vw.data(), vb.data());
        let mut out = vec![T::zero(); seqs * out_len * ch];
        for s in 0..seqs {
            for o in 0..out_len {
                let dst = &mut out[(s * out_len + o) * ch..(s * out_len + o + 1) * ch];
                dst.iter_mut().for_each(|v| *v = bd[o]);
                for i in 0..seq_len {
                    let wv = wd[o * seq_len + i];
                    let src = &xd[(s * seq_len + i) * ch..(s * seq_len + i + 1) * ch];
                    for (d, &xv) in dst.iter_mut().zip(src) {
                        *d += wv * xv;
                    }
                }
            }
        }
        let value = Tensor::matrix(seqs * out_len, ch, out)?;
        Ok(self.derived(value, Op::TimeMix { x, w, b, seq_len }, &[x, w, b]))
    }

    /// Selective state-space scan with zero-order-hold discretization fused in.
    ///
    /// Shapes: `delta`, `u`: `(seqs * seq_len) x channels`; `a`: `channels x
    /// state` (negative); `b`, `c`: `(seqs * seq_len) x state`; `d_skip`:
    /// `channels`. Output matches `u`.
    pub fn selective_scan(
        &mut self,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        u: Var,
        d_skip: Var,
        seq_len: usize,
    ) -> Result<Var, TensorError> {
        let vu = self.value(u);
        let va = self.value(a);
        if !vu.is_matrix() || !va.is_matrix() || seq_len == 0 || !vu.rows().is_multiple_of(seq_len) {
            return Err(mismatch("selective_scan", vu.shape(), va.shape()));
        }
        let rows = vu.rows();
        let channels = vu.cols();
        let state = va.cols();
        let ok = self.shape(delta) == [rows, channels]
            && va.rows() == channels
            && self.shape(b) == [rows, state]
            && self.shape(c) == [rows, state]
            && self.value(d_skip).len() == channels;
        if !ok {
            return Err(mismatch("selective_scan", vu.shape(), self.shape(b)));
        }
        let dims = ScanDims {
            seqs: rows / seq_len,
            len: seq_len,
            channels,
            state,
        };
        let y = selective_scan_forward(&self.scan_inputs([delta, a, b, c, u, d_skip]), dims);
        let value = Tensor::matrix(rows, channels, y)?;
        let args = [delta, a, b, c, u, d_skip];
        Ok(self.derived(value, Op::SelectiveScan { args, dims }, &args))
    }

    fn scan_inputs(&self, args: [Var; 6]) -> ScanInputs<'_, T> {
        ScanInputs {
            delta: self.value(args[0]).data(),
            a: self.value(args[1]).data(),
            b: self.value(args[2]).data(),
            c: self.value(args[3]).data(),
            u: self.value(args[4]).data(),
            d_skip: self.value(args[5]).data(),
        }
    }

    /// Adjoints of every node w.r.t. the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_rule(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Reverse pass writing `d loss / d param` into `store`. Parameters the
    /// loss does not depend on receive zero gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<(), TensorError> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        for (path, &v) in &self.params {
            if let Some(g) = &grads.grads[v.0] {
                store.set_grad(path, g)?;
            }
        }
        Ok(())
    }

    fn apply_rule(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).zip(vb).for_each(|((d, &gv), &y)| *d += gv * y)
                });
                acc(*b, &mut |s| {
                    s.iter_mut().zip(g).zip(va).for_each(|((d, &gv), &x)| *d += gv * x)
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).zip(vb).for_each(|((d, &gv), &y)| *d += gv / y)
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::AddRow(x, r) => {
                let cols = nodes[r.0].value.len();
                acc(*x, &mut |s| add_into(s, g));
                acc(*r, &mut |s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % cols] += gv;
                    }
                });
            }
            Op::MulRow(x, r) => {
                let cols = nodes[r.0].value.len();
                let (vx, vr) = (val(*x), val(*r));
                acc(*x, &mut |s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i] += gv * vr[i % cols];
                    }
                });
                acc(*r, &mut |s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % cols] += gv * vx[i];
                    }
                });
            }
            Op::Scale(x, k) => acc(*x, &mut |s| {
                s.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *k)
            }),
            Op::Neg(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv)),
            Op::Exp(x) => acc(*x, &mut |s| {
                s.iter_mut().zip(g).zip(out).for_each(|((d, &gv), &y)| *d += gv * y)
            }),
            Op::Softplus(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(vx)
                        .for_each(|((d, &gv), &xv)| *d += gv * sigmoid(xv))
                })
            }
            Op::Silu(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    s.iter_mut().zip(g).zip(vx).for_each(|((d, &gv), &xv)| {
                        let sg = sigmoid(xv);
                        *d += gv * sg * (T::one() + xv * (T::one() - sg));
                    })
                })
            }
            Op::Sqrt(x) => acc(*x, &mut |s| {
                let half = T::lit(0.5);
                s.iter_mut().zip(g).zip(out).for_each(|((d, &gv), &y)| {
                    // subgradient 0 at the kink so an exact fit does not blow up
                    if y > T::zero() {
                        *d += gv * half / y;
                    }
                })
            }),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let (va, vb) = (ta.data(), tb.data());
                acc(*a, &mut |s| {
                    // dA = G * B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut t = T::zero();
                            for j in 0..n {
                                t += g[i * n + j] * vb[p * n + j];
                            }
                            s[i * k + p] += t;
                        }
                    }
                });
                acc(*b, &mut |s| {
                    // dB = A^T * G
                    for i in 0..m {
                        for p in 0..k {
                            let av = va[i * k + p];
                            if av == T::zero() {
                                continue;
                            }
                            for j in 0..n {
                                s[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = node.value.cols();
                let n = T::from_usize(cols).unwrap();
                acc(*x, &mut |s| {
                    for (r, &rs) in inv_std.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let yr = &out[r * cols..(r + 1) * cols];
                        let mean_g = gr.iter().copied().sum::<T>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for c in 0..cols {
                            s[r * cols + c] += rs * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let in_cols = nodes[x.0].value.cols();
                let w = node.value.cols();
                acc(*x, &mut |s| {
                    for r in 0..node.value.rows() {
                        for c in 0..w {
                            s[r * in_cols + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &v in xs {
                    let c = nodes[v.0].value.cols();
                    acc(v, &mut |s| {
                        for r in 0..node.value.rows() {
                            for j in 0..c {
                                s[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let len = nodes[v.0].value.len();
                    acc(v, &mut |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = T::from_usize(nodes[x.0].value.len()).unwrap();
                acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::CausalConv { x, w, b, seq_len } => {
                let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                let ch = tx.cols();
                let k = tw.cols();
                let seqs = tx.rows() / seq_len;
                let (xd, wd) = (tx.data(), tw.data());
                let taps = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                    for s in 0..seqs {
                        for t in 0..*seq_len {
                            for tap in 0..k {
                                if t + tap + 1 >= k {
                                    let r = s * seq_len + t;
                                    let src = r + tap + 1 - k;
                                    for j in 0..ch {
                                        f(r, src, tap, j);
                                    }
                                }
                            }
                        }
                    }
                };
                acc(*x, &mut |sl| {
                    taps(&mut |r, src, tap, j| sl[src * ch + j] += g[r * ch + j] * wd[j * k + tap])
                });
                acc(*w, &mut |sl| {
                    taps(&mut |r, src, tap, j| sl[j * k + tap] += g[r * ch + j] * xd[src * ch + j])
                });
                acc(*b, &mut |sl| {
                    for (i, &gv) in g.iter().enumerate() {
                        sl[i % ch] += gv;
                    }
                });
            }
            Op::TimeMix { x, w, b, seq_len } => {
                let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                let ch = tx.cols();
                let out_len = tw.rows();
                let seqs = tx.rows() / seq_len;
                let (xd, wd) = (tx.data(), tw.data());
                acc(*x, &mut |sl| {
                    for s in 0..seqs {
                        for o in 0..out_len {
                            let go = &g[(s * out_len + o) * ch..(s * out_len + o + 1) * ch];
                            for i in 0..*seq_len {
                                let wv = wd[o * seq_len + i];
                                let dst = &mut sl[(s * seq_len + i) * ch..(s * seq_len + i + 1) * ch];
                                for (d, &gv) in dst.iter_mut().zip(go) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |sl| {
                    for s in 0..seqs {
                        for o in 0..out_len {
                            let go = &g[(s * out_len + o) * ch..(s * out_len + o + 1) * ch];
                            for i in 0..*seq_len {
                                let xi = &xd[(s * seq_len + i) * ch..(s * seq_len + i + 1) * ch];
                                sl[o * seq_len + i] += go.iter().zip(xi).map(|(&a, &b)| a * b).sum::<T>();
                            }
                        }
                    }
                });
                acc(*b, &mut |sl| {
                    for s in 0..seqs {
                        for o in 0..out_len {
                            let go = &g[(s * out_len + o) * ch..(s * out_len + o + 1) * ch];
                            sl[o] += go.iter().copied().sum::<T>();
                        }
                    }
                });
            }
            Op::SelectiveScan { args, dims } => {
                let gr = selective_scan_backward(&self.scan_inputs(*args), *dims, g);
                let parts = [gr.delta, gr.a, gr.b, gr.c, gr.u, gr.d_skip];
                for (v, part) in args.iter().zip(parts.iter()) {
                    acc(*v, &mut |s| add_into(s, part));
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
