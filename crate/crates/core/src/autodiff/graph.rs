use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stand-in for log(0) in log-space recursions; keeps every value finite.
pub const LOG_ZERO: f64 = -1.0e30;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; saturates cleanly to ±1 at both ends.
fn fast_tanh<R: Real>(z: R) -> R {
    R::one() - R::of(2.0) / ((z + z).exp() + R::one())
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    DivRows(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    ShiftRight(Var, usize),
    MaskRows(Var, Var, Vec<bool>),
    LayerNorm(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    Gelu(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    L2NormLast(Var),
    LogAddExp(Var, Var),
    Conv1d(Conv1dArgs),
    Conv2d(Conv2dArgs),
}

#[derive(Clone, Debug)]
struct Conv1dArgs {
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Conv2dArgs {
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
}

struct Node<R> {
    value: Tensor<R>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in execution order, so index
/// order is a valid topological order for the backward sweep.
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
    params: BTreeMap<String, Var>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push_leaf(t, false)
    }

    pub fn input(&mut self, t: Tensor<R>, requires_grad: bool) -> Var {
        self.push_leaf(t, requires_grad)
    }

    fn push_leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter. Repeated lookups of the same name return
    /// the same leaf, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<R>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?
            .clone();
        let trainable = !store.is_frozen(name);
        let v = self.push_leaf(t, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn push(&mut self, name: &'static str, value: Tensor<R>, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(R, R) -> R) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(R) -> R) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(name, out, op, &[x])
    }

    fn row_shape(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let d = self.value(x).last_dim();
        let rs = self.shape(row);
        if rs != [d] {
            return Err(Error::shape(op, self.shape(x), rs));
        }
        Ok(d)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[.., D] + b[D]` broadcast over every leading index.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.row_shape("add_row", x, b)?;
        let (tx, tb) = (self.value(x), self.value(b));
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % d])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_row", out, Op::AddRow(x, b), &[x, b])
    }

    /// `x[.., D] * g[D]` broadcast over every leading index.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let d = self.row_shape("mul_row", x, g)?;
        let (tx, tg) = (self.value(x), self.value(g));
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * tg.data()[i % d])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("mul_row", out, Op::MulRow(x, g), &[x, g])
    }

    /// Divides row `i` of `x[N, D]` by `n[i]`.
    pub fn div_rows(&mut self, x: Var, n: Var) -> Result<Var> {
        let tx = self.value(x);
        let rows = tx.outer();
        if self.shape(n) != [rows] {
            return Err(Error::shape("div_rows", tx.shape(), self.shape(n)));
        }
        let d = tx.last_dim();
        let tn = self.value(n);
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v / tn.data()[i / d])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("div_rows", out, Op::DivRows(x, n), &[x, n])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let cr = R::of(c);
        self.map("scale", x, Op::Scale(x, c), |v| v * cr)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![R::zero(); m * n];
        R::gemm(false, false, m, k, n, self.value(a).data(), self.value(b).data(), R::zero(), &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let out = Tensor::new(vec![n, m], transpose_buf(self.value(x).data(), m, n))?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).outer();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_last", self.shape(first), s));
            }
            widths.push(self.value(p).last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        self.push("concat_last", out, Op::ConcatLast(parts.to_vec()), parts)
    }

    /// Selects rows (first-axis entries) of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || idx.is_empty() {
            return Err(Error::shape("gather_rows", t.shape(), &[idx.len()]));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::invalid(format!("gather_rows: index {i} out of {n} rows")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        self.push("gather_rows", out, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    /// Columns `start..start + width` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 2 || width == 0 || start + width > s[1] {
            return Err(Error::shape("slice_cols", s, &[start, width]));
        }
        let data = (0..s[0])
            .flat_map(|r| t.row(r)[start..start + width].iter().copied())
            .collect();
        let out = Tensor::new(vec![s[0], width], data)?;
        self.push("slice_cols", out, Op::SliceCols(x, start), &[x])
    }

    /// Flat-index gather producing a tensor of `shape`.
    pub fn gather(&mut self, x: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::shape("gather", shape, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.len()) {
            return Err(Error::invalid(format!("gather: index {bad} out of {}", t.len())));
        }
        let data = idx.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push("gather", out, Op::Gather(x, idx.to_vec()), &[x])
    }

    /// Shifts along the last axis by `k`, filling vacated slots with `fill`.
    pub fn shift_right(&mut self, x: Var, k: usize, fill: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let fill = R::of(fill);
        let mut data = vec![fill; t.len()];
        for r in 0..t.outer() {
            for j in k..d {
                data[r * d + j] = t.data()[r * d + j - k];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("shift_right", out, Op::ShiftRight(x, k), &[x])
    }

    /// Replaces the rows of `x[N, D]` flagged in `mask` with `emb[D]`.
    pub fn mask_rows(&mut self, x: Var, emb: Var, mask: &[bool]) -> Result<Var> {
        let d = self.row_shape("mask_rows", x, emb)?;
        let tx = self.value(x);
        if tx.outer() != mask.len() {
            return Err(Error::shape("mask_rows", tx.shape(), &[mask.len()]));
        }
        let te = self.value(emb);
        let mut data = tx.data().to_vec();
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            data[r * d..(r + 1) * d].copy_from_slice(te.data());
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("mask_rows", out, Op::MaskRows(x, emb, mask.to_vec()), &[x, emb])
    }

    /// Normalizes each last-axis row to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let mut data = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(t.outer());
        for r in 0..t.outer() {
            let row = t.row(r);
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|v| R::of((v.as_f64() - mean) * is)));
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("layer_norm", out, Op::LayerNorm(x, inv_std), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = row_softmax(self.value(x), false);
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let out = row_softmax(self.value(x), true);
        self.push("log_softmax", out, Op::LogSoftmax(x), &[x])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a, half) = (R::of(GELU_C), R::of(GELU_A), R::of(0.5));
        self.map("gelu", x, Op::Gelu(x), |v| {
            half * v * (R::one() + fast_tanh(c * (v + a * v * v * v)))
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu(x), |v| v.max(R::zero()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: R = t.data().iter().copied().sum();
        let m = s / R::of(t.len() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean over the last axis, dropping it (rank-1 input gives a scalar).
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = R::of(t.last_dim() as f64);
        let data = (0..t.outer()).map(|r| t.row(r).iter().copied().sum::<R>() / d).collect();
        let out = Tensor::new(drop_last(t.shape()), data)?;
        self.push("mean_last", out, Op::MeanLast(x), &[x])
    }

    /// Euclidean norm over the last axis, dropping it. Zero rows are an error.
    pub fn l2_norm_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data: Vec<R> = (0..t.outer())
            .map(|r| t.row(r).iter().map(|&v| v * v).sum::<R>().sqrt())
            .collect();
        if data.iter().any(|n| *n == R::zero()) {
            return Err(Error::invalid("l2_norm_last: zero-norm row"));
        }
        let out = Tensor::new(drop_last(t.shape()), data)?;
        self.push("l2_norm_last", out, Op::L2NormLast(x), &[x])
    }

    /// Elementwise `log(exp(a) + exp(b))`.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("log_add_exp", a, b, Op::LogAddExp(a, b), |x, y| {
            let m = x.max(y);
            m + ((x - m).exp() + (y - m).exp()).ln()
        })
    }

    /// Strided valid 1-D convolution. `x` is `[C_in, L]` or `[N, C_in, L]`,
    /// `w` is `[C_out, C_in, K]`, `b` is `[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (n, c_in, len) = match xs[..] {
            [c, l] => (1, c, l),
            [n, c, l] => (n, c, l),
            _ => return Err(Error::shape("conv1d", &xs, &ws)),
        };
        if ws.len() != 3 || ws[1] != c_in || stride == 0 || self.shape(b) != [ws[0]] {
            return Err(Error::shape("conv1d", &xs, &ws));
        }
        let (c_out, k) = (ws[0], ws[2]);
        if len < k {
            return Err(Error::shape("conv1d", &xs, &ws));
        }
        let l_out = (len - k) / stride + 1;
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![R::zero(); n * c_out * l_out];
        let mut cols = vec![R::zero(); c_in * k * l_out];
        for s in 0..n {
            let xin = &tx.data()[s * c_in * len..(s + 1) * c_in * len];
            im2col_1d(xin, c_in, len, k, stride, l_out, &mut cols);
            let y = &mut out[s * c_out * l_out..(s + 1) * c_out * l_out];
            for (o, chunk) in y.chunks_mut(l_out).enumerate() {
                chunk.fill(tb.data()[o]);
            }
            R::gemm(false, false, c_out, c_in * k, l_out, tw.data(), &cols, R::one(), y);
        }
        let shape = if xs.len() == 2 {
            vec![c_out, l_out]
        } else {
            vec![n, c_out, l_out]
        };
        let out = Tensor::new(shape, out)?;
        let args = Conv1dArgs { x, w, b, stride };
        self.push("conv1d", out, Op::Conv1d(args), &[x, w, b])
    }

    /// 2-D convolution with symmetric zero padding. `x` is
    /// `[N, C_in, H, W]`, `w` is `[C_out, C_in, KH, KW]`, `b` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geo = Conv2dGeometry::new(&xs, &ws, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", &xs, &ws))?;
        if self.shape(b) != [geo.c_out] {
            return Err(Error::shape("conv2d", &ws, self.shape(b)));
        }
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let plane = geo.ho * geo.wo;
        let mut out = vec![R::zero(); geo.n * geo.c_out * plane];
        let mut cols = vec![R::zero(); geo.patch() * plane];
        for s in 0..geo.n {
            geo.im2col(&tx.data()[s * geo.in_size()..(s + 1) * geo.in_size()], &mut cols);
            let y = &mut out[s * geo.c_out * plane..(s + 1) * geo.c_out * plane];
            for (o, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.fill(tb.data()[o]);
            }
            R::gemm(false, false, geo.c_out, geo.patch(), plane, tw.data(), &cols, R::one(), y);
        }
        let out = Tensor::new(vec![geo.n, geo.c_out, geo.ho, geo.wo], out)?;
        let args = Conv2dArgs { x, w, b, stride, pad };
        self.push("conv2d", out, Op::Conv2d(args), &[x, w, b])
    }

    /// Reverse sweep from a scalar. Every node reachable from `loss` that
    /// requires a gradient gets one; others read back as zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<R>>], v: Var, f: impl FnOnce(&mut [R])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![R::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for ((d, &g), &o) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * o;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &g), &o) in d.iter_mut().zip(g).zip(va) {
                        *d += g * o;
                    }
                });
            }
            Op::AddRow(x, b) => {
                let dim = self.value(*b).len();
                self.acc(grads, *x, |d| add_into(d, g));
                self.acc(grads, *b, |d| {
                    for (j, &g) in g.iter().enumerate() {
                        d[j % dim] += g;
                    }
                });
            }
            Op::MulRow(x, s) => {
                let (vx, vs) = (self.value(*x).data(), self.value(*s).data());
                let dim = vs.len();
                self.acc(grads, *x, |d| {
                    for (j, (d, &g)) in d.iter_mut().zip(g).enumerate() {
                        *d += g * vs[j % dim];
                    }
                });
                self.acc(grads, *s, |d| {
                    for (j, (&g, &xv)) in g.iter().zip(vx).enumerate() {
                        d[j % dim] += g * xv;
                    }
                });
            }
            Op::DivRows(x, n) => {
                let (vx, vn) = (self.value(*x).data(), self.value(*n).data());
                let dim = self.value(*x).last_dim();
                self.acc(grads, *x, |d| {
                    for (j, (d, &g)) in d.iter_mut().zip(g).enumerate() {
                        *d += g / vn[j / dim];
                    }
                });
                self.acc(grads, *n, |d| {
                    for (j, (&g, &xv)) in g.iter().zip(vx).enumerate() {
                        let nv = vn[j / dim];
                        d[j / dim] -= g * xv / (nv * nv);
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = R::of(*c);
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += c * g));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| R::gemm(false, true, m, n, k, g, vb, R::one(), d));
                self.acc(grads, *b, |d| R::gemm(true, false, k, m, n, va, g, R::one(), d));
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let gt = transpose_buf(g, s[1], s[0]);
                self.acc(grads, *x, |d| add_into(d, &gt));
            }
            Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, g)),
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.outer();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.acc(grads, p, |d| {
                        for r in 0..rows {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::GatherRows(x, idx) => {
                let w = node.value.last_dim();
                self.acc(grads, *x, |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut d[src * w..(src + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let w = node.value.last_dim();
                let full = self.value(*x).last_dim();
                self.acc(grads, *x, |d| {
                    for r in 0..node.value.outer() {
                        let dst = &mut d[r * full + start..r * full + start + w];
                        add_into(dst, &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Gather(x, idx) => {
                self.acc(grads, *x, |d| {
                    for (&src, &g) in idx.iter().zip(g) {
                        d[src] += g;
                    }
                });
            }
            Op::ShiftRight(x, k) => {
                let w = node.value.last_dim();
                self.acc(grads, *x, |d| {
                    for r in 0..node.value.outer() {
                        for j in *k..w {
                            d[r * w + j - k] += g[r * w + j];
                        }
                    }
                });
            }
            Op::MaskRows(x, emb, mask) => {
                let w = node.value.last_dim();
                self.acc(grads, *x, |d| {
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| !m) {
                        add_into(&mut d[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
                self.acc(grads, *emb, |d| {
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        add_into(d, &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::LayerNorm(x, inv_std) => {
                let w = node.value.last_dim();
                let inv_w = R::of(1.0 / w as f64);
                self.acc(grads, *x, |d| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let (gr, yr) = (&g[r * w..(r + 1) * w], &y[r * w..(r + 1) * w]);
                        let mean_g = gr.iter().copied().sum::<R>() * inv_w;
                        let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<R>() * inv_w;
                        let is = R::of(is);
                        for ((d, &gv), &yv) in d[r * w..(r + 1) * w].iter_mut().zip(gr).zip(yr) {
                            *d += is * (gv - mean_g - yv * mean_gy);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let w = node.value.last_dim();
                self.acc(grads, *x, |d| {
                    for r in 0..node.value.outer() {
                        let (gr, yr) = (&g[r * w..(r + 1) * w], &y[r * w..(r + 1) * w]);
                        let dot: R = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in d[r * w..(r + 1) * w].iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let w = node.value.last_dim();
                self.acc(grads, *x, |d| {
                    for r in 0..node.value.outer() {
                        let (gr, yr) = (&g[r * w..(r + 1) * w], &y[r * w..(r + 1) * w]);
                        let total: R = gr.iter().copied().sum();
                        for ((d, &gv), &yv) in d[r * w..(r + 1) * w].iter_mut().zip(gr).zip(yr) {
                            *d += gv - yv.exp() * total;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                let (c, a, half, three) = (R::of(GELU_C), R::of(GELU_A), R::of(0.5), R::of(3.0));
                self.acc(grads, *x, |d| {
                    for ((d, &gv), &v) in d.iter_mut().zip(g).zip(vx) {
                        let t = fast_tanh(c * (v + a * v * v * v));
                        let dt = (R::one() - t * t) * c * (R::one() + three * a * v * v);
                        *d += gv * (half * (R::one() + t) + half * v * dt);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((d, &gv), &v) in d.iter_mut().zip(g).zip(vx) {
                        if v > R::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = R::of(self.value(*x).len() as f64);
                self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MeanLast(x) => {
                let w = self.value(*x).last_dim();
                let inv = R::of(1.0 / w as f64);
                self.acc(grads, *x, |d| {
                    for (j, d) in d.iter_mut().enumerate() {
                        *d += g[j / w] * inv;
                    }
                });
            }
            Op::L2NormLast(x) => {
                let vx = self.value(*x).data();
                let w = self.value(*x).last_dim();
                self.acc(grads, *x, |d| {
                    for (j, (d, &v)) in d.iter_mut().zip(vx).enumerate() {
                        *d += g[j / w] * v / y[j / w];
                    }
                });
            }
            Op::LogAddExp(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for (((d, &gv), &av), &yv) in d.iter_mut().zip(g).zip(va).zip(y) {
                        *d += gv * (av - yv).exp();
                    }
                });
                self.acc(grads, *b, |d| {
                    for (((d, &gv), &bv), &yv) in d.iter_mut().zip(g).zip(vb).zip(y) {
                        *d += gv * (bv - yv).exp();
                    }
                });
            }
            Op::Conv1d(args) => self.conv1d_backward(args, g, grads),
            Op::Conv2d(args) => self.conv2d_backward(args, g, grads),
        }
    }

    fn conv1d_backward(&self, args: &Conv1dArgs, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let xs = self.shape(args.x);
        let (n, c_in, len) = match xs[..] {
            [c, l] => (1, c, l),
            [n, c, l] => (n, c, l),
            _ => unreachable!("validated in forward"),
        };
        let ws = self.shape(args.w);
        let (c_out, k) = (ws[0], ws[2]);
        let l_out = (len - k) / args.stride + 1;
        let (vx, vw) = (self.value(args.x).data(), self.value(args.w).data());
        let need_w = self.nodes[args.w.0].requires_grad;
        let need_x = self.nodes[args.x.0].requires_grad;
        let mut cols = vec![R::zero(); c_in * k * l_out];
        for s in 0..n {
            let gs = &g[s * c_out * l_out..(s + 1) * c_out * l_out];
            self.acc(grads, args.b, |d| {
                for (o, row) in gs.chunks(l_out).enumerate() {
                    d[o] += row.iter().copied().sum();
                }
            });
            if need_w {
                im2col_1d(&vx[s * c_in * len..(s + 1) * c_in * len], c_in, len, k, args.stride, l_out, &mut cols);
                self.acc(grads, args.w, |d| {
                    R::gemm(false, true, c_out, l_out, c_in * k, gs, &cols, R::one(), d)
                });
            }
            if need_x {
                R::gemm(true, false, c_in * k, c_out, l_out, vw, gs, R::zero(), &mut cols);
                self.acc(grads, args.x, |d| {
                    col2im_1d(&cols, c_in, len, k, args.stride, l_out, &mut d[s * c_in * len..(s + 1) * c_in * len]);
                });
            }
        }
    }

    fn conv2d_backward(&self, args: &Conv2dArgs, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let geo = Conv2dGeometry::new(self.shape(args.x), self.shape(args.w), args.stride, args.pad)
            .expect("validated in forward");
        let (vx, vw) = (self.value(args.x).data(), self.value(args.w).data());
        let plane = geo.ho * geo.wo;
        let need_w = self.nodes[args.w.0].requires_grad;
        let need_x = self.nodes[args.x.0].requires_grad;
        let mut cols = vec![R::zero(); geo.patch() * plane];
        for s in 0..geo.n {
            let gs = &g[s * geo.c_out * plane..(s + 1) * geo.c_out * plane];
            self.acc(grads, args.b, |d| {
                for (o, row) in gs.chunks(plane).enumerate() {
                    d[o] += row.iter().copied().sum();
                }
            });
            if need_w {
                geo.im2col(&vx[s * geo.in_size()..(s + 1) * geo.in_size()], &mut cols);
                self.acc(grads, args.w, |d| {
                    R::gemm(false, true, geo.c_out, plane, geo.patch(), gs, &cols, R::one(), d)
                });
            }
            if need_x {
                R::gemm(true, false, geo.patch(), geo.c_out, plane, vw, gs, R::zero(), &mut cols);
                self.acc(grads, args.x, |d| {
                    geo.col2im(&cols, &mut d[s * geo.in_size()..(s + 1) * geo.in_size()]);
                });
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
    shapes: Vec<Vec<usize>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of `v`; zeros when `v` was unreachable or constant.
    pub fn get(&self, v: Var) -> Tensor<R> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape equals value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients of every named parameter bound on `graph`, by name.
    pub fn named(&self, graph: &Graph<R>) -> BTreeMap<String, Tensor<R>> {
        graph
            .bound_params()
            .iter()
            .filter(|(_, &v)| graph.requires_grad(v))
            .map(|(name, &v)| (name.clone(), self.get(v)))
            .collect()
    }
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn drop_last(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn transpose_buf<R: Copy>(src: &[R], m: usize, n: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(src[i * n + j]);
        }
    }
    out
}

fn row_softmax<R: Real>(t: &Tensor<R>, log: bool) -> Tensor<R> {
    let mut data = Vec::with_capacity(t.len());
    for r in 0..t.outer() {
        let row = t.row(r);
        let m = row.iter().copied().fold(R::neg_infinity(), R::max);
        let z: R = row.iter().map(|&v| (v - m).exp()).sum();
        if log {
            let lz = z.ln();
            data.extend(row.iter().map(|&v| v - m - lz));
        } else {
            data.extend(row.iter().map(|&v| (v - m).exp() / z));
        }
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn im2col_1d<R: Real>(x: &[R], c_in: usize, len: usize, k: usize, stride: usize, l_out: usize, cols: &mut [R]) {
    for c in 0..c_in {
        let xc = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * l_out..(c * k + kk + 1) * l_out];
            for (j, v) in row.iter_mut().enumerate() {
                *v = xc[j * stride + kk];
            }
        }
    }
}

fn col2im_1d<R: Real>(cols: &[R], c_in: usize, len: usize, k: usize, stride: usize, l_out: usize, dx: &mut [R]) {
    for c in 0..c_in {
        let dc = &mut dx[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &cols[(c * k + kk) * l_out..(c * k + kk + 1) * l_out];
            for (j, &v) in row.iter().enumerate() {
                dc[j * stride + kk] += v;
            }
        }
    }
}

struct Conv2dGeometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Conv2dGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let [n, c_in, h, w] = <[usize; 4]>::try_from(xs).ok()?;
        let [c_out, wc, kh, kw] = <[usize; 4]>::try_from(ws).ok()?;
        if wc != c_in || stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Conv2dGeometry {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn in_size(&self) -> usize {
        self.c_in * self.h * self.w
    }

    /// Visits (column row, output position, source index) for every
    /// in-bounds tap; padded taps are skipped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            if x < 0 || x >= self.w as isize {
                                continue;
                            }
                            f(row, oy * self.wo + ox, (c * self.h + y as usize) * self.w + x as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<R: Real>(&self, x: &[R], cols: &mut [R]) {
        cols.fill(R::zero());
        let plane = self.ho * self.wo;
        self.for_each_tap(|row, pos, src| cols[row * plane + pos] = x[src]);
    }

    fn col2im<R: Real>(&self, cols: &[R], dx: &mut [R]) {
        let plane = self.ho * self.wo;
        self.for_each_tap(|row, pos, src| dx[src] += cols[row * plane + pos]);
    }
}
