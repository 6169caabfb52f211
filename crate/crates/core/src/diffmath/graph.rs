//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] is an append-only arena of nodes. Every node stores its forward
//! value and the operation that produced it. Creation order is a topological
//! order, so the backward sweep simply walks the arena in reverse.

use super::kernels::{self, ConvGeom, Layout};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]: a tensor together with its differentiation record.
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    MatMul(Var, Var),
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    Max { x: Var, arg: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Conv2d { x: Var, k: Var, geom: ConvGeom, cols: Option<Vec<f64>> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Resize { x: Var, align_corners: bool },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
}

/// Gradients of one scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter leaf reachable from the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|&(v, id)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::shape(op, format!("axis {axis} invalid for rank {}", t.rank())));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A differentiable input bound to a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.value(id).clone());
        self.params.push((v, id));
        v
    }

    /// The parameter's current value as a constant.
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else {
            let shape = kernels::broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
                Error::shape(name, format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()))
            })?;
            let oa = kernels::broadcast_offsets(ta.shape(), &shape);
            let ob = kernels::broadcast_offsets(tb.shape(), &shape);
            let (da, db) = (ta.data(), tb.data());
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::from_parts(shape, data)
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::Offset(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), Layout::Normal, tb.data(), Layout::Normal, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    // ---- reductions (the reduced axis is kept with extent 1) --------------

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.reduce("sum", x, axis, |s| s.iter().sum())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Sum { x, axis }, rg))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.reduce("mean", x, axis, |s| s.iter().sum::<f64>() / s.len() as f64)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Mean { x, axis }, rg))
    }

    /// Maximum along `axis`; ties route the gradient to the first maximal entry.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("max", t, axis)?;
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        let d = t.data();
        let mut vals = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for a in 1..len {
                    let p = base + a * inner;
                    if d[p] > d[best] {
                        best = p;
                    }
                }
                vals.push(d[best]);
                arg.push(best);
            }
        }
        let out = Tensor::from_parts(reduced_shape(t.shape(), axis), vals);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Max { x, arg }, rg))
    }

    fn reduce(
        &self,
        op: &'static str,
        x: Var,
        axis: usize,
        f: impl Fn(&[f64]) -> f64,
    ) -> Result<Tensor> {
        let t = self.value(x);
        check_axis(op, t, axis)?;
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        let d = t.data();
        let mut buf = vec![0.0; len];
        let mut vals = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                for (a, slot) in buf.iter_mut().enumerate() {
                    *slot = d[(o * len + a) * inner + i];
                }
                vals.push(f(&buf));
            }
        }
        Ok(Tensor::from_parts(reduced_shape(t.shape(), axis), vals))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    // ---- structure --------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", self.value(*first), axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for rank {rank}")));
        }
        let out = permute_tensor(t, perm);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Select entries along `axis` (duplicates allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        check_axis("index_select", t, axis)?;
        if indices.is_empty() {
            return Err(Error::shape("index_select", "empty index list"));
        }
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::shape("index_select", format!("index {bad} >= extent {len}")));
        }
        let d = t.data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &ix in indices {
                let start = (o * len + ix) * inner;
                data.extend_from_slice(&d[start..start + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = indices.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---- spatial ----------------------------------------------------------

    /// Cross-correlation of `[C_in,H,W]` with `[C_out,C_in,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        if tx.rank() != 3 || tk.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}", tx.shape(), tk.shape()),
            ));
        }
        let (c_in, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (c_out, kc, kh, kw) = (tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]);
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels, kernel expects {kc}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        let span_h = (h + 2 * pad).checked_sub(kh);
        let span_w = (w + 2 * pad).checked_sub(kw);
        let (span_h, span_w) = match (span_h, span_w) {
            (Some(a), Some(b)) if a % stride == 0 && b % stride == 0 => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("non-integral output extent for {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {pad}"),
                ))
            }
        };
        let geom = ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            h_out: span_h / stride + 1,
            w_out: span_w / stride + 1,
        };
        let cols = (!geom.is_pointwise()).then(|| kernels::im2col(tx.data(), &geom));
        let patches = cols.as_deref().unwrap_or(tx.data());
        let n = geom.col_cols();
        let mut out = vec![0.0; c_out * n];
        kernels::gemm(
            c_out,
            geom.col_rows(),
            n,
            tk.data(),
            Layout::Normal,
            patches,
            Layout::Normal,
            &mut out,
            false,
        );
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(
            Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out),
            Op::Conv2d { x, k, geom, cols },
            rg,
        ))
    }

    /// Bilinear resize of a `[C,H,W]` tensor.
    ///
    /// With `align_corners` the corner samples of input and output coincide;
    /// otherwise sample centres are aligned (half-pixel convention).
    pub fn resize_bilinear(&mut self, x: Var, h_out: usize, w_out: usize, align_corners: bool) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 || h_out == 0 || w_out == 0 {
            return Err(Error::shape("resize_bilinear", format!("{:?} -> {h_out}x{w_out}", t.shape())));
        }
        let out = resize_forward(t, h_out, w_out, align_corners);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Resize { x, align_corners }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("softmax", t, axis)?;
        let out = softmax_tensor(t, axis, false);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("log_softmax", t, axis)?;
        let out = softmax_tensor(t, axis, true);
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax { x, axis }, rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of the one-element `loss` with respect to every node on a
    /// differentiable path to it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must have one element, shape is {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send_broadcast(*a, out.shape(), gd.to_vec(), grads);
                self.send_broadcast(*b, out.shape(), gd.to_vec(), grads);
            }
            Op::Sub(a, b) => {
                self.send_broadcast(*a, out.shape(), gd.to_vec(), grads);
                self.send_broadcast(*b, out.shape(), gd.iter().map(|v| -v).collect(), grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = self.broadcast_operands(*a, *b, out.shape());
                if self.rg(*a) {
                    let d = gd.iter().zip(&vb).map(|(g, y)| g * y).collect();
                    self.send_broadcast(*a, out.shape(), d, grads);
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(&va).map(|(g, x)| g * x).collect();
                    self.send_broadcast(*b, out.shape(), d, grads);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = self.broadcast_operands(*a, *b, out.shape());
                if self.rg(*a) {
                    let d = gd.iter().zip(&vb).map(|(g, y)| g / y).collect();
                    self.send_broadcast(*a, out.shape(), d, grads);
                }
                if self.rg(*b) {
                    let d = gd
                        .iter()
                        .zip(va.iter().zip(&vb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.send_broadcast(*b, out.shape(), d, grads);
                }
            }
            Op::Scale(x, s) => self.send_map(*x, g, |g, _, _| g * s, grads),
            Op::Offset(x) => self.send_map(*x, g, |g, _, _| g, grads),
            Op::Exp(x) => self.send_out(*x, g, out, |g, y| g * y, grads),
            Op::Log(x) => self.send_map(*x, g, |g, x, _| g / x, grads),
            Op::Relu(x) => self.send_map(*x, g, |g, x, _| if x > 0.0 { g } else { 0.0 }, grads),
            Op::Sigmoid(x) => self.send_out(*x, g, out, |g, y| g * y * (1.0 - y), grads),
            Op::Tanh(x) => self.send_out(*x, g, out, |g, y| g * (1.0 - y * y), grads),
            Op::Clamp { x, lo, hi } => self.send_map(
                *x,
                g,
                |g, x, _| if x >= *lo && x <= *hi { g } else { 0.0 },
                grads,
            ),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gd, Layout::Normal, tb.data(), Layout::Transposed, &mut da, false);
                    accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), Layout::Transposed, gd, Layout::Normal, &mut db, false);
                    accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let tx = self.value(*x);
                let (outer, len, inner) = kernels::axis_split(tx.shape(), *axis);
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut d = vec![0.0; tx.len()];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            d[(o * len + a) * inner + i] = gd[o * inner + i] * scale;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::Max { x, arg, .. } => {
                let tx = self.value(*x);
                let mut d = vec![0.0; tx.len()];
                for (gv, &p) in gd.iter().zip(arg) {
                    d[p] += gv;
                }
                accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                let tx = self.value(*x);
                let v = if matches!(node.op, Op::MeanAll(_)) {
                    gd[0] / tx.len() as f64
                } else {
                    gd[0]
                };
                accumulate(grads, *x, Tensor::full(tx.shape(), v));
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = kernels::axis_split(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let chunk = tp.shape()[*axis] * inner;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(tp.len());
                        for o in 0..outer {
                            let s = o * total + offset;
                            d.extend_from_slice(&gd[s..s + chunk]);
                        }
                        accumulate(grads, p, Tensor::from_parts(tp.shape().to_vec(), d));
                    }
                    offset += chunk;
                }
            }
            Op::Conv2d { x, k, geom, cols } => {
                let (tx, tk) = (self.value(*x), self.value(*k));
                let c_out = tk.shape()[0];
                let (rows, n) = (geom.col_rows(), geom.col_cols());
                let patches = cols.as_deref().unwrap_or(tx.data());
                if self.rg(*k) {
                    let mut dk = vec![0.0; c_out * rows];
                    kernels::gemm(c_out, n, rows, gd, Layout::Normal, patches, Layout::Transposed, &mut dk, false);
                    accumulate(grads, *k, Tensor::from_parts(tk.shape().to_vec(), dk));
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; rows * n];
                    kernels::gemm(rows, c_out, n, tk.data(), Layout::Transposed, gd, Layout::Normal, &mut dcols, false);
                    let dx = if geom.is_pointwise() {
                        dcols
                    } else {
                        let mut dx = vec![0.0; tx.len()];
                        kernels::col2im(&dcols, geom, &mut dx);
                        dx
                    };
                    accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), dx));
                }
            }
            Op::Reshape(x) => {
                let tx = self.value(*x);
                accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gd.to_vec()));
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                accumulate(grads, *x, permute_tensor(g, &inverse));
            }
            Op::Resize { x, align_corners } => {
                let tx = self.value(*x);
                accumulate(grads, *x, resize_backward(g, tx.shape(), *align_corners));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| gd[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            d[at(a)] = y[at(a)] * (gd[at(a)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let total: f64 = (0..len).map(|a| gd[at(a)]).sum();
                        for a in 0..len {
                            d[at(a)] = gd[at(a)] - y[at(a)].exp() * total;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::IndexSelect { x, axis, indices } => {
                let tx = self.value(*x);
                let (outer, len, inner) = kernels::axis_split(tx.shape(), *axis);
                let mut d = vec![0.0; tx.len()];
                for o in 0..outer {
                    for (j, &ix) in indices.iter().enumerate() {
                        let src = (o * indices.len() + j) * inner;
                        let dst = (o * len + ix) * inner;
                        for i in 0..inner {
                            d[dst + i] += gd[src + i];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
        }
    }

    fn broadcast_operands(&self, a: Var, b: Var, out_shape: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let expand = |v: Var| {
            let t = self.value(v);
            if t.shape() == out_shape {
                t.data().to_vec()
            } else {
                kernels::broadcast_offsets(t.shape(), out_shape)
                    .into_iter()
                    .map(|o| t.data()[o])
                    .collect()
            }
        };
        (expand(a), expand(b))
    }

    /// Route an output-shaped gradient to `v`, summing over broadcast axes.
    fn send_broadcast(&self, v: Var, out_shape: &[usize], d: Vec<f64>, grads: &mut [Option<Tensor>]) {
        if !self.rg(v) {
            return;
        }
        let shape = self.value(v).shape();
        if shape == out_shape {
            accumulate(grads, v, Tensor::from_parts(shape.to_vec(), d));
            return;
        }
        let mut reduced = vec![0.0; shape.iter().product()];
        for (o, gv) in kernels::broadcast_offsets(shape, out_shape).into_iter().zip(d) {
            reduced[o] += gv;
        }
        accumulate(grads, v, Tensor::from_parts(shape.to_vec(), reduced));
    }

    fn send_map(
        &self,
        x: Var,
        g: &Tensor,
        f: impl Fn(f64, f64, usize) -> f64,
        grads: &mut [Option<Tensor>],
    ) {
        if !self.rg(x) {
            return;
        }
        let tx = self.value(x);
        let d = g
            .data()
            .iter()
            .zip(tx.data())
            .enumerate()
            .map(|(i, (&gv, &xv))| f(gv, xv, i))
            .collect();
        accumulate(grads, x, Tensor::from_parts(tx.shape().to_vec(), d));
    }

    fn send_out(
        &self,
        x: Var,
        g: &Tensor,
        out: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        grads: &mut [Option<Tensor>],
    ) {
        if !self.rg(x) {
            return;
        }
        let d = g.data().iter().zip(out.data()).map(|(&gv, &y)| f(gv, y)).collect();
        accumulate(grads, x, Tensor::from_parts(out.shape().to_vec(), d));
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Shift-stable softmax (or log-softmax) along `axis`.
pub(crate) fn softmax_tensor(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let m = (0..len).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|a| (d[at(a)] - m).exp()).sum();
            let lz = z.ln();
            for a in 0..len {
                out[at(a)] = if log {
                    d[at(a)] - m - lz
                } else {
                    (d[at(a)] - m).exp() / z
                };
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

pub(crate) fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let in_strides = kernels::strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let d = t.data();
    let mut out = Vec::with_capacity(d.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..d.len() {
        out.push(d[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn resize_forward(t: &Tensor, h_out: usize, w_out: usize, align_corners: bool) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let ty = kernels::linear_taps(h, h_out, align_corners);
    let tx = kernels::linear_taps(w, w_out, align_corners);
    let d = t.data();
    let mut out = Vec::with_capacity(c * h_out * w_out);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::from_parts(vec![c, h_out, w_out], out)
}

fn resize_backward(g: &Tensor, in_shape: &[usize], align_corners: bool) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (h_out, w_out) = (g.shape()[1], g.shape()[2]);
    let ty = kernels::linear_taps(h, h_out, align_corners);
    let tx = kernels::linear_taps(w, w_out, align_corners);
    let gd = g.data();
    let mut d = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut d[ch * h * w..(ch + 1) * h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = gd[(ch * h_out + i) * w_out + j];
                plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                plane[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), d)
}
