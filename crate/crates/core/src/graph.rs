//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation evaluates
//! eagerly, stores its result, and records how it was produced. Because nodes
//! are only ever appended, the arena order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//!
//! Every operation checks its output for NaN/Inf and fails with
//! [`TensorError::NonFinite`] instead of letting bad values propagate.

use crate::scalar::Real;
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    MulScalar(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    SoftmaxRows(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        cols: Vec<T>,
    },
    BilinearSample {
        x: Var,
        coords: Var,
    },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<(), TensorError> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A learnable leaf; its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        check_finite(name, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, requires_grad))
    }

    /// Which linear piece every piecewise op is on: the sign of each rectifier
    /// input and the grid cell of each bilinear sampling point. Two evaluations
    /// with equal signatures lie on the same smooth piece of the function.
    pub fn piece_signature(&self) -> Vec<i64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => sig.extend(
                    self.value(*x)
                        .data()
                        .iter()
                        .map(|&v| i64::from(v > T::zero())),
                ),
                Op::BilinearSample { coords, .. } => sig.extend(
                    self.value(*coords)
                        .data()
                        .iter()
                        .map(|v| v.floor().to_i64().unwrap_or(i64::MIN)),
                ),
                _ => {}
            }
        }
        sig
    }

    fn dims2(&self, op: &'static str, var: Var) -> Result<(usize, usize), TensorError> {
        self.value(var).dims2().ok_or_else(|| {
            TensorError::invalid(op, format!("expected a matrix, got {:?}", self.shape(var)))
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.emit("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.emit(name, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| v * factor);
        let shape = value.shape().to_vec();
        self.emit(
            "scale",
            shape,
            value.into_data(),
            Op::Scale(x, factor),
            &[x],
        )
    }

    /// `x[m×n] + bias[n]`, the bias added to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2("add_row_bias", x)?;
        if self.value(bias).numel() != n {
            return Err(TensorError::dim(
                "add_row_bias",
                self.shape(x),
                self.shape(bias),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        self.emit(
            "add_row_bias",
            vec![m, n],
            data,
            Op::AddRowBias(x, bias),
            &[x, bias],
        )
    }

    /// `x * s` where `s` holds a single value.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::dim("mul_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data()[0];
        let value = self.value(x).map(|v| v * sv);
        let shape = value.shape().to_vec();
        self.emit(
            "mul_scalar",
            shape,
            value.into_data(),
            Op::MulScalar(x, s),
            &[x, s],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2("transpose", x)?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.emit("transpose", vec![n, m], data, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(TensorError::dim("reshape", self.shape(x), &shape));
        }
        let data = self.value(x).data().to_vec();
        self.emit("reshape", shape, data, Op::Reshape(x), &[x])
    }

    /// `out[i] = x.flat[indices[i]]`, laid out with `shape`.
    pub fn gather(
        &mut self,
        x: Var,
        indices: Vec<usize>,
        shape: Vec<usize>,
    ) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != indices.len() {
            return Err(TensorError::invalid(
                "gather",
                format!("{} indices cannot fill shape {:?}", indices.len(), shape),
            ));
        }
        let src = self.value(x).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::invalid(
                "gather",
                format!("index {bad} out of range for {} values", src.len()),
            ));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        self.emit("gather", shape, data, Op::Gather(x, indices), &[x])
    }

    /// Flattens and concatenates its inputs into a rank-1 tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat", "no inputs"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len();
        self.emit("concat", vec![n], data, Op::Concat(parts.to_vec()), parts)
    }

    /// Row-wise softmax with per-row max subtraction. Rank-1 inputs are one row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("softmax_rows", "empty shape"))?;
        if shape.len() > 2 || n == 0 {
            return Err(TensorError::invalid(
                "softmax_rows",
                format!("unsupported shape {shape:?}"),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.emit("softmax_rows", shape, data, Op::SoftmaxRows(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let shape = value.shape().to_vec();
        self.emit("relu", shape, value.into_data(), Op::Relu(x), &[x])
    }

    /// 3×3 cross-correlation with zero padding 1: `x[c×h×w]`, `kernel[o×c×3×3]`,
    /// optional per-output-channel `bias[o]` → `[o×h×w]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let (c, h, w) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => {
                return Err(TensorError::invalid(
                    "conv2d",
                    format!("input must be c×h×w, got {s:?}"),
                ))
            }
        };
        let o = match self.shape(kernel) {
            &[o, kc, 3, 3] if kc == c => o,
            _ => {
                return Err(TensorError::dim(
                    "conv2d",
                    self.shape(x),
                    self.shape(kernel),
                ))
            }
        };
        if let Some(b) = bias {
            if self.value(b).numel() != o {
                return Err(TensorError::dim(
                    "conv2d",
                    self.shape(kernel),
                    self.shape(b),
                ));
            }
        }
        let hw = h * w;
        let cols = im2col(self.value(x).data(), c, h, w);
        let mut out = vec![T::zero(); o * hw];
        matmul_into(self.value(kernel).data(), &cols, &mut out, o, c * 9, hw);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (row, &bias_o) in out.chunks_mut(hw).zip(bv) {
                for v in row {
                    *v += bias_o;
                }
            }
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.emit(
            "conv2d",
            vec![o, h, w],
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                cols,
            },
            &inputs,
        )
    }

    /// Bilinear interpolation of `x[c×h×w]` at real-valued `(y, x)` rows of
    /// `coords[len×2]` → `[c×len]`. Reads outside the grid are zero.
    pub fn bilinear_sample(&mut self, x: Var, coords: Var) -> Result<Var, TensorError> {
        let (c, h, w) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => {
                return Err(TensorError::invalid(
                    "bilinear_sample",
                    format!("input must be c×h×w, got {s:?}"),
                ))
            }
        };
        let len = match self.shape(coords) {
            &[len, 2] => len,
            s => {
                return Err(TensorError::invalid(
                    "bilinear_sample",
                    format!("coords must be len×2, got {s:?}"),
                ))
            }
        };
        let src = self.value(x).data();
        let pts = self.value(coords).data();
        let mut out = vec![T::zero(); c * len];
        for p in 0..len {
            let taps = BilinearTaps::new(pts[2 * p], pts[2 * p + 1], h, w);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                out[ch * len + p] = taps.interpolate(plane);
            }
        }
        self.emit(
            "bilinear_sample",
            vec![c, len],
            out,
            Op::BilinearSample { x, coords },
            &[x, coords],
        )
    }

    /// Mean over the rows of `x[m×n]` → `[n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2("mean_rows", x)?;
        if m == 0 {
            return Err(TensorError::invalid("mean_rows", "no rows"));
        }
        let mut out = vec![T::zero(); n];
        for row in self.value(x).data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::from_usize_lossy(m);
        out.iter_mut().for_each(|v| *v *= inv);
        self.emit("mean_rows", vec![n], out, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().copied().sum();
        self.emit("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// `−log softmax(logits)[target]` over the flattened logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, TensorError> {
        let l = self.value(logits).data();
        if target >= l.len() {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("target {target} out of range for {} classes", l.len()),
            ));
        }
        let loss = log_sum_exp(l) - l[target];
        self.emit(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, target },
            &[logits],
        )
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("root must be a scalar, got shape {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out = Vec::with_capacity(grads.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            match g {
                Some(data) if node.requires_grad => {
                    check_finite("backward", &data)?;
                    out.push(Some(Tensor::new(node.value.shape().to_vec(), data)?));
                }
                _ => out.push(None),
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let slot =
            grads[var.0].get_or_insert_with(|| vec![T::zero(); self.nodes[var.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().expect("matrix");
                let n = self.value(b).shape()[1];
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accumulate(grads, a, |ga| matmul_bt_into(g, bv, ga, m, n, k));
                self.accumulate(grads, b, |gb| matmul_at_into(av, g, gb, m, k, n));
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |ga| add_assign(ga, g));
                self.accumulate(grads, b, |gb| add_assign(gb, g));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |ga| add_assign(ga, g));
                self.accumulate(grads, b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(d, &v)| *d -= v)
                });
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accumulate(grads, a, |ga| {
                    for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for ((d, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            &Op::Scale(x, factor) => {
                self.accumulate(grads, x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * factor)
                });
            }
            &Op::AddRowBias(x, bias) => {
                let n = self.value(bias).numel();
                self.accumulate(grads, x, |gx| add_assign(gx, g));
                self.accumulate(grads, bias, |gb| {
                    for row in g.chunks(n) {
                        add_assign(gb, row);
                    }
                });
            }
            &Op::MulScalar(x, s) => {
                let sv = self.value(s).data()[0];
                let xv = self.value(x).data();
                self.accumulate(grads, x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * sv)
                });
                self.accumulate(grads, s, |gs| {
                    gs[0] += g.iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>();
                });
            }
            &Op::Transpose(x) => {
                let (m, n) = self.value(x).dims2().expect("matrix");
                self.accumulate(grads, x, |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            &Op::Reshape(x) => self.accumulate(grads, x, |gx| add_assign(gx, g)),
            Op::Gather(x, indices) => {
                self.accumulate(grads, *x, |gx| {
                    for (&i, &v) in indices.iter().zip(g) {
                        gx[i] += v;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |gp| add_assign(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            &Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("non-empty");
                self.accumulate(grads, x, |gx| {
                    for ((gx_row, y_row), g_row) in
                        gx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n))
                    {
                        let dot: T = y_row.iter().zip(g_row).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in gx_row.iter_mut().zip(y_row).zip(g_row) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |gx| {
                    for ((d, &v), &gv) in gx.iter_mut().zip(xv).zip(g) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                cols,
            } => {
                let (c, h, w) = match self.shape(*x) {
                    &[c, h, w] => (c, h, w),
                    _ => unreachable!("validated in forward"),
                };
                let o = self.shape(*kernel)[0];
                let hw = h * w;
                let kv = self.value(*kernel).data();
                self.accumulate(grads, *kernel, |gk| {
                    matmul_bt_into(g, cols, gk, o, hw, c * 9)
                });
                if let Some(b) = *bias {
                    self.accumulate(grads, b, |gb| {
                        for (d, row) in gb.iter_mut().zip(g.chunks(hw)) {
                            *d += row.iter().copied().sum::<T>();
                        }
                    });
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![T::zero(); c * 9 * hw];
                    matmul_at_into(kv, g, &mut dcols, o, c * 9, hw);
                    self.accumulate(grads, *x, |gx| col2im_add(&dcols, gx, c, h, w));
                }
            }
            &Op::BilinearSample { x, coords } => {
                let (c, h, w) = match self.shape(x) {
                    &[c, h, w] => (c, h, w),
                    _ => unreachable!("validated in forward"),
                };
                let len = self.shape(coords)[0];
                let src = self.value(x).data();
                let pts = self.value(coords).data();
                let taps: Vec<BilinearTaps<T>> = (0..len)
                    .map(|p| BilinearTaps::new(pts[2 * p], pts[2 * p + 1], h, w))
                    .collect();
                self.accumulate(grads, x, |gx| {
                    for (p, t) in taps.iter().enumerate() {
                        for ch in 0..c {
                            t.scatter(&mut gx[ch * h * w..(ch + 1) * h * w], g[ch * len + p]);
                        }
                    }
                });
                self.accumulate(grads, coords, |gc| {
                    for (p, t) in taps.iter().enumerate() {
                        let (mut dy, mut dx) = (T::zero(), T::zero());
                        for ch in 0..c {
                            let (py, px) = t.coord_partials(&src[ch * h * w..(ch + 1) * h * w]);
                            dy += g[ch * len + p] * py;
                            dx += g[ch * len + p] * px;
                        }
                        gc[2 * p] += dy;
                        gc[2 * p + 1] += dx;
                    }
                });
            }
            &Op::MeanRows(x) => {
                let (m, n) = self.value(x).dims2().expect("matrix");
                let inv = T::one() / T::from_usize_lossy(m);
                self.accumulate(grads, x, |gx| {
                    for row in gx.chunks_mut(n) {
                        for (d, &gv) in row.iter_mut().zip(g) {
                            *d += gv * inv;
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                let gv = g[0];
                self.accumulate(grads, x, |gx| gx.iter_mut().for_each(|d| *d += gv));
            }
            &Op::CrossEntropy { logits, target } => {
                let mut p = self.value(logits).data().to_vec();
                softmax_in_place(&mut p);
                let gv = g[0];
                self.accumulate(grads, logits, |gl| {
                    for (k, (d, &pk)) in gl.iter_mut().zip(&p).enumerate() {
                        let indicator = if k == target { T::one() } else { T::zero() };
                        *d += gv * (pk - indicator);
                    }
                });
            }
        }
    }
}

fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Stable in-place softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); c * 9 * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        row[y * w + xx] = plane[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], gx: &mut [T], c: usize, h: usize, w: usize) {
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        gx[ch * hw + sy as usize * w + sx as usize] += row[y * w + xx];
                    }
                }
            }
        }
    }
}

/// The four neighbours of a sampling point and their bilinear weights.
struct BilinearTaps<T> {
    /// Flat offsets of (y0,x0), (y0,x1), (y1,x0), (y1,x1); `None` when outside the grid.
    idx: [Option<usize>; 4],
    fy: T,
    fx: T,
}

impl<T: Real> BilinearTaps<T> {
    fn new(y: T, x: T, h: usize, w: usize) -> Self {
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let y0 = y0.to_isize().unwrap_or(isize::MIN / 2);
        let x0 = x0.to_isize().unwrap_or(isize::MIN / 2);
        let at = |yy: isize, xx: isize| {
            (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w)
                .then(|| yy as usize * w + xx as usize)
        };
        BilinearTaps {
            idx: [
                at(y0, x0),
                at(y0, x0 + 1),
                at(y0 + 1, x0),
                at(y0 + 1, x0 + 1),
            ],
            fy,
            fx,
        }
    }

    fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.fy) * (one - self.fx),
            (one - self.fy) * self.fx,
            self.fy * (one - self.fx),
            self.fy * self.fx,
        ]
    }

    fn corners(&self, plane: &[T]) -> [T; 4] {
        self.idx.map(|i| i.map_or(T::zero(), |i| plane[i]))
    }

    fn interpolate(&self, plane: &[T]) -> T {
        let v = self.corners(plane);
        self.weights().iter().zip(&v).map(|(&a, &b)| a * b).sum()
    }

    fn scatter(&self, grad_plane: &mut [T], g: T) {
        for (i, wgt) in self.idx.iter().zip(self.weights()) {
            if let Some(i) = *i {
                grad_plane[i] += g * wgt;
            }
        }
    }

    /// Partial derivatives of the interpolated value with respect to (y, x).
    fn coord_partials(&self, plane: &[T]) -> (T, T) {
        let [v00, v01, v10, v11] = self.corners(plane);
        let one = T::one();
        let dy = (one - self.fx) * (v10 - v00) + self.fx * (v11 - v01);
        let dx = (one - self.fy) * (v01 - v00) + self.fy * (v11 - v10);
        (dy, dx)
    }
}
