//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order, so the tape order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Parameters enter the tape
//! by reference; nothing is copied until an operation produces a new value.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{dims2, Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags, used for diagnostics and for fault injection in the
/// gradient-check harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Linear,
    Conv2d,
    MaxPool2,
    Tanh,
    Sigmoid,
    Relu,
    SoftmaxRows,
    Add,
    Mul,
    Scale,
    Sum,
    Concat,
    Reshape,
    Transpose,
    Row,
    BceLogits,
    BceProb,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Transpose(Var),
    Row(Var, usize),
    BceLogits { z: Var, target: Vec<F> },
    BceProb { p: Var, target: Vec<F> },
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Row(..) => OpKind::Row,
            Op::BceLogits { .. } => OpKind::BceLogits,
            Op::BceProb { .. } => OpKind::BceProb,
        }
    }
}

struct Node<'a, F: Real> {
    value: Cow<'a, Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// One forward pass worth of recorded operations.
pub struct Graph<'a, F: Real> {
    nodes: Vec<Node<'a, F>>,
    fault: Option<OpKind>,
}

impl<'a, F: Real> Default for Graph<'a, F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to `var`, or `None` when `var` is
    /// not a leaf on a path to the loss.
    pub fn get(&self, var: Var) -> Option<Tensor<F>> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn get_slice(&self, var: Var) -> Option<&[F]> {
        self.grads[var.0].as_deref()
    }
}

impl<'a, F: Real> Graph<'a, F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Makes the backward rule of `kind` deliberately wrong. Used only as a
    /// negative control for the gradient checker.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Cow<'a, Tensor<F>>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Trainable leaf borrowed from a parameter store.
    pub fn param(&mut self, t: &'a Tensor<F>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Non-trainable leaf borrowed from caller data.
    pub fn input(&mut self, t: &'a Tensor<F>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Owned leaf; `requires_grad` decides whether backward reports its gradient.
    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    // ----- linear algebra -----

    /// `a[m×k] · b[k×n]`, or a matrix-vector product when `b` is `[k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = dims2(self.shape(a))?;
        let (k2, n, vec_out) = match self.shape(b) {
            [k2, n] => (*k2, *n, false),
            [k2] => (*k2, 1, true),
            s => return Err(Error::dim(format!("matmul rhs must be rank 1 or 2, got {s:?}"))),
        };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            F::zero(),
            &mut out,
        );
        let shape = if vec_out { vec![m] } else { vec![m, n] };
        Ok(self.push_op(Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Fully connected layer `x·wᵀ + b` for `x` of shape `[in]` or `[n×in]`,
    /// `w` of shape `[out×in]` and `b` of shape `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [out_w, in_w] = dims2(self.shape(w))?;
        let (n, in_x, vec_in) = match self.shape(x) {
            [i] => (1, *i, true),
            [n, i] => (*n, *i, false),
            s => return Err(Error::dim(format!("linear input must be rank 1 or 2, got {s:?}"))),
        };
        if in_x != in_w || self.shape(b) != [out_w] {
            return Err(Error::dim(format!(
                "linear shapes disagree: x {:?}, w {:?}, b {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(n * out_w);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        F::gemm(
            n,
            in_w,
            out_w,
            self.value(x).data(),
            in_w as isize,
            1,
            self.value(w).data(),
            1,
            in_w as isize,
            F::one(),
            &mut out,
        );
        let shape = if vec_in { vec![out_w] } else { vec![n, out_w] };
        Ok(self.push_op(Tensor::new(shape, out)?, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Stride-1 cross-correlation with "same" zero padding. `x` is `[C×H×W]`
    /// or a batch `[N×C×H×W]`; kernels are `[Cout×Cin×kh×kw]`. The padding
    /// before each axis is `k/2` so even kernels pad only top/left.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(k), self.shape(b))?;
        let col = geo.im2col(self.value(x).data());
        let kd = self.value(k).data();
        let cols = geo.n * geo.hw();
        let mut tmp = vec![F::zero(); geo.cout * cols];
        F::gemm(
            geo.cout,
            geo.ckk(),
            cols,
            kd,
            geo.ckk() as isize,
            1,
            &col,
            cols as isize,
            1,
            F::zero(),
            &mut tmp,
        );
        let bias = self.value(b).data();
        let hw = geo.hw();
        let mut out = vec![F::zero(); geo.n * geo.cout * hw];
        for co in 0..geo.cout {
            for img in 0..geo.n {
                let src = &tmp[co * cols + img * hw..co * cols + (img + 1) * hw];
                let dst = &mut out[(img * geo.cout + co) * hw..(img * geo.cout + co + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + bias[co];
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let c_axis = shape.len() - 3;
        shape[c_axis] = geo.cout;
        Ok(self.push_op(Tensor::new(shape, out)?, Op::Conv2d { x, k, b }, &[x, k, b]))
    }

    /// 2×2 max-pooling with stride 2 over the last two axes; a trailing odd
    /// row or column is dropped. Ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("maxpool2 needs rank >= 2, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h < 2 || w < 2 {
            return Err(Error::dim(format!("maxpool2 needs H, W >= 2, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let mut oshape = shape;
        let r = oshape.len();
        oshape[r - 2] = oh;
        oshape[r - 1] = ow;
        Ok(self.push_op(Tensor::new(oshape, out)?, Op::MaxPool2 { x, argmax }, &[x]))
    }

    // ----- elementwise -----

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push_op(out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push_op(out, Op::Sigmoid(x), &[x])
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(F::zero()));
        self.push_op(out, Op::Relu(x), &[x])
    }

    /// Softmax along the last axis of a `[T×R]` matrix (or a single vector),
    /// each row normalized independently.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = match shape.as_slice() {
            [c] | [_, c] => *c,
            s => return Err(Error::dim(format!("softmax_rows needs rank 1 or 2, got {s:?}"))),
        };
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        Ok(self.push_op(Tensor::new(shape, out)?, Op::SoftmaxRows(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<F> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(Tensor::new(shape, out)?, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<F> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push_op(out, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::from_usize(self.value(x).len()).unwrap();
        let s = self.sum(x);
        self.scale(s, F::one() / n)
    }

    // ----- structure -----

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let agree = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !agree {
                return Err(Error::dim(format!("concat shapes disagree: {base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(t, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(p));
            rows.push(self.reshape(p, s)?);
        }
        self.concat(&rows, 0)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose2()?;
        Ok(self.push_op(t, Op::Transpose(x), &[x]))
    }

    /// Leading-axis slice `x[i]`.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || i >= shape[0] {
            return Err(Error::dim(format!("row {i} out of range for {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[i * inner..(i + 1) * inner].to_vec();
        let t = Tensor::new(shape[1..].to_vec(), data)?;
        Ok(self.push_op(t, Op::Row(x, i), &[x]))
    }

    // ----- losses -----

    /// Mean binary cross-entropy evaluated from logits in the stable form
    /// `max(z,0) - z·y + log(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, z: Var, target: &Tensor<F>) -> Result<Var> {
        if self.shape(z) != target.shape() {
            return Err(Error::dim(format!(
                "bce target {:?} does not match logits {:?}",
                target.shape(),
                self.shape(z)
            )));
        }
        let n = F::from_usize(target.len()).unwrap();
        let loss: F = self
            .value(z)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(F::zero()) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<F>()
            / n;
        let op = Op::BceLogits { z, target: target.data().to_vec() };
        Ok(self.push_op(Tensor::scalar(loss), op, &[z]))
    }

    /// Mean binary cross-entropy of probabilities clamped to `[ε, 1-ε]`.
    pub fn bce_prob(&mut self, p: Var, target: &Tensor<F>) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::dim(format!(
                "bce target {:?} does not match probabilities {:?}",
                target.shape(),
                self.shape(p)
            )));
        }
        let n = F::from_usize(target.len()).unwrap();
        let loss = bce_prob_value(self.value(p).data(), target.data()) / n;
        let op = Op::BceProb { p, target: target.data().to_vec() };
        Ok(self.push_op(Tensor::scalar(loss), op, &[p]))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what} shapes disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ----- backward -----

    /// Reverse sweep from a scalar `loss`, accumulating gradients across
    /// fan-out. Gradients are retained for leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar target, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let g = if self.fault == Some(node.op.kind()) {
                g.into_iter().map(|v| v * F::from_f64_lossy(1.25)).collect()
            } else {
                g
            };
            self.backward_node(i, &g, &mut grads)?;
        }
        let shapes = self.nodes[..n].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = dims2(self.shape(*a))?;
                let n = self.value(*b).len() / k;
                if self.needs(*a) {
                    // ga[m×k] += g[m×n] · bᵀ
                    let ga = slot(grads, *a, m * k);
                    F::gemm(m, n, k, g, n as isize, 1, self.value(*b).data(), 1, n as isize, F::one(), ga);
                }
                if self.needs(*b) {
                    // gb[k×n] += aᵀ · g
                    let gb = slot(grads, *b, k * n);
                    F::gemm(k, m, n, self.value(*a).data(), 1, k as isize, g, n as isize, 1, F::one(), gb);
                }
            }
            Op::Linear { x, w, b } => {
                let [out_w, in_w] = dims2(self.shape(*w))?;
                let n = self.value(*x).len() / in_w;
                if self.needs(*x) {
                    let gx = slot(grads, *x, n * in_w);
                    F::gemm(n, out_w, in_w, g, out_w as isize, 1, self.value(*w).data(), in_w as isize, 1, F::one(), gx);
                }
                if self.needs(*w) {
                    let gw = slot(grads, *w, out_w * in_w);
                    F::gemm(out_w, n, in_w, g, 1, out_w as isize, self.value(*x).data(), in_w as isize, 1, F::one(), gw);
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, out_w);
                    for row in g.chunks(out_w) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc = *acc + *v;
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b } => {
                let geo = ConvGeometry::new(self.shape(*x), self.shape(*k), self.shape(*b))?;
                let hw = geo.hw();
                let cols = geo.n * hw;
                // Regroup g from [N×Cout×HW] to [Cout×(N·HW)].
                let mut gp = vec![F::zero(); geo.cout * cols];
                for img in 0..geo.n {
                    for co in 0..geo.cout {
                        let src = &g[(img * geo.cout + co) * hw..(img * geo.cout + co + 1) * hw];
                        gp[co * cols + img * hw..co * cols + (img + 1) * hw].copy_from_slice(src);
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, geo.cout);
                    for co in 0..geo.cout {
                        gb[co] = gb[co] + gp[co * cols..(co + 1) * cols].iter().copied().sum::<F>();
                    }
                }
                if self.needs(*k) {
                    let col = geo.im2col(self.value(*x).data());
                    let gk = slot(grads, *k, geo.cout * geo.ckk());
                    F::gemm(geo.cout, cols, geo.ckk(), &gp, cols as isize, 1, &col, 1, cols as isize, F::one(), gk);
                }
                if self.needs(*x) {
                    let mut gcol = vec![F::zero(); geo.ckk() * cols];
                    let kd = self.value(*k).data();
                    F::gemm(geo.ckk(), geo.cout, cols, kd, 1, geo.ckk() as isize, &gp, cols as isize, 1, F::zero(), &mut gcol);
                    let gx = slot(grads, *x, geo.n * geo.cin * hw);
                    geo.col2im_add(&gcol, gx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs(*x) {
                    let len = self.value(*x).len();
                    let gx = slot(grads, *x, len);
                    for (gv, &src) in g.iter().zip(argmax) {
                        gx[src] = gx[src] + *gv;
                    }
                }
            }
            Op::Tanh(x) => {
                let gx = slot(grads, *x, out.len());
                for ((acc, gv), y) in gx.iter_mut().zip(g).zip(out) {
                    *acc = *acc + *gv * (F::one() - *y * *y);
                }
            }
            Op::Sigmoid(x) => {
                let gx = slot(grads, *x, out.len());
                for ((acc, gv), y) in gx.iter_mut().zip(g).zip(out) {
                    *acc = *acc + *gv * *y * (F::one() - *y);
                }
            }
            Op::Relu(x) => {
                let xin = self.value(*x).data();
                let gx = slot(grads, *x, out.len());
                for ((acc, gv), v) in gx.iter_mut().zip(g).zip(xin) {
                    if *v > F::zero() {
                        *acc = *acc + *gv;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                let gx = slot(grads, *x, out.len());
                for ((gr, yr), acc) in
                    g.chunks(cols).zip(out.chunks(cols)).zip(gx.chunks_mut(cols))
                {
                    let dot: F = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    for ((a, gv), y) in acc.iter_mut().zip(gr).zip(yr) {
                        *a = *a + *y * (*gv - dot);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((acc, gv), o) in ga.iter_mut().zip(g).zip(bv) {
                        *acc = *acc + *gv * *o;
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, g.len());
                    for ((acc, gv), o) in gb.iter_mut().zip(g).zip(av) {
                        *acc = *acc + *gv * *o;
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = slot(grads, *x, g.len());
                for (acc, gv) in gx.iter_mut().zip(g) {
                    *acc = *acc + *gv * *c;
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                let gx = slot(grads, *x, len);
                for acc in gx.iter_mut() {
                    *acc = *acc + g[0];
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.shape(*p)[*axis] * inner;
                    if self.needs(*p) {
                        let gp = slot(grads, *p, outer * chunk);
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(x) => add_into(slot(grads, *x, g.len()), g),
            Op::Transpose(x) => {
                let [r, c] = dims2(self.shape(*x))?;
                let gx = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                    }
                }
            }
            Op::Row(x, r) => {
                let len = self.value(*x).len();
                let gx = slot(grads, *x, len);
                add_into(&mut gx[r * g.len()..(r + 1) * g.len()], g);
            }
            Op::BceLogits { z, target } => {
                let n = F::from_usize(target.len()).unwrap();
                let zv = self.value(*z).data();
                let gz = slot(grads, *z, zv.len());
                for ((acc, zi), yi) in gz.iter_mut().zip(zv).zip(target) {
                    *acc = *acc + g[0] * (sigmoid(*zi) - *yi) / n;
                }
            }
            Op::BceProb { p, target } => {
                let n = F::from_usize(target.len()).unwrap();
                let eps = F::from_f64_lossy(BCE_EPS);
                let pv = self.value(*p).data();
                let gp = slot(grads, *p, pv.len());
                for ((acc, pi), yi) in gp.iter_mut().zip(pv).zip(target) {
                    if *pi < eps || *pi > F::one() - eps {
                        continue;
                    }
                    let d = -(*yi / *pi) + (F::one() - *yi) / (F::one() - *pi);
                    *acc = *acc + g[0] * d / n;
                }
            }
        }
        Ok(())
    }
}

fn slot<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Real>(acc: &mut [F], g: &[F]) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a = *a + *v;
    }
}

pub(crate) fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Sum over entries of the clamped cross-entropy terms.
pub(crate) fn bce_prob_value<F: Real>(p: &[F], y: &[F]) -> F {
    let eps = F::from_f64_lossy(BCE_EPS);
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.max(eps).min(F::one() - eps);
            -(y * p.ln() + (F::one() - y) * (F::one() - p).ln())
        })
        .sum()
}

struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ks: &[usize], bs: &[usize]) -> Result<Self> {
        let (n, cin, h, w) = match xs {
            [c, h, w] => (1, *c, *h, *w),
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(Error::dim(format!("conv2d input must be CxHxW or NxCxHxW, got {s:?}"))),
        };
        let [cout, kc, kh, kw] = match ks {
            [a, b, c, d] => [*a, *b, *c, *d],
            s => return Err(Error::dim(format!("conv2d kernels must be rank 4, got {s:?}"))),
        };
        if kc != cin || bs != [cout] {
            return Err(Error::dim(format!(
                "conv2d shapes disagree: input {xs:?}, kernels {ks:?}, bias {bs:?}"
            )));
        }
        // Same padding adds k-1 rows/cols, so the kernel fits iff the input is non-empty.
        if kh == 0 || kw == 0 || kh > h + kh - 1 || kw > w + kw - 1 || h == 0 || w == 0 {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                (h + kh).saturating_sub(1),
                (w + kw).saturating_sub(1)
            )));
        }
        Ok(Self { n, cin, h, w, cout, kh, kw })
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Rows index (ci, a, b) kernel taps; columns index (image, y, x).
    fn im2col<F: Real>(&self, x: &[F]) -> Vec<F> {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let hw = self.hw();
        let cols = self.n * hw;
        let mut col = vec![F::zero(); self.ckk() * cols];
        for ci in 0..self.cin {
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (ci * self.kh + a) * self.kw + b;
                    for img in 0..self.n {
                        let plane = &x[(img * self.cin + ci) * hw..(img * self.cin + ci + 1) * hw];
                        let dst = &mut col[row * cols + img * hw..row * cols + (img + 1) * hw];
                        for y in 0..self.h {
                            let sy = y + a;
                            if sy < ph || sy - ph >= self.h {
                                continue;
                            }
                            let sy = sy - ph;
                            // Output columns whose tap lands inside the row.
                            let (x0, x1) = (pw.saturating_sub(b), (self.w + pw).saturating_sub(b).min(self.w));
                            if x0 < x1 {
                                let s0 = sy * self.w + x0 + b - pw;
                                dst[y * self.w + x0..y * self.w + x1].copy_from_slice(&plane[s0..s0 + x1 - x0]);
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im_add<F: Real>(&self, col: &[F], gx: &mut [F]) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let hw = self.hw();
        let cols = self.n * hw;
        for ci in 0..self.cin {
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (ci * self.kh + a) * self.kw + b;
                    for img in 0..self.n {
                        let src = &col[row * cols + img * hw..row * cols + (img + 1) * hw];
                        let plane = &mut gx[(img * self.cin + ci) * hw..(img * self.cin + ci + 1) * hw];
                        for y in 0..self.h {
                            let sy = y + a;
                            if sy < ph || sy - ph >= self.h {
                                continue;
                            }
                            let sy = sy - ph;
                            let (x0, x1) = (pw.saturating_sub(b), (self.w + pw).saturating_sub(b).min(self.w));
                            if x0 < x1 {
                                let s0 = sy * self.w + x0 + b - pw;
                                let dst = &mut plane[s0..s0 + x1 - x0];
                                for (d, v) in dst.iter_mut().zip(&src[y * self.w + x0..y * self.w + x1]) {
                                    *d = *d + *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
