//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly and appends a node,
//! so the node list is always in topological order. [`Graph::backward`] walks
//! it once in reverse. Gradient flow can be cut with [`Graph::detach`] or
//! negated with [`Graph::reverse_grad`].

mod check;
mod conv;
mod tensor;

pub use check::{grad_check, grad_check_many};
pub use conv::{conv_out_size, conv_transpose_out_size, ConvOptions};
pub use tensor::{Scalar, Tensor};

use conv::ConvGeom;
use tensor::gemm;

use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Exp(Var),
    Log {
        input: Var,
        eps: T,
    },
    Sum {
        input: Var,
        keep: Vec<bool>,
    },
    Reshape(Var),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    SpatialSoftmax(Var),
    ReverseGrad {
        input: Var,
        scale: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of evaluated operations.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Tensor<T>>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.grads = None;
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward seed w.r.t. `v`; `None` when no path
    /// from the seed reaches `v` or `v` does not require gradients.
    pub fn grad(&self, v: Var) -> Result<Option<&Tensor<T>>> {
        let grads = self.grads.as_ref().ok_or(Error::BackwardNotRun)?;
        Ok(grads.get(v.0).and_then(|g| g.as_ref()))
    }

    /// Gradient or zeros of matching shape.
    pub fn grad_or_zeros(&self, v: Var) -> Result<Tensor<T>> {
        Ok(self
            .grad(v)?
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v))))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `(m×k) · (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// NCHW convolution with OIHW weights and optional per-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, opts: ConvOptions) -> Result<Var> {
        let geom = ConvGeom::for_conv(self.shape(input), self.shape(weight), opts)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_c] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[geom.out_c]));
            }
        }
        let out = conv::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(&[geom.batch, geom.out_c, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Transposed convolution with `Cin×Cout×kh×kw` weights (upsampling).
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        opts: ConvOptions,
    ) -> Result<Var> {
        let geom = ConvGeom::for_conv_transpose(self.shape(input), self.shape(weight), opts)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.in_c] {
                return Err(Error::shape("conv_transpose2d bias", self.shape(b), &[geom.in_c]));
            }
        }
        let out = conv::conv_transpose2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(&[geom.batch, geom.in_c, geom.in_h, geom.in_w], out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    /// `ln(max(x, eps))`; the clamp blocks the gradient where it is active.
    pub fn log(&mut self, a: Var, eps: f64) -> Var {
        let eps = T::from_f64(eps);
        let v = self.value(a).map(|x| if x > eps { x.ln() } else { eps.ln() });
        let rg = self.rg(a);
        self.push(v, Op::Log { input: a, eps }, rg)
    }

    /// Sum over all elements to a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum_axes(a, &axes).expect("all axes are valid")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over `axes`, removing them from the shape.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut keep = vec![true; shape.len()];
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::invalid("sum", format!("axis {ax} out of range for {shape:?}")));
            }
            keep[ax] = false;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&d, _)| d)
            .collect();
        let map = reduce_index_map(&shape, &keep);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (&x, &o) in self.value(a).data().iter().zip(&map) {
            out[o] += x;
        }
        let rg = self.rg(a);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Sum { input: a, keep }, rg))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let n: usize = axes.iter().filter_map(|&ax| shape.get(ax)).product();
        let s = self.sum_axes(a, axes)?;
        Ok(self.scale(s, 1.0 / n.max(1) as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.rg(a);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Slice { input: a, axis, start }, rg))
    }

    /// Softmax over the flattened trailing two axes, stabilized by max-subtraction.
    pub fn spatial_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() < 2 {
            return Err(Error::invalid("spatial_softmax", format!("need ≥2 axes, got {:?}", x.shape())));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("spatial_softmax input".into()));
        }
        let plane = x.plane_size();
        let mut out = x.data().to_vec();
        for slice in out.chunks_mut(plane) {
            softmax_in_place(slice);
        }
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SpatialSoftmax(a), rg))
    }

    /// Same value, no gradient flow past this node.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Leaf, false)
    }

    /// Forward identity; backward multiplies the cotangent by `-scale`.
    pub fn reverse_grad(&mut self, a: Var, scale: f64) -> Var {
        let v = self.value(a).clone();
        let rg = self.rg(a);
        self.push(
            v,
            Op::ReverseGrad {
                input: a,
                scale: T::from_f64(scale),
            },
            rg,
        )
    }

    /// Backpropagates from a scalar `seed` with unit cotangent.
    pub fn backward(&mut self, seed: Var) -> Result<()> {
        if self.value(seed).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("seed must be scalar, got shape {:?}; pass an explicit cotangent", self.shape(seed)),
            ));
        }
        let ones = Tensor::full(self.shape(seed), T::one());
        self.backward_with(seed, ones)
    }

    /// Backpropagates an explicit cotangent for `seed`.
    pub fn backward_with(&mut self, seed: Var, cotangent: Tensor<T>) -> Result<()> {
        if cotangent.shape() != self.shape(seed) {
            return Err(Error::shape("backward", cotangent.shape(), self.shape(seed)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(seed) {
            grads[seed.0] = Some(cotangent);
        }
        for idx in (0..=seed.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        // Only leaves and nodes that need gradients keep them.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, g: Vec<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::new(self.shape(v), g).expect("gradient shape"));
                }
            }
        };
        let d = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, d.to_vec());
                send(*b, d.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, d.to_vec());
                send(*b, d.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    send(*a, d.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if self.rg(*b) {
                    send(*b, d.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => send(*a, d.iter().map(|&g| g * *c).collect()),
            Op::AddScalar(a) => send(*a, d.to_vec()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, d, false, self.value(*b).data(), true, &mut da, false);
                    send(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, self.value(*a).data(), true, d, false, &mut db, false);
                    send(*b, db);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let needs = conv::ConvNeeds {
                    input: self.rg(*input),
                    weight: self.rg(*weight),
                };
                let (dx, dw, db) = conv::conv2d_backward(
                    d,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    geom,
                    needs,
                );
                if needs.input {
                    send(*input, dx);
                }
                if needs.weight {
                    send(*weight, dw);
                }
                if let Some(b) = bias {
                    send(*b, db);
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(
                    d,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    geom,
                );
                send(*input, dx);
                send(*weight, dw);
                if let Some(b) = bias {
                    send(*b, db);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                send(
                    *a,
                    d.iter()
                        .zip(x)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Exp(a) => {
                let y = node.value.data();
                send(*a, d.iter().zip(y).map(|(&g, &v)| g * v).collect());
            }
            Op::Log { input, eps } => {
                let x = self.value(*input).data();
                send(
                    *input,
                    d.iter()
                        .zip(x)
                        .map(|(&g, &v)| if v > *eps { g / v } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sum { input, keep } => {
                let map = reduce_index_map(self.shape(*input), keep);
                send(*input, map.iter().map(|&o| d[o]).collect());
            }
            Op::Reshape(a) => send(*a, d.to_vec()),
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for o in 0..outer {
                    let dst = o * shape[*axis] * inner + start * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
                }
                send(*input, dx);
            }
            Op::SpatialSoftmax(a) => {
                let plane = node.value.plane_size();
                let mut dx = Vec::with_capacity(d.len());
                for (ys, gs) in node.value.data().chunks(plane).zip(d.chunks(plane)) {
                    let dot: T = ys.iter().zip(gs).map(|(&y, &g)| y * g).sum();
                    dx.extend(ys.iter().zip(gs).map(|(&y, &g)| y * (g - dot)));
                }
                send(*a, dx);
            }
            Op::ReverseGrad { input, scale } => {
                let s = -*scale;
                send(*input, d.iter().map(|&g| g * s).collect());
            }
        }
    }
}

/// In-place softmax of one slice with max-subtraction.
pub(crate) fn softmax_in_place<T: Scalar>(slice: &mut [T]) {
    let m = slice.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in slice.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in slice.iter_mut() {
        *v = *v / total;
    }
}

/// For each flat input index, the flat output index after dropping `!keep` axes.
fn reduce_index_map(shape: &[usize], keep: &[bool]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out_strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        if keep[ax] {
            out_strides[ax] = acc;
            acc *= shape[ax];
        }
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut o = 0usize;
    for _ in 0..n {
        map.push(o);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            o += out_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            o -= out_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    map
}
