//! Dense row-major `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (reference counted) to an immutable node of
//! the computation graph. Operations on tensors that require gradients record
//! a backward rule; [`Tensor::backward`] walks the graph in reverse
//! topological order and accumulates gradients into every leaf that was
//! created with [`Tensor::param`].

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

use crate::error::TensorError;

/// Large negative sentinel used for masked attention scores.
///
/// `exp(MASK_NEG - finite)` underflows to exactly `0.0`, and unlike a true
/// infinity it never produces `NaN` through `-inf - -inf`.
pub const MASK_NEG: f64 = -1e30;

/// Entries at or below this value are treated as masked by [`Tensor::softmax`].
const MASKED_THRESHOLD: f64 = MASK_NEG * 0.5;

/// Minimum slice norm accepted by [`Tensor::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

type BackwardFn = dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>>;

struct GradFn {
    name: &'static str,
    inputs: Vec<Tensor>,
    // (grad of output, output data) -> grad for each input, in order
    backward: Box<BackwardFn>,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

/// Handle to a node in the autodiff graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if self.0.data.len() <= 16 {
            s.field("data", &self.0.data);
        }
        if let Some(g) = &self.0.grad_fn {
            s.field("op", &g.name);
        }
        s.field("requires_grad", &self.0.requires_grad).finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// Numpy-style broadcast of two shapes.
fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// shape `in_shape` that broadcasts to it.
fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            eff[offset + i] = in_strides[i];
        }
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn reduce_to(grad: &[f64], map: &[usize], in_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; in_len];
    for (g, &i) in grad.iter().zip(map) {
        out[i] += g;
    }
    out
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn erf_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * erf_cdf(x)
}

/// Output values and shape of a broadcast binary op, plus the index maps
/// from each output element back into both operands.
type Broadcasted = (Vec<f64>, Vec<usize>, Vec<usize>, Vec<usize>);

impl Tensor {
    fn from_parts(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        grad_fn: Option<GradFn>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::from_parts(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf: gradients are accumulated into it on backward.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::from_parts(data, shape.to_vec(), true, None))
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![value], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_parts(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient, if any backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same data, detached from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Whether two handles point to the same graph node.
    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn node_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    fn record(
        data: Vec<f64>,
        shape: Vec<usize>,
        name: &'static str,
        inputs: Vec<Tensor>,
        backward: Box<BackwardFn>,
    ) -> Tensor {
        if inputs.iter().any(Tensor::requires_grad) {
            Tensor::from_parts(
                data,
                shape,
                true,
                Some(GradFn {
                    name,
                    inputs,
                    backward,
                }),
            )
        } else {
            Tensor::from_parts(data, shape, false, None)
        }
    }

    fn check_axis(&self, axis: usize) -> Result<(), TensorError> {
        if axis >= self.rank() {
            Err(TensorError::InvalidAxis {
                axis,
                rank: self.rank(),
            })
        } else {
            Ok(())
        }
    }

    // ------------------------------------------------------------------
    // elementwise

    fn broadcast_binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Broadcasted, TensorError> {
        let out_shape =
            broadcast_shapes(self.shape(), other.shape()).ok_or_else(|| TensorError::ShapeMismatch {
                op: name,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            })?;
        let (ma, mb) = if self.shape() == out_shape.as_slice() && other.shape() == out_shape.as_slice() {
            let ident: Vec<usize> = (0..numel(&out_shape)).collect();
            (ident.clone(), ident)
        } else {
            (
                broadcast_index_map(self.shape(), &out_shape),
                broadcast_index_map(other.shape(), &out_shape),
            )
        };
        let (a, b) = (self.data(), other.data());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| f(a[i], b[j])).collect();
        Ok((data, out_shape, ma, mb))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (data, shape, ma, mb) = self.broadcast_binary(other, "add", |x, y| x + y)?;
        let (la, lb) = (self.numel(), other.numel());
        let (ga, gb) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::record(
            data,
            shape,
            "add",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                vec![
                    ga.then(|| reduce_to(g, &ma, la)),
                    gb.then(|| reduce_to(g, &mb, lb)),
                ]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (data, shape, ma, mb) = self.broadcast_binary(other, "sub", |x, y| x - y)?;
        let (la, lb) = (self.numel(), other.numel());
        let (ga, gb) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::record(
            data,
            shape,
            "sub",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                vec![
                    ga.then(|| reduce_to(g, &ma, la)),
                    gb.then(|| {
                        let mut r = reduce_to(g, &mb, lb);
                        r.iter_mut().for_each(|v| *v = -*v);
                        r
                    }),
                ]
            }),
        ))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (data, shape, ma, mb) = self.broadcast_binary(other, "mul", |x, y| x * y)?;
        let (la, lb) = (self.numel(), other.numel());
        let (ga, gb) = (self.requires_grad(), other.requires_grad());
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::record(
            data,
            shape,
            "mul",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let da = ga.then(|| {
                    let mut out = vec![0.0; la];
                    for ((gv, &i), &j) in g.iter().zip(&ma).zip(&mb) {
                        out[i] += gv * b.data()[j];
                    }
                    out
                });
                let db = gb.then(|| {
                    let mut out = vec![0.0; lb];
                    for ((gv, &i), &j) in g.iter().zip(&ma).zip(&mb) {
                        out[j] += gv * a.data()[i];
                    }
                    out
                });
                vec![da, db]
            }),
        ))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|x| factor * x).collect();
        Tensor::record(
            data,
            self.shape().to_vec(),
            "scale",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| factor * v).collect())]),
        )
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        df: fn(f64) -> f64,
    ) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        Tensor::record(
            data,
            self.shape().to_vec(),
            name,
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(input.data())
                        .map(|(gv, &x)| gv * df(x))
                        .collect(),
                )]
            }),
        )
    }

    /// Exact Gaussian-CDF GELU.
    pub fn gelu(&self) -> Tensor {
        self.unary("gelu", gelu_scalar, |x| erf_cdf(x) + x * std_normal_pdf(x))
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| if x > 0.0 { x } else { 0.0 }, |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    // ------------------------------------------------------------------
    // linear algebra

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// broadcast batch dimensions.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(mismatch());
        }
        let (sa, sb) = (self.shape(), other.shape());
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shapes(batch_a, batch_b).ok_or_else(mismatch)?;
        let map_a = broadcast_index_map(batch_a, &batch);
        let map_b = broadcast_index_map(batch_b, &batch);
        let nb = numel(&batch);

        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; nb * m * n];
        for bi in 0..nb {
            let ao = map_a[bi] * m * k;
            let bo = map_b[bi] * k * n;
            let oo = bi * m * n;
            for i in 0..m {
                let orow = &mut out[oo + i * n..oo + (i + 1) * n];
                for p in 0..k {
                    let av = a[ao + i * k + p];
                    let brow = &b[bo + p * n..bo + (p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }

        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        let (ta, tb) = (self.clone(), other.clone());
        let (ga, gb) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::record(
            out,
            shape,
            "matmul",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let (a, b) = (ta.data(), tb.data());
                let mut da = ga.then(|| vec![0.0; a.len()]);
                let mut db = gb.then(|| vec![0.0; b.len()]);
                for bi in 0..nb {
                    let ao = map_a[bi] * m * k;
                    let bo = map_b[bi] * k * n;
                    let go = bi * m * n;
                    if let Some(da) = da.as_mut() {
                        // dA = G B^T
                        for i in 0..m {
                            let grow = &g[go + i * n..go + (i + 1) * n];
                            for p in 0..k {
                                let brow = &b[bo + p * n..bo + (p + 1) * n];
                                let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                                da[ao + i * k + p] += s;
                            }
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        // dB = A^T G
                        for i in 0..m {
                            let grow = &g[go + i * n..go + (i + 1) * n];
                            for p in 0..k {
                                let av = a[ao + i * k + p];
                                let drow = &mut db[bo + p * n..bo + (p + 1) * n];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                }
                vec![da, db]
            }),
        ))
    }

    // ------------------------------------------------------------------
    // normalizations

    /// Softmax along `axis`, stabilized by max subtraction. Entries at or
    /// below [`MASK_NEG`]/2 (including `-inf`) map to exactly zero.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |j: usize| base + j * inner;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(x[at(j)]);
                }
                if !(max > MASKED_THRESHOLD) {
                    return Err(TensorError::DegenerateMask);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let v = x[at(j)];
                    let e = if v <= MASKED_THRESHOLD { 0.0 } else { libm::exp(v - max) };
                    y[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    y[at(j)] /= sum;
                }
            }
        }
        Ok(Tensor::record(
            y,
            self.shape().to_vec(),
            "softmax",
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Scales every slice along `axis` to unit L2 norm.
    pub fn l2_normalize(&self, axis: usize) -> Result<Tensor, TensorError> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let x = self.data();
        let mut norms = vec![0.0; outer * inner];
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let sq: f64 = (0..len).map(|j| x[base + j * inner] * x[base + j * inner]).sum();
                let norm = libm::sqrt(sq);
                if !(norm > NORM_EPS) {
                    return Err(TensorError::ZeroNorm { norm });
                }
                norms[o * inner + i] = norm;
                for j in 0..len {
                    y[base + j * inner] = x[base + j * inner] / norm;
                }
            }
        }
        Ok(Tensor::record(
            y,
            self.shape().to_vec(),
            "l2_normalize",
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let norm = norms[o * inner + i];
                        let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = (g[p] - y[p] * dot) / norm;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Layer normalization over the last axis, without affine terms.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor, TensorError> {
        if self.rank() == 0 {
            return Err(TensorError::InvalidAxis { axis: 0, rank: 0 });
        }
        let len = *self.shape().last().unwrap();
        let rows = self.numel() / len.max(1);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * len..(r + 1) * len];
            let mean = row.iter().sum::<f64>() / len as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = is;
            for j in 0..len {
                y[r * len + j] = (row[j] - mean) * is;
            }
        }
        Ok(Tensor::record(
            y,
            self.shape().to_vec(),
            "layer_norm",
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let gr = &g[r * len..(r + 1) * len];
                    let yr = &y[r * len..(r + 1) * len];
                    let mg = gr.iter().sum::<f64>() / len as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / len as f64;
                    for j in 0..len {
                        dx[r * len + j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || self.shape()[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (n, k) = (self.shape()[0], self.shape()[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let x = self.data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
            let lse = max + libm::log(sum);
            loss += lse - row[labels[r]];
            for j in 0..k {
                probs[r * k + j] = libm::exp(row[j] - lse);
            }
        }
        loss /= n as f64;
        let labels = labels.to_vec();
        Ok(Tensor::record(
            vec![loss],
            Vec::new(),
            "cross_entropy",
            vec![self.clone()],
            Box::new(move |g, _| {
                let scale = g[0] / n as f64;
                let mut dx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] -= 1.0;
                }
                dx.iter_mut().for_each(|v| *v *= scale);
                vec![Some(dx)]
            }),
        ))
    }

    // ------------------------------------------------------------------
    // reductions

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let len = self.numel();
        Tensor::record(
            vec![s],
            Vec::new(),
            "sum",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; len])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let len = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::record(
            vec![s / len as f64],
            Vec::new(),
            "mean",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0] / len as f64; len])]),
        )
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor, TensorError> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + j) * inner + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::record(
            out,
            shape,
            "sum_axis",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            dx[(o * len + j) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    // ------------------------------------------------------------------
    // shape manipulation

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::record(
            self.to_vec(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Materialized broadcast to a larger shape.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        match broadcast_shapes(self.shape(), shape) {
            Some(s) if s.as_slice() == shape => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: self.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let map = broadcast_index_map(self.shape(), shape);
        let x = self.data();
        let data = map.iter().map(|&i| x[i]).collect();
        let len = self.numel();
        Ok(Tensor::record(
            data,
            shape.to_vec(),
            "broadcast_to",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(reduce_to(g, &map, len))]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor, TensorError> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || core::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidPermutation {
                axes: axes.to_vec(),
                rank,
            });
        }
        let in_shape = self.shape();
        let in_strides = strides(in_shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = self.numel();
        // src[i] = input flat index for output flat index i
        let mut src = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut pos = 0usize;
        for _ in 0..total {
            src.push(pos);
            for d in (0..rank).rev() {
                idx[d] += 1;
                pos += eff[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                pos -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        let x = self.data();
        let data = src.iter().map(|&i| x[i]).collect();
        Ok(Tensor::record(
            data,
            out_shape,
            "permute",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; g.len()];
                for (gv, &i) in g.iter().zip(&src) {
                    dx[i] = *gv;
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor, TensorError> {
        self.check_axis(a)?;
        self.check_axis(b)?;
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyConcat)?;
        first.check_axis(axis)?;
        for p in &parts[1..] {
            let same_rank = p.rank() == first.rank();
            let compatible = same_rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_extents(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_len: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_len;
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(Tensor::record(
            data,
            shape,
            "concat",
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(move |g, _| {
                let mut grads: Vec<Option<Vec<f64>>> = needs
                    .iter()
                    .zip(&lens)
                    .map(|(&n, &l)| n.then(|| Vec::with_capacity(outer * l * inner)))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gr, &l) in grads.iter_mut().zip(&lens) {
                        if let Some(gr) = gr {
                            gr.extend_from_slice(&g[pos..pos + l * inner]);
                        }
                        pos += l * inner;
                    }
                }
                grads
            }),
        ))
    }

    /// The sub-tensor `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor, TensorError> {
        self.check_axis(axis)?;
        let (outer, full, inner) = axis_extents(self.shape(), axis);
        if start + len > full {
            return Err(TensorError::OutOfBounds {
                axis,
                start,
                len,
                extent: full,
            });
        }
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * full + start) * inner;
            data.extend_from_slice(&x[b..b + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::record(
            data,
            shape,
            "narrow",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let b = (o * full + start) * inner;
                    dx[b..b + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>, TensorError> {
        self.check_axis(axis)?;
        let total: usize = sizes.iter().sum();
        if total != self.shape()[axis] {
            return Err(TensorError::OutOfBounds {
                axis,
                start: 0,
                len: total,
                extent: self.shape()[axis],
            });
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let t = self.narrow(axis, start, s);
                start += s;
                t
            })
            .collect()
    }

    // ------------------------------------------------------------------
    // backward

    /// Back-propagates from this scalar, accumulating into trainable leaves.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // iterative post-order DFS: each node is emitted once, after its inputs
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited = BTreeSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.node_id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for inp in gf.inputs.iter().filter(|i| i.requires_grad()) {
                    if !visited.contains(&inp.node_id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }

        // interior gradients live here; leaves accumulate into their own cell
        let mut interior: alloc::collections::BTreeMap<usize, Vec<f64>> = alloc::collections::BTreeMap::new();
        interior.insert(self.node_id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(gf) = &t.0.grad_fn else {
                continue;
            };
            let Some(g) = interior.remove(&t.node_id()) else {
                continue;
            };
            let grads = (gf.backward)(&g, t.data());
            for (inp, gi) in gf.inputs.iter().zip(grads) {
                let Some(gi) = gi else { continue };
                if !inp.requires_grad() {
                    continue;
                }
                if inp.0.grad_fn.is_none() {
                    let mut cell = inp.0.grad.borrow_mut();
                    match cell.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                        None => *cell = Some(gi),
                    }
                } else {
                    match interior.get_mut(&inp.node_id()) {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                        None => {
                            interior.insert(inp.node_id(), gi);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// A named trainable tensor owned by a model.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: alloc::string::String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<alloc::string::String>, data: Vec<f64>, shape: &[usize]) -> Result<Self, TensorError> {
        Ok(Parameter {
            name: name.into(),
            tensor: Tensor::param(data, shape)?,
        })
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    /// Replaces the values with a fresh leaf; any accumulated gradient is dropped.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<(), TensorError> {
        self.tensor = Tensor::param(data, self.tensor.shape())?;
        Ok(())
    }
}
