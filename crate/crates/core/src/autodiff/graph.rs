//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar output walks the record in reverse and
//! returns the gradient of that output with respect to every node.
//!
//! ```
//! use consvqa::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let w = g.leaf(Tensor::scalar(3.0));
//! let y = g.mul(w, w).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(w).unwrap().item(), 6.0);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Train mode samples dropout masks; eval mode makes dropout the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    in_channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_height: usize,
    out_width: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Calls `f(col_row, col_pos, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel;
        for ci in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..self.out_height {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let in_row = (ci * self.height + iy as usize) * self.width;
                        for ox in 0..self.out_width {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            f(row, oy * self.out_width + ox, in_row + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softmax {
        input: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Ln(usize),
    ClampMin(usize, T),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Concat(Vec<usize>),
    Sum(usize),
    Mean(usize),
    Dropout {
        input: usize,
        mask: Vec<T>,
    },
    SpatialWeightedSum {
        maps: usize,
        features: usize,
    },
    Reshape(usize),
    Index(usize, usize),
    GradScale(usize, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. One graph per logical thread of evaluation.
#[derive(Debug)]
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "value {} is not on the recorded graph",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `x` cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let v = self.val(self.idx(x)?).clone();
        Ok(self.constant(v))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `factor`.
    pub fn grad_scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let i = self.idx(x)?;
        let v = self.val(i).clone();
        let rg = self.rg(i);
        Ok(self.push(v, Op::GradScale(i, factor), rg))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (self.val(i), self.val(j));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let rg = self.rg(i) || self.rg(j);
        Ok(self.push(out, op(i, j), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let i = self.idx(x)?;
        let out = self.val(i).map(f);
        let rg = self.rg(i);
        Ok(self.push(out, op(i), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v * c, |i| Op::Scale(i, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu)
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly zero is 0.
    pub fn hinge(&mut self, x: Var) -> Result<Var> {
        self.relu(x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.tanh(), Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.ln(), Op::Ln)
    }

    pub fn clamp_min(&mut self, x: Var, min: T) -> Result<Var> {
        self.unary(x, |v| v.max(min), |i| Op::ClampMin(i, min))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(x)?;
        let out = self.val(i).clone().reshaped(shape)?;
        let rg = self.rg(i);
        Ok(self.push(out, Op::Reshape(i), rg))
    }

    /// 2-D matrix product `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (self.val(i), self.val(j));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(m, k, n, va.data(), false, vb.data(), false, T::zero(), out.data_mut());
        let rg = self.rg(i) || self.rg(j);
        Ok(self.push(out, Op::MatMul(i, j), rg))
    }

    /// `x (r, c) + b (c)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.idx(x)?, self.idx(b)?);
        let (vx, vb) = (self.val(i), self.val(j));
        let sx = vx.shape();
        if sx.len() != 2 || vb.len() != sx[1] {
            return Err(Error::shape("add_row", sx, vb.shape()));
        }
        let c = sx[1];
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(i) || self.rg(j);
        Ok(self.push(out, Op::AddRow(i, j), rg))
    }

    /// `x (r, c) + b (r)` broadcast over columns.
    pub fn add_col(&mut self, x: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.idx(x)?, self.idx(b)?);
        let (vx, vb) = (self.val(i), self.val(j));
        let sx = vx.shape();
        if sx.len() != 2 || vb.len() != sx[0] {
            return Err(Error::shape("add_col", sx, vb.shape()));
        }
        let c = sx[1];
        let mut out = vx.clone();
        for (row, &bv) in out.data_mut().chunks_mut(c).zip(vb.data()) {
            for o in row {
                *o += bv;
            }
        }
        let rg = self.rg(i) || self.rg(j);
        Ok(self.push(out, Op::AddCol(i, j), rg))
    }

    /// 2-D convolution of a `(C_in, H, W)` input with `(C_out, C_in, k, k)`
    /// weights and a `(C_out)` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let (sx, sw) = (self.val(xi).shape(), self.val(wi).shape());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if self.val(bi).len() != sw[0] {
            return Err(Error::shape("conv2d bias", sw, self.val(bi).shape()));
        }
        let k = sw[2];
        if sx[1] + 2 * padding < k || sx[2] + 2 * padding < k {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            in_channels: sx[0],
            height: sx[1],
            width: sx[2],
            out_channels: sw[0],
            kernel: k,
            stride,
            padding,
            out_height: (sx[1] + 2 * padding - k) / stride + 1,
            out_width: (sx[2] + 2 * padding - k) / stride + 1,
        };
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let mut cols = vec![T::zero(); pl * ol];
        {
            let x = self.val(xi).data();
            geom.for_each_tap(|row, pos, src| cols[row * ol + pos] = x[src]);
        }
        let mut out = Tensor::zeros(&[geom.out_channels, geom.out_height, geom.out_width]);
        T::gemm(
            geom.out_channels,
            pl,
            ol,
            self.val(wi).data(),
            false,
            &cols,
            false,
            T::zero(),
            out.data_mut(),
        );
        for (row, &b) in out.data_mut().chunks_mut(ol).zip(self.val(bi).data()) {
            for o in row {
                *o += b;
            }
        }
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        Ok(self.push(
            out,
            Op::Conv2d {
                input: xi,
                weight: wi,
                bias: bi,
                cols,
                geom,
            },
            rg,
        ))
    }

    /// Non-overlapping `k x k` max pooling of a `(C, H, W)` input.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.val(i).shape();
        if s.len() != 3 || k == 0 || s[1] < k || s[2] < k {
            return Err(Error::shape("max_pool2d", s, &[k, k]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / k, w / k);
        let x_data = self.val(i).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (ch * h + oy * k) * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = (ch * h + oy * k + dy) * w + ox * k + dx;
                            if x_data[idx] > x_data[best] {
                                best = idx;
                            }
                        }
                    }
                    argmax.push(best);
                    out.push(x_data[best]);
                }
            }
        }
        let out = Tensor::from_vec(&[c, oh, ow], out)?;
        let rg = self.rg(i);
        Ok(self.push(out, Op::MaxPool { input: i, argmax }, rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.val(i).shape().to_vec();
        if axis >= s.len() {
            return Err(Error::shape("softmax", &s, &[axis]));
        }
        let outer: usize = s[..axis].iter().product();
        let axis_len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = self.val(i).clone();
        let data = out.data_mut();
        for o in 0..outer {
            for n in 0..inner {
                let at = |j: usize| (o * axis_len + j) * inner + n;
                let mut m = T::neg_infinity();
                for j in 0..axis_len {
                    m = m.max(data[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..axis_len {
                    let e = (data[at(j)] - m).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..axis_len {
                    data[at(j)] = data[at(j)] / total;
                }
            }
        }
        let rg = self.rg(i);
        Ok(self.push(
            out,
            Op::Softmax {
                input: i,
                outer,
                axis_len,
                inner,
            },
            rg,
        ))
    }

    /// Rows of a `(V, D)` table, giving `(ids.len(), D)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.idx(table)?;
        let s = self.val(t).shape();
        if s.len() != 2 {
            return Err(Error::shape("embedding", s, &[ids.len()]));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Usage(format!("embedding id {bad} out of range {v}")));
        }
        let src = self.val(t).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_vec(&[ids.len(), d], out)?;
        let rg = self.rg(t);
        Ok(self.push(
            out,
            Op::Embedding {
                table: t,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Flattening concatenation into a 1-D vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let idxs = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::new();
        for &i in &idxs {
            out.extend_from_slice(self.val(i).data());
        }
        let n = out.len();
        let rg = idxs.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::from_vec(&[n], out)?, Op::Concat(idxs), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let total = self.val(i).data().iter().copied().sum::<T>();
        let rg = self.rg(i);
        Ok(self.push(Tensor::scalar(total), Op::Sum(i), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let v = self.val(i);
        if v.is_empty() {
            return Err(Error::shape("mean", v.shape(), &[1]));
        }
        let m = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        let rg = self.rg(i);
        Ok(self.push(Tensor::scalar(m), Op::Mean(i), rg))
    }

    /// Inverted dropout. Eval mode, or a zero rate, returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let i = self.idx(x)?;
        if mode == Mode::Eval || rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Usage(format!("dropout rate {rate} must be < 1")));
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.val(i).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let v = self.val(i);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::from_vec(v.shape(), data)?;
        let rg = self.rg(i);
        Ok(self.push(out, Op::Dropout { input: i, mask }, rg))
    }

    /// `maps (G, N)` weights over `features (C, N)` give `(G, C)`:
    /// `out[g, c] = sum_n maps[g, n] * features[c, n]`.
    pub fn spatial_weighted_sum(&mut self, maps: Var, features: Var) -> Result<Var> {
        let (mi, fi) = (self.idx(maps)?, self.idx(features)?);
        let (sm, sf) = (self.val(mi).shape(), self.val(fi).shape());
        if sm.len() != 2 || sf.len() != 2 || sm[1] != sf[1] {
            return Err(Error::shape("spatial_weighted_sum", sm, sf));
        }
        let (g, n, c) = (sm[0], sm[1], sf[0]);
        let mut out = Tensor::zeros(&[g, c]);
        T::gemm(
            g,
            n,
            c,
            self.val(mi).data(),
            false,
            self.val(fi).data(),
            true,
            T::zero(),
            out.data_mut(),
        );
        let rg = self.rg(mi) || self.rg(fi);
        Ok(self.push(out, Op::SpatialWeightedSum { maps: mi, features: fi }, rg))
    }

    /// Element `index` of the flattened tensor as a scalar.
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let v = self.val(i);
        if index >= v.len() {
            return Err(Error::shape("index", v.shape(), &[index]));
        }
        let out = Tensor::scalar(v.data()[index]);
        let rg = self.rg(i);
        Ok(self.push(out, Op::Index(i, index), rg))
    }

    /// Gradient of a one-element `output` with respect to every recorded node.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let i = self.idx(output)?;
        let shape = self.val(i).shape().to_vec();
        if self.val(i).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {shape:?}"
            )));
        }
        self.backward_seeded(&[(output, Tensor::filled(&shape, T::one()))])
    }

    /// Vector-Jacobian product: propagates the given output cotangents.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut start = 0;
        for (v, seed) in seeds {
            let i = self.idx(*v)?;
            if seed.shape() != self.val(i).shape() {
                return Err(Error::shape("backward seed", self.val(i).shape(), seed.shape()));
            }
            accumulate(&mut grads, i, self.val(i).shape(), |g| {
                for (a, &b) in g.iter_mut().zip(seed.data()) {
                    *a += b;
                }
            });
            start = start.max(i + 1);
        }
        for i in (0..start).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let y = self.val(i).data();
        let push = |grads: &mut [Option<Tensor<T>>], j: usize, f: &dyn Fn(&mut [T])| {
            if self.rg(j) {
                accumulate(grads, j, self.val(j).shape(), f);
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(grads, *a, &|d| add_into(d, gd));
                push(grads, *b, &|d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                push(grads, *a, &|d| add_into(d, gd));
                push(grads, *b, &|d| {
                    for (x, &v) in d.iter_mut().zip(gd) {
                        *x = *x - v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                push(grads, *a, &|d| {
                    for ((x, &v), &o) in d.iter_mut().zip(gd).zip(vb) {
                        *x += v * o;
                    }
                });
                push(grads, *b, &|d| {
                    for ((x, &v), &o) in d.iter_mut().zip(gd).zip(va) {
                        *x += v * o;
                    }
                });
            }
            Op::Scale(a, c) => push(grads, *a, &|d| {
                for (x, &v) in d.iter_mut().zip(gd) {
                    *x += v * *c;
                }
            }),
            Op::GradScale(a, c) => push(grads, *a, &|d| {
                for (x, &v) in d.iter_mut().zip(gd) {
                    *x += v * *c;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => push(grads, *a, &|d| add_into(d, gd)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.val(*a).shape(), self.val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                push(grads, *a, &|d| T::gemm(m, n, k, gd, false, vb, true, T::one(), d));
                push(grads, *b, &|d| T::gemm(k, m, n, va, true, gd, false, T::one(), d));
            }
            Op::AddRow(x, b) => {
                let c = self.val(*x).shape()[1];
                push(grads, *x, &|d| add_into(d, gd));
                push(grads, *b, &|d| {
                    for row in gd.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::AddCol(x, b) => {
                let c = self.val(*x).shape()[1];
                push(grads, *x, &|d| add_into(d, gd));
                push(grads, *b, &|d| {
                    for (x, row) in d.iter_mut().zip(gd.chunks(c)) {
                        *x += row.iter().copied().sum::<T>();
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
                geom,
            } => {
                let (pl, ol, co) = (geom.patch_len(), geom.out_len(), geom.out_channels);
                push(grads, *weight, &|d| T::gemm(co, ol, pl, gd, false, cols, true, T::one(), d));
                push(grads, *bias, &|d| {
                    for (x, row) in d.iter_mut().zip(gd.chunks(ol)) {
                        *x += row.iter().copied().sum::<T>();
                    }
                });
                if self.rg(*input) {
                    let w = self.val(*weight).data();
                    let mut dcols = vec![T::zero(); pl * ol];
                    T::gemm(pl, co, ol, w, true, gd, false, T::zero(), &mut dcols);
                    push(grads, *input, &|d| {
                        geom.for_each_tap(|row, pos, dst| d[dst] += dcols[row * ol + pos]);
                    });
                }
            }
            Op::MaxPool { input, argmax } => push(grads, *input, &|d| {
                for (&src, &v) in argmax.iter().zip(gd) {
                    d[src] += v;
                }
            }),
            Op::Relu(a) => {
                let x = self.val(*a).data();
                push(grads, *a, &|d| {
                    for ((o, &v), &xv) in d.iter_mut().zip(gd).zip(x) {
                        if xv > T::zero() {
                            *o += v;
                        }
                    }
                });
            }
            Op::Tanh(a) => push(grads, *a, &|d| {
                for ((o, &v), &yv) in d.iter_mut().zip(gd).zip(y) {
                    *o += v * (T::one() - yv * yv);
                }
            }),
            Op::Sigmoid(a) => push(grads, *a, &|d| {
                for ((o, &v), &yv) in d.iter_mut().zip(gd).zip(y) {
                    *o += v * yv * (T::one() - yv);
                }
            }),
            Op::Softmax {
                input,
                outer,
                axis_len,
                inner,
            } => push(grads, *input, &|d| {
                for o in 0..*outer {
                    for n in 0..*inner {
                        let at = |j: usize| (o * axis_len + j) * inner + n;
                        let dot = (0..*axis_len).map(|j| gd[at(j)] * y[at(j)]).sum::<T>();
                        for j in 0..*axis_len {
                            d[at(j)] += y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
            }),
            Op::Ln(a) => {
                let x = self.val(*a).data();
                push(grads, *a, &|d| {
                    for ((o, &v), &xv) in d.iter_mut().zip(gd).zip(x) {
                        *o += v / xv;
                    }
                });
            }
            Op::ClampMin(a, min) => {
                let x = self.val(*a).data();
                push(grads, *a, &|d| {
                    for ((o, &v), &xv) in d.iter_mut().zip(gd).zip(x) {
                        if xv > *min {
                            *o += v;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = self.val(*table).shape()[1];
                push(grads, *table, &|d| {
                    for (row, &id) in gd.chunks(dim).zip(ids) {
                        add_into(&mut d[id * dim..(id + 1) * dim], row);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    let slice = &gd[offset..offset + n];
                    push(grads, p, &|d| add_into(d, slice));
                    offset += n;
                }
            }
            Op::Sum(a) => push(grads, *a, &|d| {
                for x in d.iter_mut() {
                    *x += gd[0];
                }
            }),
            Op::Mean(a) => {
                let share = gd[0] / T::of(self.val(*a).len() as f64);
                push(grads, *a, &|d| {
                    for x in d.iter_mut() {
                        *x += share;
                    }
                });
            }
            Op::Dropout { input, mask } => push(grads, *input, &|d| {
                for ((o, &v), &m) in d.iter_mut().zip(gd).zip(mask) {
                    *o += v * m;
                }
            }),
            Op::SpatialWeightedSum { maps, features } => {
                let (sm, sf) = (self.val(*maps).shape(), self.val(*features).shape());
                let (gl, n, c) = (sm[0], sm[1], sf[0]);
                let (vm, vf) = (self.val(*maps).data(), self.val(*features).data());
                push(grads, *maps, &|d| T::gemm(gl, c, n, gd, false, vf, false, T::one(), d));
                push(grads, *features, &|d| T::gemm(c, gl, n, gd, true, vm, false, T::one(), d));
            }
            Op::Index(a, k) => push(grads, *a, &|d| d[*k] += gd[0]),
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    j: usize,
    shape: &[usize],
    f: impl FnOnce(&mut [T]),
) {
    let slot = grads[j].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    graph: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Result<Tensor<T>> {
        if v.graph != self.graph || v.index >= self.grads.len() {
            return Err(Error::Usage(format!(
                "value {} is not on the recorded graph",
                v.index
            )));
        }
        Ok(match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.index]),
        })
    }

    /// Moves the gradient out, avoiding a copy.
    pub fn take(&mut self, v: Var) -> Result<Tensor<T>> {
        if v.graph != self.graph || v.index >= self.grads.len() {
            return Err(Error::Usage(format!(
                "value {} is not on the recorded graph",
                v.index
            )));
        }
        Ok(self.grads[v.index]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.index])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(w, w).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(w).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(2.0));
        let y = g.add_scalar(c, 1.0).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(w).unwrap().item(), 0.0);
    }

    #[test]
    fn foreign_var_is_usage_error() {
        let mut g1 = Graph::<f64>::new();
        let mut g2 = Graph::<f64>::new();
        let a = g1.leaf(Tensor::scalar(1.0));
        let b = g2.leaf(Tensor::scalar(1.0));
        let y = g2.scale(b, 2.0).unwrap();
        let grads = g2.backward(y).unwrap();
        assert!(matches!(grads.wrt(a), Err(Error::Usage(_))));
        assert!(matches!(g2.backward(a), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(a), Err(Error::Usage(_))));
    }

    #[test]
    fn softmax_of_equal_values_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::filled(&[7], 0.3));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).unwrap().data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 5.0]));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).unwrap().data().to_vec();
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] + v[4] + v[5] - 1.0).abs() < 1e-12);
        let y0 = g.softmax(x, 0).unwrap();
        let v0 = g.value(y0).unwrap().data().to_vec();
        assert!((v0[0] + v0[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hinge_negative_branch_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(-0.3));
        let y = g.hinge(x).unwrap();
        assert_eq!(g.value(y).unwrap().item(), 0.0);
        assert_eq!(g.backward(y).unwrap().wrt(x).unwrap().item(), 0.0);
    }

    #[test]
    fn hinge_subgradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.hinge(x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).unwrap().item(), 0.0);
    }

    #[test]
    fn identity_kernel_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img: Vec<f64> = (0..36).map(|_| rng.random()).collect();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 6, 6], &img));
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &img[..]);
    }

    #[test]
    fn conv_output_shape() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 9, 7]));
        let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        let y = g.conv2d(x, w, b, 2, 0).unwrap();
        assert_eq!(g.shape(y).unwrap(), &[4, 4, 3]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::filled(&[10], 1.0));
        let y = g.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(x, y);
        let z = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        assert!(g.value(z).unwrap().data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn max_pool_picks_maximum() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 2, 4], &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 1.0]));
        let y = g.max_pool2d(x, 2).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[5.0, 7.0]);
        let s = g.sum(y).unwrap();
        let d = g.backward(s).unwrap().wrt(x).unwrap();
        assert_eq!(d.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
