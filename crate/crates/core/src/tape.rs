//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node whose inputs are earlier nodes, so node order is
//! already a topological order and a single reverse sweep visits each op once.
//! Gradients of intermediate nodes live only for the duration of a sweep;
//! leaf gradients accumulate across sweeps until [`Tape::zero_grad`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::from_f64(s)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::from_f64(s)
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Act { input: Var, kind: Activation },
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Blend { mask: Var, a: Var, b: Var },
    Normalize { input: Var, inv_std: Vec<T>, batch: bool },
    Modulate { input: Var, gamma: Var, beta: Var },
    Up2(Var),
    Resize { input: Var },
    SpatialMean(Var),
    L2NormalizeRows { input: Var, norms: Vec<T> },
    RowDot(Var, Var),
    Mean(Var),
    Sum(Var),
    SelectRows { input: Var, rows: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Batch statistics observed by [`Tape::normalize_batch`], in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Ordered record of executed differentiable operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn check_finite<T: Scalar>(t: &Tensor<T>, op: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(String::from(op)))
    }
}

fn same_shape(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    if a != b {
        bail!(Dimension, "{op}: shapes {:?} and {:?} differ", a, b);
    }
    Ok(())
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn checked(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var> {
        check_finite(&value, name)?;
        Ok(self.push(value, op, inputs))
    }

    /// Records an input tensor. Leaves with `requires_grad` collect gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let n = &self.nodes[v.0];
        n.grad.as_ref().map(|g| Tensor::new(n.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- ops

    /// Cross-correlation of `[B,Cin,H,W]` with `[Cout,Cin,kh,kw]` using floor
    /// output extents.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (b, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin {
            bail!(Dimension, "conv2d: input has {cin} channels, kernel expects {wcin}");
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                bail!(Dimension, "conv2d: bias shape {:?}, expected [{cout}]", self.shape(bv));
            }
        }
        let (Some(oh), Some(ow)) = (
            ConvGeom::out_extent(h, kh, stride, padding),
            ConvGeom::out_extent(w, kw, stride, padding),
        ) else {
            bail!(
                Config,
                "conv2d: kernel {kh}x{kw} stride {stride} padding {padding} has no output on {h}x{w}"
            );
        };
        let geom = ConvGeom { cin, h, w, cout, kh, kw, stride, pad: padding, oh, ow };
        let mut out = vec![T::zero(); b * cout * oh * ow];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let bias_data = bias.map(|bv| self.value(bv).data());
            let mut cols = vec![T::zero(); geom.scratch_len()];
            for bi in 0..b {
                kernels::conv2d_forward(
                    &x[bi * cin * h * w..(bi + 1) * cin * h * w],
                    wt,
                    bias_data,
                    &geom,
                    &mut out[bi * cout * oh * ow..(bi + 1) * cout * oh * ow],
                    &mut cols,
                );
            }
        }
        let value = Tensor::new(&[b, cout, oh, ow], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.checked(value, Op::Conv2d { input, weight, bias, geom }, &inputs, "conv2d")
    }

    /// Affine map `[B,Din] -> [B,Dout]` with weight `[Dout,Din]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (b, din) = match *self.shape(input) {
            [b, d] => (b, d),
            ref s => bail!(Dimension, "linear: input must be rank 2, got {:?}", s),
        };
        let (dout, wdin) = match *self.shape(weight) {
            [o, i] => (o, i),
            ref s => bail!(Dimension, "linear: weight must be rank 2, got {:?}", s),
        };
        if wdin != din {
            bail!(Dimension, "linear: input width {din}, weight expects {wdin}");
        }
        let mut out = vec![T::zero(); b * dout];
        if let Some(bv) = bias {
            if self.shape(bv) != [dout] {
                bail!(Dimension, "linear: bias shape {:?}, expected [{dout}]", self.shape(bv));
            }
            let bd = self.value(bv).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bd);
            }
        }
        gemm(b, din, dout, self.value(input).data(), Layout::N, self.value(weight).data(), Layout::T, T::one(), &mut out);
        let value = Tensor::new(&[b, dout], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.checked(value, Op::Linear { input, weight, bias }, &inputs, "linear")
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let value = self.value(input).map(|x| kind.apply(x));
        self.checked(value, Op::Act { input, kind }, &[input], "activation")
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        self.activation(input, Activation::LeakyRelu(slope))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::LeakyRelu(0.0))
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn abs(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|x| x.abs());
        self.checked(value, Op::Abs(input), &[input], "abs")
    }

    fn zip(&self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(self.shape(a), self.shape(b), name)?;
        let (x, y) = (self.value(a), self.value(b));
        Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "add", |p, q| p + q)?;
        self.checked(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "sub", |p, q| p - q)?;
        self.checked(value, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "mul", |p, q| p * q)?;
        self.checked(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.checked(value, Op::Scale(a, s), &[a], "scale")
    }

    pub fn offset(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.checked(value, Op::Offset(a), &[a], "offset")
    }

    /// `mask·a + (1 − mask)·b`, elementwise.
    pub fn blend(&mut self, mask: Var, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(mask), self.shape(a), "blend")?;
        same_shape(self.shape(a), self.shape(b), "blend")?;
        let (m, x, y) = (self.value(mask).data(), self.value(a).data(), self.value(b).data());
        let out = m
            .iter()
            .zip(x.iter().zip(y))
            .map(|(&m, (&x, &y))| m * x + (T::one() - m) * y)
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        self.checked(value, Op::Blend { mask, a, b }, &[mask, a, b], "blend")
    }

    fn normalize_with(&mut self, input: Var, mean: &[f64], var: &[f64], eps: f64, batch: bool) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if mean.len() != c || var.len() != c {
            bail!(Dimension, "normalize: {} statistics for {c} channels", mean.len());
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / num_traits::Float::sqrt(v + eps)).collect();
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                let (mu, s) = (T::from_f64(mean[ci]), T::from_f64(inv_std[ci]));
                for (o, &v) in out[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                    *o = (v - mu) * s;
                }
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        let inv_std = inv_std.into_iter().map(T::from_f64).collect();
        self.checked(value, Op::Normalize { input, inv_std, batch }, &[input], "normalize")
    }

    /// Per-channel normalization with statistics of this batch; gradients flow
    /// through the statistics. Returns the observed moments as well.
    pub fn normalize_batch(&mut self, input: Var, eps: f64) -> Result<(Var, BatchMoments)> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if b * h * w < 2 {
            bail!(Dimension, "normalize_batch: need at least 2 values per channel, got {}", b * h * w);
        }
        let (mean, var) = kernels::channel_moments(self.value(input).data(), b, c, h * w);
        let out = self.normalize_with(input, &mean, &var, eps, true)?;
        Ok((out, BatchMoments { mean, var }))
    }

    /// Per-channel normalization with fixed (e.g. running) statistics.
    pub fn normalize_fixed(&mut self, input: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        self.normalize_with(input, mean, var, eps, false)
    }

    /// `x[b,c,:,:]·gamma[b,c] + beta[b,c]`.
    pub fn modulate(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        same_shape(self.shape(gamma), &[b, c], "modulate")?;
        same_shape(self.shape(beta), &[b, c], "modulate")?;
        let hw = h * w;
        let (x, g, be) = (self.value(input).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); x.len()];
        for bc in 0..b * c {
            for (o, &v) in out[bc * hw..(bc + 1) * hw].iter_mut().zip(&x[bc * hw..(bc + 1) * hw]) {
                *o = v * g[bc] + be[bc];
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        self.checked(value, Op::Modulate { input, gamma, beta }, &[input, gamma, beta], "modulate")
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn up2(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let x = self.value(input).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let src = &x[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        self.checked(value, Op::Up2(input), &[input], "up2")
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&mut self, input: Var, oh: usize, ow: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if oh == 0 || ow == 0 {
            bail!(Dimension, "resize: zero target extent");
        }
        if (oh, ow) == (h, w) {
            return Ok(input);
        }
        let value = resize_bilinear_tensor(self.value(input), oh, ow)?;
        let _ = (b, c);
        self.checked(value, Op::Resize { input }, &[input], "resize")
    }

    /// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let x = self.value(input).data();
        let out = (0..b * c).map(|i| x[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new(&[b, c], out)?;
        self.checked(value, Op::SpatialMean(input), &[input], "spatial_mean")
    }

    /// Scales each row of `[B,E]` to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, input: Var) -> Result<Var> {
        let (b, e) = match *self.shape(input) {
            [b, e] => (b, e),
            ref s => bail!(Dimension, "l2_normalize_rows: rank 2 expected, got {:?}", s),
        };
        let x = self.value(input).data();
        let floor = T::from_f64(1e-12);
        let norms: Vec<T> = x.chunks(e).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor)).collect();
        let out = x.chunks(e).zip(&norms).flat_map(|(r, &n)| r.iter().map(move |&v| v / n)).collect();
        let value = Tensor::new(&[b, e], out)?;
        self.checked(value, Op::L2NormalizeRows { input, norms }, &[input], "l2_normalize_rows")
    }

    /// Row-wise dot product: `[B,E]·[B,E] -> [B]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "row_dot")?;
        let (rows, e) = match *self.shape(a) {
            [r, e] => (r, e),
            ref s => bail!(Dimension, "row_dot: rank 2 expected, got {:?}", s),
        };
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out = (0..rows)
            .map(|r| x[r * e..(r + 1) * e].iter().zip(&y[r * e..(r + 1) * e]).map(|(&p, &q)| p * q).sum())
            .collect();
        let value = Tensor::new(&[rows], out)?;
        self.checked(value, Op::RowDot(a, b), &[a, b], "row_dot")
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input).data();
        let s = x.iter().map(|v| v.as_f64()).sum::<f64>() / x.len() as f64;
        self.checked(Tensor::scalar(T::from_f64(s)), Op::Mean(input), &[input], "mean")
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.checked(Tensor::scalar(T::from_f64(s)), Op::Sum(input), &[input], "sum")
    }

    /// Gathers leading-axis slices.
    pub fn select_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if rows.is_empty() {
            bail!(Dimension, "select_rows: empty selection");
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= shape[0]) {
            bail!(Dimension, "select_rows: row {r} out of {}", shape[0]);
        }
        let inner: usize = shape[1..].iter().product();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            out.extend_from_slice(&x[r * inner..(r + 1) * inner]);
        }
        let mut s = shape;
        s[0] = rows.len();
        let value = Tensor::new(&s, out)?;
        self.checked(value, Op::SelectRows { input, rows: rows.to_vec() }, &[input], "select_rows")
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `∂loss/∂leaf` into every gradient-requiring leaf reachable
    /// from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1] {
            bail!(Usage, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a = *a + d),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();
                let b = self.value(*input).shape()[0];
                let (isz, osz) = (geom.cin * geom.h * geom.w, geom.cout * geom.oh * geom.ow);
                let mut dx = self.wants(*input).then(|| vec![T::zero(); x.len()]);
                let mut dw = self.wants(*weight).then(|| vec![T::zero(); wt.len()]);
                let mut db = bias.filter(|bv| self.wants(*bv)).map(|_| vec![T::zero(); geom.cout]);
                let mut cols = vec![T::zero(); geom.scratch_len()];
                for bi in 0..b {
                    kernels::conv2d_backward(
                        &x[bi * isz..(bi + 1) * isz],
                        wt,
                        &g[bi * osz..(bi + 1) * osz],
                        geom,
                        dx.as_mut().map(|d| &mut d[bi * isz..(bi + 1) * isz]),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                        &mut cols,
                    );
                }
                add_into(grads, *input, dx);
                add_into(grads, *weight, dw);
                if let Some(bv) = bias {
                    add_into(grads, *bv, db);
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();
                let (b, din) = (self.shape(*input)[0], self.shape(*input)[1]);
                let dout = self.shape(*weight)[0];
                if self.wants(*input) {
                    gemm(b, dout, din, g, Layout::N, wt, Layout::N, T::one(), acc(grads, *input, b * din));
                }
                if self.wants(*weight) {
                    gemm(dout, b, din, g, Layout::T, x, Layout::N, T::one(), acc(grads, *weight, dout * din));
                }
                if let Some(bv) = bias.filter(|bv| self.wants(*bv)) {
                    let db = acc(grads, bv, dout);
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, &d)| *a = *a + d);
                    }
                }
            }
            Op::Act { input, kind } => {
                if self.wants(*input) {
                    let x = self.value(*input).data();
                    let d = acc(grads, *input, x.len());
                    for k in 0..x.len() {
                        d[k] = d[k] + g[k] * kind.derivative(x[k], y[k]);
                    }
                }
            }
            Op::Abs(input) => {
                if self.wants(*input) {
                    let x = self.value(*input).data();
                    let d = acc(grads, *input, x.len());
                    for k in 0..x.len() {
                        let s = if x[k] > T::zero() {
                            T::one()
                        } else if x[k] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        d[k] = d[k] + g[k] * s;
                    }
                }
            }
            Op::Add(a, b) => {
                self.add_scaled(grads, *a, g, T::one());
                self.add_scaled(grads, *b, g, T::one());
            }
            Op::Sub(a, b) => {
                self.add_scaled(grads, *a, g, T::one());
                self.add_scaled(grads, *b, g, -T::one());
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = acc(grads, *a, g.len());
                    for k in 0..g.len() {
                        d[k] = d[k] + g[k] * xb[k];
                    }
                }
                if self.wants(*b) {
                    let d = acc(grads, *b, g.len());
                    for k in 0..g.len() {
                        d[k] = d[k] + g[k] * xa[k];
                    }
                }
            }
            Op::Scale(a, s) => self.add_scaled(grads, *a, g, *s),
            Op::Offset(a) => self.add_scaled(grads, *a, g, T::one()),
            Op::Blend { mask, a, b } => {
                let (m, xa, xb) = (self.value(*mask).data(), self.value(*a).data(), self.value(*b).data());
                if self.wants(*mask) {
                    let d = acc(grads, *mask, g.len());
                    for k in 0..g.len() {
                        d[k] = d[k] + g[k] * (xa[k] - xb[k]);
                    }
                }
                if self.wants(*a) {
                    let d = acc(grads, *a, g.len());
                    for k in 0..g.len() {
                        d[k] = d[k] + g[k] * m[k];
                    }
                }
                if self.wants(*b) {
                    let d = acc(grads, *b, g.len());
                    for k in 0..g.len() {
                        d[k] = d[k] + g[k] * (T::one() - m[k]);
                    }
                }
            }
            Op::Normalize { input, inv_std, batch } => {
                if !self.wants(*input) {
                    return;
                }
                let (b, c, h, w) = node.value.dims4().expect("rank 4");
                let hw = h * w;
                let d = acc(grads, *input, g.len());
                if !*batch {
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * hw;
                            for k in off..off + hw {
                                d[k] = d[k] + g[k] * inv_std[ci];
                            }
                        }
                    }
                    return;
                }
                // dx = inv_std/M · (M·dy − Σdy − ŷ·Σ(dy·ŷ))
                let m = (b * hw) as f64;
                for ci in 0..c {
                    let (mut sg, mut sgy) = (0.0f64, 0.0f64);
                    for bi in 0..b {
                        let off = (bi * c + ci) * hw;
                        for k in off..off + hw {
                            sg += g[k].as_f64();
                            sgy += (g[k] * y[k]).as_f64();
                        }
                    }
                    let (mg, mgy) = (T::from_f64(sg / m), T::from_f64(sgy / m));
                    for bi in 0..b {
                        let off = (bi * c + ci) * hw;
                        for k in off..off + hw {
                            d[k] = d[k] + inv_std[ci] * (g[k] - mg - y[k] * mgy);
                        }
                    }
                }
            }
            Op::Modulate { input, gamma, beta } => {
                let (b, c, h, w) = node.value.dims4().expect("rank 4");
                let hw = h * w;
                let x = self.value(*input).data();
                let gm = self.value(*gamma).data();
                if self.wants(*input) {
                    let d = acc(grads, *input, g.len());
                    for bc in 0..b * c {
                        for k in bc * hw..(bc + 1) * hw {
                            d[k] = d[k] + g[k] * gm[bc];
                        }
                    }
                }
                if self.wants(*gamma) {
                    let d = acc(grads, *gamma, b * c);
                    for bc in 0..b * c {
                        let s: T = (bc * hw..(bc + 1) * hw).map(|k| g[k] * x[k]).sum();
                        d[bc] = d[bc] + s;
                    }
                }
                if self.wants(*beta) {
                    let d = acc(grads, *beta, b * c);
                    for bc in 0..b * c {
                        let s: T = g[bc * hw..(bc + 1) * hw].iter().copied().sum();
                        d[bc] = d[bc] + s;
                    }
                }
            }
            Op::Up2(input) => {
                if !self.wants(*input) {
                    return;
                }
                let (b, c, h, w) = self.value(*input).dims4().expect("rank 4");
                let ow = 2 * w;
                let d = acc(grads, *input, b * c * h * w);
                for bc in 0..b * c {
                    let src = &g[bc * 4 * h * w..(bc + 1) * 4 * h * w];
                    for oy in 0..2 * h {
                        for ox in 0..ow {
                            let k = bc * h * w + (oy / 2) * w + ox / 2;
                            d[k] = d[k] + src[oy * ow + ox];
                        }
                    }
                }
            }
            Op::Resize { input } => {
                if !self.wants(*input) {
                    return;
                }
                let (b, c, h, w) = self.value(*input).dims4().expect("rank 4");
                let (_, _, oh, ow) = node.value.dims4().expect("rank 4");
                let ty = kernels::bilinear_taps(h, oh);
                let tx = kernels::bilinear_taps(w, ow);
                let d = acc(grads, *input, b * c * h * w);
                for bc in 0..b * c {
                    let base = bc * h * w;
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let gv = g[bc * oh * ow + oy * ow + ox];
                            let (wy, wx) = (T::from_f64(wy), T::from_f64(wx));
                            let one = T::one();
                            d[base + y0 * w + x0] = d[base + y0 * w + x0] + gv * (one - wy) * (one - wx);
                            d[base + y0 * w + x1] = d[base + y0 * w + x1] + gv * (one - wy) * wx;
                            d[base + y1 * w + x0] = d[base + y1 * w + x0] + gv * wy * (one - wx);
                            d[base + y1 * w + x1] = d[base + y1 * w + x1] + gv * wy * wx;
                        }
                    }
                }
            }
            Op::SpatialMean(input) => {
                if !self.wants(*input) {
                    return;
                }
                let (b, c, h, w) = self.value(*input).dims4().expect("rank 4");
                let hw = h * w;
                let inv = T::from_f64(1.0 / hw as f64);
                let d = acc(grads, *input, b * c * hw);
                for bc in 0..b * c {
                    let v = g[bc] * inv;
                    for k in bc * hw..(bc + 1) * hw {
                        d[k] = d[k] + v;
                    }
                }
            }
            Op::L2NormalizeRows { input, norms } => {
                if !self.wants(*input) {
                    return;
                }
                let e = node.value.shape()[1];
                let d = acc(grads, *input, g.len());
                for (r, &n) in norms.iter().enumerate() {
                    let row = r * e..(r + 1) * e;
                    let dotv: T = row.clone().map(|k| y[k] * g[k]).sum();
                    for k in row {
                        d[k] = d[k] + (g[k] - y[k] * dotv) / n;
                    }
                }
            }
            Op::RowDot(a, b) => {
                let e = self.shape(*a)[1];
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = acc(grads, *a, xa.len());
                    for k in 0..xa.len() {
                        d[k] = d[k] + g[k / e] * xb[k];
                    }
                }
                if self.wants(*b) {
                    let d = acc(grads, *b, xb.len());
                    for k in 0..xb.len() {
                        d[k] = d[k] + g[k / e] * xa[k];
                    }
                }
            }
            Op::Mean(input) => {
                let n = self.value(*input).len();
                if self.wants(*input) {
                    let v = g[0] * T::from_f64(1.0 / n as f64);
                    acc(grads, *input, n).iter_mut().for_each(|a| *a = *a + v);
                }
            }
            Op::Sum(input) => {
                let n = self.value(*input).len();
                if self.wants(*input) {
                    acc(grads, *input, n).iter_mut().for_each(|a| *a = *a + g[0]);
                }
            }
            Op::SelectRows { input, rows } => {
                if !self.wants(*input) {
                    return;
                }
                let n = self.value(*input).len();
                let inner = n / self.shape(*input)[0];
                let d = acc(grads, *input, n);
                for (j, &r) in rows.iter().enumerate() {
                    for k in 0..inner {
                        d[r * inner + k] = d[r * inner + k] + g[j * inner + k];
                    }
                }
            }
            Op::Reshape(input) => self.add_scaled(grads, *input, g, T::one()),
        }
    }

    fn add_scaled(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T], s: T) {
        if !self.wants(v) {
            return;
        }
        let d = acc(grads, v, g.len());
        if s == T::one() {
            d.iter_mut().zip(g).for_each(|(a, &x)| *a = *a + x);
        } else {
            d.iter_mut().zip(g).for_each(|(a, &x)| *a = *a + x * s);
        }
    }
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: Option<Vec<T>>) {
    let Some(d) = d else { return };
    match grads[v.0].as_mut() {
        Some(a) => a.iter_mut().zip(&d).for_each(|(a, &x)| *a = *a + x),
        None => grads[v.0] = Some(d),
    }
}

/// Bilinear resize of a `[B,C,H,W]` tensor (half-pixel centers).
pub fn resize_bilinear_tensor<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let ty = kernels::bilinear_taps(h, oh);
    let tx = kernels::bilinear_taps(w, ow);
    let src = x.data();
    let mut out = vec![T::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let p = &src[bc * h * w..(bc + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = p[y0 * w + x0].as_f64() * (1.0 - wx) + p[y0 * w + x1].as_f64() * wx;
                let bot = p[y1 * w + x0].as_f64() * (1.0 - wx) + p[y1 * w + x1].as_f64() * wx;
                out[bc * oh * ow + oy * ow + ox] = T::from_f64(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}
