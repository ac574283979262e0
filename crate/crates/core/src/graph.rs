//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as an append-only
//! sequence of nodes; inputs always precede their consumers, so a single
//! reverse sweep in append order is a valid topological traversal.
//!
//! Parameters enter the graph as leaves bound to a [`ParamId`]; after
//! [`Graph::backward`] the resulting [`Gradients`] can be accumulated into a
//! [`ParamStore`]. Repeated backward passes accumulate additively until the
//! store's gradients are zeroed.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::conv::{conv_backward, conv_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::norm;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dims2, dims4, gemm, Layout, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for batch-norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Log {
        x: Var,
        floor: T,
    },
    SumAll(Var),
    Softmax(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        n: usize,
        cols: Vec<T>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GlobalAvgPool(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch-norm, for the caller to
/// fold into running statistics.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    stop_gradient: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            stop_gradient: true,
        }
    }

    /// A graph in which [`detach`](Self::detach) is the identity, so that
    /// gradients are the true partial derivatives of the computed value.
    pub fn without_stop_gradient() -> Self {
        Self {
            nodes: Vec::new(),
            stop_gradient: false,
        }
    }

    /// Whether any recorded op is non-differentiable at isolated points.
    pub fn has_kinks(&self) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n.op, Op::Relu(_) | Op::MaxPool { .. }))
    }

    /// Hash of the piecewise-linear branch taken by every rectifier element
    /// and max-pool window. Two evaluations with equal patterns lie on the
    /// same smooth piece.
    pub fn kink_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, n) in self.nodes.iter().enumerate() {
            match &n.op {
                Op::Relu(_) => {
                    i.hash(&mut h);
                    for v in n.value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf with no parameter binding.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// A leaf bound to a stored parameter. Running statistics enter as
    /// constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(
            p.value.clone(),
            Op::Leaf { param: Some(id) },
            p.is_trainable(),
        )
    }

    /// Same values as `x`, no graph linkage.
    pub fn detach(&mut self, x: Var) -> Var {
        if !self.stop_gradient {
            return x;
        }
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|a| a * c);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, c), rg)
    }

    /// Rectifier; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .map(|a| if a > T::zero() { a } else { T::zero() });
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    /// `ln(max(x, floor))`; gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: T) -> Var {
        let v = self.value(x).map(|a| a.max(floor).ln());
        let rg = self.rg(x);
        self.push(v, Op::Log { x, floor }, rg)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Row-wise softmax of an `N x K` tensor, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let [_, k] = dims2(self.shape(x), "softmax")?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = row.iter().map(|&a| (a - m).exp()).collect();
            let z: T = e.iter().copied().sum();
            out.extend(e.into_iter().map(|a| a / z));
        }
        let v = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Collapses all trailing axes: `N x …` → `N x prod(…)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// `y = x W^T + b` with `x: N x in`, `W: out x in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, fin] = dims2(self.shape(x), "linear input")?;
        let [fout, win] = dims2(self.shape(w), "linear weight")?;
        if fin != win {
            return Err(Error::config(format!(
                "linear: input {:?} incompatible with weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::config(format!(
                    "linear: bias {:?} does not match weight {:?}",
                    self.shape(b),
                    self.shape(w)
                )));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            Layout::N,
            self.value(w).data(),
            Layout::T,
            T::one(),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, fout], out)?, Op::Linear { x, w, b }, rg))
    }

    /// 2-d convolution, `x: N x Cin x H x W`, `w: Cout x Cin x kh x kw`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, cin, h, wd] = dims4(self.shape(x), "conv2d input")?;
        let [cout, wcin, kh, kw] = dims4(self.shape(w), "conv2d weight")?;
        if cin != wcin {
            return Err(Error::config(format!(
                "conv2d: input {:?} has {cin} channels but weight {:?} expects {wcin}",
                self.shape(x),
                self.shape(w)
            )));
        }
        let geom = ConvGeom {
            channels: cin,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            padding,
        };
        if !geom.fits() {
            return Err(Error::config(format!(
                "conv2d: kernel {kh}x{kw} (stride {stride}, padding {padding}) does not fit input {:?}",
                self.shape(x)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::config(format!(
                    "conv2d: bias {:?} does not match {cout} output channels",
                    self.shape(b)
                )));
            }
        }
        let (out, cols) = conv_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
        );
        let (ho, wo) = geom.out_hw();
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        // The patch matrix is only needed for weight gradients or dx.
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::new(&[n, cout, ho, wo], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                n,
                cols,
            },
            rg,
        ))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
        let d = dims4(self.shape(x), "batchnorm input")?;
        if self.shape(gamma) != [d[1]] || self.shape(beta) != [d[1]] {
            return Err(Error::config(format!(
                "batchnorm: gamma {:?} / beta {:?} do not match {} channels",
                self.shape(gamma),
                self.shape(beta),
                d[1]
            )));
        }
        Ok(d)
    }

    /// Batch-norm normalizing with the statistics of this batch.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<T>)> {
        let [n, c, h, w] = self.bn_check(x, gamma, beta)?;
        let hw = h * w;
        let xv = self.value(x).data();
        let (mean, var) = norm::channel_stats(xv, n, c, hw);
        let inv_std = norm::inv_std(&var);
        let (y, xhat) = norm::normalize(
            xv,
            n,
            c,
            hw,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(&[n, c, h, w], y)?,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Batch-norm with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let [n, c, h, w] = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::config(
                "batchnorm: running statistics length mismatch",
            ));
        }
        let inv_std = norm::inv_std(running_var);
        let (y, xhat) = norm::normalize(
            self.value(x).data(),
            n,
            c,
            h * w,
            running_mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&[n, c, h, w], y)?,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `N x C x H x W` → `N x C` spatial means.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::GlobalAvgPool(x), rg))
    }

    /// Max pooling with a square window and no padding.
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "max_pool")?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(Error::config(format!(
                "max_pool: window {kernel} stride {stride} does not fit {:?}",
                self.shape(x)
            )));
        }
        let ho = (h - kernel) / stride + 1;
        let wo = (w - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[n, c, ho, wo], out)?,
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; identity in
    /// eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout ratio {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Dropout { x, mask }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| match n.op {
                    Op::Leaf { .. } if n.requires_grad => {
                        Some(g.unwrap_or_else(|| vec![T::zero(); n.value.numel()]))
                    }
                    _ => None,
                })
                .collect(),
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| match n.op {
                    Op::Leaf { param: Some(p) } if n.requires_grad => Some((p, i)),
                    _ => None,
                })
                .collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a = *a + d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    self.acc(grads, *a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    self.acc(grads, *b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, g.iter().map(|&d| d * *c).collect()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&d, &a)| if a > T::zero() { d } else { T::zero() })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = g
                    .iter()
                    .zip(out)
                    .map(|(&d, &y)| d * (T::one() - y * y))
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Log { x, floor } => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&d, &a)| if a > *floor { d / a } else { T::zero() })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::Softmax(x) => {
                let k = node.value.shape()[1];
                let mut d = Vec::with_capacity(out.len());
                for (gy, y) in g.chunks(k).zip(out.chunks(k)) {
                    let dot: T = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    d.extend(gy.iter().zip(y).map(|(&a, &b)| b * (a - dot)));
                }
                self.acc(grads, *x, d);
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::Linear { x, w, b } => {
                let [n, fin] = dims2(self.shape(*x), "linear")?;
                let fout = node.value.shape()[1];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    gemm(
                        n,
                        fout,
                        fin,
                        g,
                        Layout::N,
                        self.value(*w).data(),
                        Layout::N,
                        T::zero(),
                        &mut dx,
                    );
                    self.acc(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(
                        fout,
                        n,
                        fin,
                        g,
                        Layout::T,
                        self.value(*x).data(),
                        Layout::N,
                        T::zero(),
                        &mut dw,
                    );
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); fout];
                        for row in g.chunks(fout) {
                            for (a, &d) in db.iter_mut().zip(row) {
                                *a = *a + d;
                            }
                        }
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                n,
                cols,
            } => {
                let cout = self.shape(*w)[0];
                let want_db = b.is_some_and(|b| self.rg(b));
                let (dx, dw, db) = conv_backward(
                    g,
                    cols,
                    *n,
                    geom,
                    self.value(*w).data(),
                    cout,
                    self.rg(*x),
                    self.rg(*w),
                    want_db,
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(grads, *b, db);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = dims4(self.shape(*x), "batchnorm")?;
                let hw = h * w;
                if self.rg(*x) {
                    let dx = norm::batch_input_grad(
                        g,
                        xhat,
                        self.value(*gamma).data(),
                        inv_std,
                        n,
                        c,
                        hw,
                    );
                    self.acc(grads, *x, dx);
                }
                let (dgamma, dbeta) = norm::affine_grads(g, xhat, n, c, hw);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = dims4(self.shape(*x), "batchnorm")?;
                let hw = h * w;
                if self.rg(*x) {
                    let gm = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); g.len()];
                    for (j, d) in dx.iter_mut().enumerate() {
                        let ch = (j / hw) % c;
                        *d = g[j] * gm[ch] * inv_std[ch];
                    }
                    self.acc(grads, *x, dx);
                }
                let (dgamma, dbeta) = norm::affine_grads(g, xhat, n, c, hw);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = dims4(self.shape(*x), "global_avg_pool")?;
                let hw = h * w;
                let inv = T::one() / T::of(hw as f64);
                let mut d = Vec::with_capacity(g.len() * hw);
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv * inv, hw));
                }
                self.acc(grads, *x, d);
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] = d[src] + gv;
                }
                self.acc(grads, *x, d);
            }
            Op::Dropout { x, mask } => {
                self.acc(
                    grads,
                    *x,
                    g.iter().zip(mask).map(|(&d, &m)| d * m).collect(),
                );
            }
        }
        Ok(())
    }
}

/// Gradients of one backward pass, available for every leaf that requires
/// a gradient (zero when unreachable from the loss).
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. a leaf; `None` if `v` is not a gradient-requiring leaf.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("grad shape"))
    }

    /// Gradient w.r.t. a bound parameter (summed over every leaf bound to it).
    pub fn param(&self, id: ParamId) -> Option<Vec<T>> {
        let mut out: Option<Vec<T>> = None;
        for &(p, node) in &self.params {
            if p != id {
                continue;
            }
            let g = self.grads[node].as_ref().expect("param leaf grad");
            match &mut out {
                Some(o) => o.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
                None => out = Some(g.clone()),
            }
        }
        out
    }

    /// Adds every parameter gradient into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(p, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(p, g);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}
