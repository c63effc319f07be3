//! Minimal planar tensors and layers with hand-written reverse passes.
//!
//! Parameters live in one flat vector per model; each [`Conv2d`] records the
//! offset of its weights (`[cout][cin][k][k]`) followed by its bias.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;
use crate::scalar::Scalar;

/// Channel-planar (`C x H x W`) feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "tensor data length {} != {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_image(img: &Image<T>) -> Self {
        let (w, h, c) = (img.width(), img.height(), img.channels());
        let mut data = vec![T::zero(); w * h * c];
        for (i, px) in img.data().chunks_exact(c).enumerate() {
            for (k, &v) in px.iter().enumerate() {
                data[k * w * h + i] = v;
            }
        }
        Tensor {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    pub fn to_image(&self) -> Result<Image<T>> {
        let plane = self.width * self.height;
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..plane {
            for k in 0..self.channels {
                data.push(self.data[k * plane + i]);
            }
        }
        Image::new(self.width, self.height, self.channels, data)
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Channel-wise concatenation.
    pub fn concat(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        if parts.iter().any(|p| p.height != first.height || p.width != first.width) {
            return Err(Error::invalid("concat: spatial dimensions differ"));
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(channels * first.height * first.width);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            channels,
            height: first.height,
            width: first.width,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Dot product with eight fixed-order partial sums.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Same-padded square convolution, kernel 1 or 3, optional bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub bias: bool,
    pub offset: usize,
}

impl Conv2d {
    pub fn weight_count(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.bias { self.cout } else { 0 }
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.param_count()
    }

    /// Iterates `(tap index, dy, dx)` over the kernel footprint.
    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize)> {
        let k = self.kernel as isize;
        let r = k / 2;
        (0..k * k).map(move |i| (i as usize, i / k - r, i % k - r))
    }

    fn check_input<T>(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels != self.cin {
            return Err(Error::invalid(format!(
                "conv expects {} input channels, got {}",
                self.cin, x.channels
            )));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (h, w) = (x.height, x.width);
        let kk = self.kernel * self.kernel;
        let wts = &params[self.offset..self.offset + self.weight_count()];
        let mut out = Tensor::zeros(self.cout, h, w);
        for (co, oplane) in out.data.chunks_exact_mut(h * w).enumerate() {
            if self.bias {
                let b = params[self.offset + self.weight_count() + co];
                oplane.iter_mut().for_each(|v| *v = b);
            }
            for ci in 0..self.cin {
                let iplane = x.plane(ci);
                for (tap, dy, dx) in self.taps() {
                    let wv = wts[(co * self.cin + ci) * kk + tap];
                    let (y0, y1) = span(h, dy);
                    let (x0, x1) = span(w, dx);
                    for y in y0..y1 {
                        let ys = (y as isize + dy) as usize;
                        let xs0 = (x0 as isize + dx) as usize;
                        axpy(
                            wv,
                            &iplane[ys * w + xs0..ys * w + xs0 + (x1 - x0)],
                            &mut oplane[y * w + x0..y * w + x1],
                        );
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward<T: Scalar>(&self, params: &[T], x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [T]) -> Tensor<T> {
        let (h, w) = (x.height, x.width);
        let kk = self.kernel * self.kernel;
        let mut dx = Tensor::zeros(self.cin, h, w);
        for co in 0..self.cout {
            let gplane = dy.plane(co);
            if self.bias {
                let s = gplane.iter().fold(T::zero(), |a, &v| a + v);
                grads[self.offset + self.weight_count() + co] += s;
            }
            for ci in 0..self.cin {
                let iplane = x.plane(ci);
                for (tap, ddy, ddx) in self.taps() {
                    let widx = self.offset + (co * self.cin + ci) * kk + tap;
                    let wv = params[widx];
                    let (y0, y1) = span(h, ddy);
                    let (x0, x1) = span(w, ddx);
                    let n = x1 - x0;
                    let mut gw = T::zero();
                    let dplane = &mut dx.data[ci * h * w..(ci + 1) * h * w];
                    for y in y0..y1 {
                        let ys = (y as isize + ddy) as usize;
                        let xs0 = (x0 as isize + ddx) as usize;
                        let g = &gplane[y * w + x0..y * w + x1];
                        gw += dot(g, &iplane[ys * w + xs0..ys * w + xs0 + n]);
                        axpy(wv, g, &mut dplane[ys * w + xs0..ys * w + xs0 + n]);
                    }
                    grads[widx] += gw;
                }
            }
        }
        dx
    }
}

/// Output index range whose source `i + d` stays inside `0..n`.
#[inline]
fn span(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(lo as isize) as usize;
    (lo, hi)
}

/// Slope of the leaky rectifier on negative inputs.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Differentiable step in a sequential stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Conv(Conv2d),
    LeakyRelu,
    AvgPool2,
    Upsample2,
}

impl Op {
    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Op::Conv(c) => c.forward(params, x),
            Op::LeakyRelu => {
                let s = T::of(LEAKY_SLOPE);
                Ok(Tensor {
                    data: x.data.iter().map(|&v| if v > T::zero() { v } else { v * s }).collect(),
                    ..*x
                })
            }
            Op::AvgPool2 => {
                if !x.height.is_multiple_of(2) || !x.width.is_multiple_of(2) {
                    return Err(Error::invalid(format!(
                        "average pooling needs even dimensions, got {}x{}",
                        x.width, x.height
                    )));
                }
                let (h2, w2) = (x.height / 2, x.width / 2);
                let q = T::of(0.25);
                let mut out = Tensor::zeros(x.channels, h2, w2);
                for c in 0..x.channels {
                    let p = x.plane(c);
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let i = 2 * y * x.width + 2 * xx;
                            out.data[(c * h2 + y) * w2 + xx] =
                                (p[i] + p[i + 1] + p[i + x.width] + p[i + x.width + 1]) * q;
                        }
                    }
                }
                Ok(out)
            }
            Op::Upsample2 => {
                let (h2, w2) = (x.height * 2, x.width * 2);
                let mut out = Tensor::zeros(x.channels, h2, w2);
                for c in 0..x.channels {
                    let p = x.plane(c);
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            out.data[(c * h2 + y) * w2 + xx] = p[(y / 2) * x.width + xx / 2];
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Reverse pass given the op's cached input.
    pub fn backward<T: Scalar>(&self, params: &[T], x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [T]) -> Tensor<T> {
        match self {
            Op::Conv(c) => c.backward(params, x, dy, grads),
            Op::LeakyRelu => {
                let s = T::of(LEAKY_SLOPE);
                let data = x
                    .data
                    .iter()
                    .zip(&dy.data)
                    .map(|(&v, &g)| if v > T::zero() { g } else { g * s })
                    .collect();
                Tensor { data, ..*x }
            }
            Op::AvgPool2 => {
                let mut dx = Tensor::zeros(x.channels, x.height, x.width);
                let (h2, w2) = (dy.height, dy.width);
                let q = T::of(0.25);
                for c in 0..x.channels {
                    for y in 0..x.height {
                        for xx in 0..x.width {
                            dx.data[(c * x.height + y) * x.width + xx] = dy.data[(c * h2 + y / 2) * w2 + xx / 2] * q;
                        }
                    }
                }
                dx
            }
            Op::Upsample2 => {
                let mut dx = Tensor::zeros(x.channels, x.height, x.width);
                let w2 = dy.width;
                for c in 0..x.channels {
                    let g = dy.plane(c);
                    for y in 0..x.height {
                        for xx in 0..x.width {
                            let i = 2 * y * w2 + 2 * xx;
                            dx.data[(c * x.height + y) * x.width + xx] =
                                (g[i] + g[i + 1]) + (g[i + w2] + g[i + w2 + 1]);
                        }
                    }
                }
                dx
            }
        }
    }
}

/// Ops applied in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Seq(pub Vec<Op>);

/// Inputs of every op of a [`Seq`] from one forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T>(Vec<Tensor<T>>);

impl Seq {
    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for op in &self.0 {
            cur = op.forward(params, &cur)?;
        }
        Ok(cur)
    }

    pub fn forward_taped<T: Scalar>(&self, params: &[T], x: Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        let mut tape = Vec::with_capacity(self.0.len());
        let mut cur = x;
        for op in &self.0 {
            let next = op.forward(params, &cur)?;
            tape.push(cur);
            cur = next;
        }
        Ok((cur, Tape(tape)))
    }

    /// Signs of every LeakyReLU input, which identify the linear piece the
    /// forward pass runs on.
    pub fn relu_pattern<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Result<Vec<bool>> {
        let mut pattern = Vec::new();
        let mut cur = x.clone();
        for op in &self.0 {
            if let Op::LeakyRelu = op {
                pattern.extend(cur.data.iter().map(|&v| v > T::zero()));
            }
            cur = op.forward(params, &cur)?;
        }
        Ok(pattern)
    }

    pub fn backward<T: Scalar>(&self, params: &[T], tape: &Tape<T>, dy: Tensor<T>, grads: &mut [T]) -> Tensor<T> {
        let mut g = dy;
        for (op, x) in self.0.iter().zip(&tape.0).rev() {
            g = op.backward(params, x, &g, grads);
        }
        g
    }
}

/// Hands out consecutive parameter offsets while a model is being laid out.
#[derive(Debug, Default)]
pub struct ParamLayout {
    next: usize,
    convs: Vec<Conv2d>,
}

impl ParamLayout {
    pub fn conv(&mut self, cin: usize, cout: usize, kernel: usize, bias: bool) -> Conv2d {
        let c = Conv2d {
            cin,
            cout,
            kernel,
            bias,
            offset: self.next,
        };
        self.next += c.param_count();
        self.convs.push(c);
        c
    }

    pub fn len(&self) -> usize {
        self.next
    }

    pub fn is_empty(&self) -> bool {
        self.next == 0
    }
}

/// How a convolution's weights start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with variance `2 / fan_in`; bias zero.
    He,
    Zero,
}

pub fn init_conv<T: Scalar>(c: &Conv2d, init: Init, params: &mut [T], seed: u64) {
    let range = c.range();
    let slot = &mut params[range];
    match init {
        Init::Zero => slot.iter_mut().for_each(|v| *v = T::zero()),
        Init::He => {
            let std = (2.0 / (c.cin * c.kernel * c.kernel) as f64).sqrt();
            let mut r = rng::stream(seed, c.offset as u64);
            let nw = c.weight_count();
            for (i, v) in slot.iter_mut().enumerate() {
                *v = if i < nw {
                    let z: f64 = StandardNormal.sample(&mut r);
                    T::of(std * z)
                } else {
                    T::zero()
                };
            }
        }
    }
}

/// Scales `grads` in place so its L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Plain SGD update restricted to parameters where `mask` is true (all when `None`).
pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], lr: f64, mask: Option<&[bool]>) {
    let lr = T::of(lr);
    for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            *p -= lr * g;
        }
    }
}

/// Worst coordinate of a central finite-difference check of `grad` against `loss`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradAudit {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose step had to shrink to stay on one linear piece.
    pub refined: usize,
}

/// Relative error `|a - b| / max(|a|, |b|, floor)` per coordinate.
pub fn fd_audit(
    params: &[f64],
    grad: &[f64],
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradAudit> {
    fd_audit_piecewise(params, grad, h, h, floor, |p| Ok((loss(p)?, Vec::new())))
}

/// [`fd_audit`] for piecewise-smooth losses. `eval` returns the loss and a
/// signature of the active piece (see [`Seq::relu_pattern`]). Where the
/// stencil at step `h` leaves the piece of the unperturbed point, the step
/// shrinks tenfold, no further than `min_h`.
pub fn fd_audit_piecewise(
    params: &[f64],
    grad: &[f64],
    h: f64,
    min_h: f64,
    floor: f64,
    mut eval: impl FnMut(&[f64]) -> Result<(f64, Vec<bool>)>,
) -> Result<GradAudit> {
    if grad.len() != params.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries for {} parameters",
            grad.len(),
            params.len()
        )));
    }
    let mut p = params.to_vec();
    let (_, base_piece) = eval(&p)?;
    let mut audit = GradAudit {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: 0,
        refined: 0,
    };
    for i in 0..params.len() {
        let base = p[i];
        let mut step = h;
        let fd = loop {
            p[i] = base + step;
            let (lp, piece_p) = eval(&p)?;
            p[i] = base - step;
            let (lm, piece_m) = eval(&p)?;
            p[i] = base;
            let same = piece_p == base_piece && piece_m == base_piece;
            if same || step / 10.0 < min_h {
                break (lp - lm) / (2.0 * step);
            }
            step /= 10.0;
        };
        if step < h {
            audit.refined += 1;
        }
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(floor);
        if !rel.is_finite() {
            return Err(Error::Numeric(format!("finite difference at {i} is not finite")));
        }
        if rel > audit.max_rel_err {
            audit.max_rel_err = rel;
            audit.worst_index = i;
        }
        audit.checked += 1;
    }
    Ok(audit)
}
