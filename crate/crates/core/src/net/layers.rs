//! Differentiable 3D layers with hand-written backward passes.
//!
//! Layers keep their parameters and accumulate parameter gradients in
//! place; activations needed by the backward pass travel in explicit cache
//! values returned from `forward`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{matmul, matmul_nt_long, Scalar, Tensor5};
use super::NetError;
use crate::volgrid::Dims;

/// A named tensor of trainable values (or running statistics, which carry
/// no gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        Self {
            trainable: false,
            grad: Vec::new(),
            ..Self::new(name, shape, value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Visitor over every parameter and buffer of a module, in a fixed order.
pub trait Module<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));
}

fn gaussian<T: Scalar>(rng: &mut impl Rng, n: usize, std: f64) -> Vec<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| T::of(normal.sample(rng))).collect()
}

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.01;

/// Sliding-window geometry linking a dense grid with a column grid.
///
/// Along each axis the dense coordinate touched by column position `o` and
/// kernel tap `t` is `o * stride - pad + t * dilation`. A convolution reads
/// its input (dense) at output positions (columns); a transposed convolution
/// writes its output (dense) from input positions (columns).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub dense: Dims,
    pub cols: Dims,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    /// Column positions `[lo, hi)` whose tap `t` lands inside the dense axis.
    fn valid(&self, n_dense: usize, n_cols: usize, t: usize) -> (usize, usize) {
        let off = (t * self.dilation) as isize - self.pad as isize;
        let s = self.stride as isize;
        // o * s + off >= 0  and  o * s + off <= n_dense - 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_incl = (n_dense as isize - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, n_cols as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }

    fn dense_start(&self, o: usize, t: usize) -> usize {
        (o * self.stride + t * self.dilation - self.pad) as usize
    }

    /// `cols[(c, tz, ty, tx), pos] = dense[c, ...]`, zero outside the grid.
    pub fn gather<T: Scalar>(&self, dense: &[T], channels: usize, cols: &mut [T]) {
        let (d, o, k, s) = (self.dense, self.cols, self.kernel, self.stride);
        let (ds, os) = (d.len(), o.len());
        debug_assert_eq!(dense.len(), channels * ds);
        debug_assert_eq!(cols.len(), channels * self.taps() * os);
        for c in 0..channels {
            let src = &dense[c * ds..(c + 1) * ds];
            for tz in 0..k {
                let (z0, z1) = self.valid(d.nz, o.nz, tz);
                for ty in 0..k {
                    let (y0, y1) = self.valid(d.ny, o.ny, ty);
                    for tx in 0..k {
                        let (x0, x1) = self.valid(d.nx, o.nx, tx);
                        let row = ((c * k + tz) * k + ty) * k + tx;
                        let dst = &mut cols[row * os..(row + 1) * os];
                        dst.fill(T::zero());
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = self.dense_start(x0, tx);
                        for oz in z0..z1 {
                            let iz = self.dense_start(oz, tz);
                            for oy in y0..y1 {
                                let iy = self.dense_start(oy, ty);
                                let srow = &src[(iz * d.ny + iy) * d.nx..][..d.nx];
                                let drow = &mut dst[(oz * o.ny + oy) * o.nx..][..o.nx];
                                if s == 1 {
                                    drow[x0..x1].copy_from_slice(&srow[ix0..ix0 + (x1 - x0)]);
                                } else {
                                    for (j, v) in drow[x0..x1].iter_mut().enumerate() {
                                        *v = srow[ix0 + j * s];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::gather`]: `dense[c, ...] += cols[(c, taps), pos]`.
    pub fn scatter_add<T: Scalar>(&self, cols: &[T], channels: usize, dense: &mut [T]) {
        let (d, o, k, s) = (self.dense, self.cols, self.kernel, self.stride);
        let (ds, os) = (d.len(), o.len());
        debug_assert_eq!(dense.len(), channels * ds);
        debug_assert_eq!(cols.len(), channels * self.taps() * os);
        for c in 0..channels {
            let dst = &mut dense[c * ds..(c + 1) * ds];
            for tz in 0..k {
                let (z0, z1) = self.valid(d.nz, o.nz, tz);
                for ty in 0..k {
                    let (y0, y1) = self.valid(d.ny, o.ny, ty);
                    for tx in 0..k {
                        let (x0, x1) = self.valid(d.nx, o.nx, tx);
                        if x0 >= x1 {
                            continue;
                        }
                        let row = ((c * k + tz) * k + ty) * k + tx;
                        let src = &cols[row * os..(row + 1) * os];
                        let ix0 = self.dense_start(x0, tx);
                        for oz in z0..z1 {
                            let iz = self.dense_start(oz, tz);
                            for oy in y0..y1 {
                                let iy = self.dense_start(oy, ty);
                                let drow = &mut dst[(iz * d.ny + iy) * d.nx..][..d.nx];
                                let srow = &src[(oz * o.ny + oy) * o.nx..][..o.nx];
                                if s == 1 {
                                    for (a, &b) in drow[ix0..ix0 + (x1 - x0)].iter_mut().zip(&srow[x0..x1]) {
                                        *a += b;
                                    }
                                } else {
                                    for (j, &b) in srow[x0..x1].iter().enumerate() {
                                        drow[ix0 + j * s] += b;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = n + 2 * pad;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

/// Dilated 3D cross-correlation with "same" padding `dilation * (k-1) / 2`.
#[derive(Debug, Clone)]
pub struct Conv3d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    /// `[out_ch, in_ch, k, k, k]`.
    pub weight: Param<T>,
    /// `[out_ch]`.
    pub bias: Param<T>,
}

impl<T: Scalar> Conv3d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NetError> {
        if kernel % 2 == 0 {
            return Err(NetError::EvenKernel(kernel));
        }
        if stride == 0 || dilation == 0 {
            return Err(NetError::InvalidConfig("stride and dilation must be positive".into()));
        }
        let taps = kernel * kernel * kernel;
        Ok(Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: dilation * (kernel - 1) / 2,
            dilation,
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_ch, in_ch, kernel, kernel, kernel],
                gaussian(rng, out_ch * in_ch * taps, INIT_STD),
            ),
            bias: Param::new(format!("{name}.bias"), vec![out_ch], vec![T::zero(); out_ch]),
        })
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims, NetError> {
        let f = |n| {
            conv_out_len(n, self.kernel, self.stride, self.pad, self.dilation)
                .ok_or(NetError::KernelTooLarge { dims: input, dilation: self.dilation })
        };
        Ok(Dims::new(f(input.nx)?, f(input.ny)?, f(input.nz)?))
    }

    fn geometry(&self, input: Dims, output: Dims) -> Geometry {
        Geometry {
            dense: input,
            cols: output,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            dilation: self.dilation,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    pub fn forward(&self, x: &Tensor5<T>) -> Result<Tensor5<T>, NetError> {
        if x.channels() != self.in_ch {
            return Err(NetError::ChannelMismatch {
                expected: self.in_ch,
                found: x.channels(),
            });
        }
        let od = self.output_dims(x.dims())?;
        let geo = self.geometry(x.dims(), od);
        let rows = self.in_ch * self.kernel.pow(3);
        let os = od.len();
        let mut out = Tensor5::zeros(x.batch(), self.out_ch, od);
        let col_len = if self.is_pointwise() { 0 } else { rows * os };
        T::with_scratch(col_len, 0, |col, _| {
            for b in 0..x.batch() {
                let cols: &[T] = if self.is_pointwise() {
                    x.sample(b)
                } else {
                    geo.gather(x.sample(b), self.in_ch, col);
                    col
                };
                let dst = out.sample_mut(b);
                for (o, chunk) in dst.chunks_mut(os).enumerate() {
                    chunk.fill(self.bias.value[o]);
                }
                matmul(false, false, self.out_ch, os, rows, T::one(), &self.weight.value, cols, T::one(), dst);
            }
        });
        Ok(out)
    }

    /// Accumulates weight and bias gradients; returns the input gradient.
    pub fn backward(&mut self, x: &Tensor5<T>, gout: &Tensor5<T>) -> Tensor5<T> {
        let od = gout.dims();
        let geo = self.geometry(x.dims(), od);
        let rows = self.in_ch * self.kernel.pow(3);
        let os = od.len();
        let pointwise = self.is_pointwise();
        let mut gx = Tensor5::zeros(x.batch(), self.in_ch, x.dims());
        let col_len = if pointwise { 0 } else { rows * os };
        T::with_scratch(col_len, col_len, |col, gcol| {
            for b in 0..x.batch() {
                let g = gout.sample(b);
                for (o, chunk) in g.chunks(os).enumerate() {
                    self.bias.grad[o] += chunk.iter().copied().sum::<T>();
                }
                let cols: &[T] = if pointwise {
                    x.sample(b)
                } else {
                    geo.gather(x.sample(b), self.in_ch, col);
                    col
                };
                matmul_nt_long(self.out_ch, rows, os, g, cols, &mut self.weight.grad);
                if pointwise {
                    matmul(true, false, rows, os, self.out_ch, T::one(), &self.weight.value, g, T::zero(), gx.sample_mut(b));
                } else {
                    matmul(true, false, rows, os, self.out_ch, T::one(), &self.weight.value, g, T::zero(), gcol);
                    geo.scatter_add(gcol, self.in_ch, gx.sample_mut(b));
                }
            }
        });
        gx
    }
}

impl<T: Scalar> Module<T> for Conv3d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Separable trilinear upsampling filter of size `k` (the classic
/// bilinear-kernel initialisation extended to 3D).
pub fn trilinear_kernel(k: usize) -> Vec<f64> {
    let factor = k.div_ceil(2) as f64;
    let center = if k % 2 == 1 { factor - 1.0 } else { factor - 0.5 };
    let w1: Vec<f64> = (0..k).map(|i| 1.0 - (i as f64 - center).abs() / factor).collect();
    let mut out = Vec::with_capacity(k * k * k);
    for z in 0..k {
        for y in 0..k {
            for x in 0..k {
                out.push(w1[z] * w1[y] * w1[x]);
            }
        }
    }
    out
}

/// Transposed 3D convolution; kernel 4, stride 2, pad 1 doubles each axis.
#[derive(Debug, Clone)]
pub struct ConvTranspose3d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[in_ch, out_ch, k, k, k]`.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> ConvTranspose3d<T> {
    /// Weights start as trilinear interpolation on the channel diagonal
    /// (`in % out_ch == out`) and zero elsewhere.
    pub fn upsample2(name: &str, in_ch: usize, out_ch: usize) -> Self {
        let (k, stride, pad) = (4, 2, 1);
        let taps = k * k * k;
        let filt = trilinear_kernel(k);
        let mut w = vec![T::zero(); in_ch * out_ch * taps];
        for i in 0..in_ch {
            let o = i % out_ch;
            let base = (i * out_ch + o) * taps;
            for (t, &f) in filt.iter().enumerate() {
                w[base + t] = T::of(f);
            }
        }
        Self {
            in_ch,
            out_ch,
            kernel: k,
            stride,
            pad,
            weight: Param::new(format!("{name}.weight"), vec![in_ch, out_ch, k, k, k], w),
            bias: Param::new(format!("{name}.bias"), vec![out_ch], vec![T::zero(); out_ch]),
        }
    }

    pub fn output_dims(&self, input: Dims) -> Dims {
        let f = |n: usize| (n - 1) * self.stride + self.kernel - 2 * self.pad;
        Dims::new(f(input.nx), f(input.ny), f(input.nz))
    }

    fn geometry(&self, input: Dims) -> Geometry {
        Geometry {
            dense: self.output_dims(input),
            cols: input,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            dilation: 1,
        }
    }

    pub fn forward(&self, x: &Tensor5<T>) -> Result<Tensor5<T>, NetError> {
        if x.channels() != self.in_ch {
            return Err(NetError::ChannelMismatch {
                expected: self.in_ch,
                found: x.channels(),
            });
        }
        let geo = self.geometry(x.dims());
        let rows = self.out_ch * self.kernel.pow(3);
        let is = x.spatial();
        let os = geo.dense.len();
        let mut out = Tensor5::zeros(x.batch(), self.out_ch, geo.dense);
        T::with_scratch(rows * is, 0, |col, _| {
            for b in 0..x.batch() {
                // cols = W^T x
                matmul(true, false, rows, is, self.in_ch, T::one(), &self.weight.value, x.sample(b), T::zero(), col);
                let dst = out.sample_mut(b);
                for (o, chunk) in dst.chunks_mut(os).enumerate() {
                    chunk.fill(self.bias.value[o]);
                }
                geo.scatter_add(col, self.out_ch, dst);
            }
        });
        Ok(out)
    }

    pub fn backward(&mut self, x: &Tensor5<T>, gout: &Tensor5<T>) -> Tensor5<T> {
        let geo = self.geometry(x.dims());
        let rows = self.out_ch * self.kernel.pow(3);
        let is = x.spatial();
        let os = geo.dense.len();
        let mut gx = Tensor5::zeros(x.batch(), self.in_ch, x.dims());
        T::with_scratch(rows * is, 0, |gcol, _| {
            for b in 0..x.batch() {
                let g = gout.sample(b);
                for (o, chunk) in g.chunks(os).enumerate() {
                    self.bias.grad[o] += chunk.iter().copied().sum::<T>();
                }
                geo.gather(g, self.out_ch, gcol);
                matmul(false, false, self.in_ch, is, rows, T::one(), &self.weight.value, gcol, T::zero(), gx.sample_mut(b));
                matmul_nt_long(self.in_ch, rows, is, x.sample(b), gcol, &mut self.weight.grad);
            }
        });
        gx
    }
}

impl<T: Scalar> Module<T> for ConvTranspose3d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Whether batch-norm uses batch statistics (and updates its running
/// moments) or the frozen running moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm3d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor5<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Scalar> BatchNorm3d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![T::zero(); channels]),
            running_mean: Param::buffer(format!("{name}.running_mean"), vec![channels], vec![T::zero(); channels]),
            running_var: Param::buffer(format!("{name}.running_var"), vec![channels], vec![T::one(); channels]),
        }
    }

    pub fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> (Tensor5<T>, BnCache<T>) {
        let (nb, nc) = (x.batch(), x.channels());
        assert_eq!(nc, self.channels, "batch-norm channel mismatch");
        let count = (nb * x.spatial()) as f64;
        let mut inv_std = Vec::with_capacity(nc);
        let mut xhat = Tensor5::zeros(nb, nc, x.dims());
        let mut out = Tensor5::zeros(nb, nc, x.dims());
        for c in 0..nc {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for b in 0..nb {
                        sum += x.channel(b, c).iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut sq = 0.0;
                    for b in 0..nb {
                        sq += x.channel(b, c).iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
                    }
                    let var = sq / count;
                    let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                    let rm = &mut self.running_mean.value[c];
                    *rm = T::of((1.0 - BN_MOMENTUM) * rm.as_f64() + BN_MOMENTUM * mean);
                    let rv = &mut self.running_var.value[c];
                    *rv = T::of((1.0 - BN_MOMENTUM) * rv.as_f64() + BN_MOMENTUM * unbiased);
                    (mean, var)
                }
                Mode::Eval => (
                    self.running_mean.value[c].as_f64(),
                    self.running_var.value[c].as_f64(),
                ),
            };
            let istd = T::of(1.0 / (var + BN_EPS).sqrt());
            let mean = T::of(mean);
            let (g, bt) = (self.gamma.value[c], self.beta.value[c]);
            for b in 0..nb {
                let src = x.channel(b, c);
                let xh = xhat.channel_mut(b, c);
                for (h, &v) in xh.iter_mut().zip(src) {
                    *h = (v - mean) * istd;
                }
                let xh = xhat.channel(b, c);
                for (o, &h) in out.channel_mut(b, c).iter_mut().zip(xh) {
                    *o = g * h + bt;
                }
            }
            inv_std.push(istd);
        }
        (out, BnCache { xhat, inv_std, mode })
    }

    pub fn backward(&mut self, cache: &BnCache<T>, gout: &Tensor5<T>) -> Tensor5<T> {
        let (nb, nc) = (gout.batch(), gout.channels());
        let m = T::of((nb * gout.spatial()) as f64);
        let mut gx = Tensor5::zeros(nb, nc, gout.dims());
        for c in 0..nc {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for b in 0..nb {
                for (&g, &h) in gout.channel(b, c).iter().zip(cache.xhat.channel(b, c)) {
                    sum_g += g;
                    sum_gx += g * h;
                }
            }
            self.beta.grad[c] += sum_g;
            self.gamma.grad[c] += sum_gx;
            let gamma = self.gamma.value[c];
            let istd = cache.inv_std[c];
            for b in 0..nb {
                let go = gout.channel(b, c);
                let xh = cache.xhat.channel(b, c);
                let dst = gx.channel_mut(b, c);
                match cache.mode {
                    Mode::Train => {
                        let k = gamma * istd / m;
                        for ((d, &g), &h) in dst.iter_mut().zip(go).zip(xh) {
                            *d = k * (m * g - sum_g - h * sum_gx);
                        }
                    }
                    Mode::Eval => {
                        for (d, &g) in dst.iter_mut().zip(go) {
                            *d = gamma * istd * g;
                        }
                    }
                }
            }
        }
        gx
    }
}

impl<T: Scalar> Module<T> for BatchNorm3d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

pub fn relu<T: Scalar>(x: &Tensor5<T>) -> Tensor5<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Scalar>(out: &Tensor5<T>, gout: &Tensor5<T>) -> Tensor5<T> {
    let mut g = gout.clone();
    g.data_mut()
        .iter_mut()
        .zip(out.data())
        .for_each(|(g, &o)| {
            if o <= T::zero() {
                *g = T::zero();
            }
        });
    g
}

pub fn sigmoid<T: Scalar>(x: &Tensor5<T>) -> Tensor5<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Gradient through a sigmoid given its output.
pub fn sigmoid_backward<T: Scalar>(out: &Tensor5<T>, gout: &Tensor5<T>) -> Tensor5<T> {
    let mut g = gout.clone();
    g.data_mut()
        .iter_mut()
        .zip(out.data())
        .for_each(|(g, &p)| *g *= p * (T::one() - p));
    g
}

/// Pooled extent with ceil rounding: partial windows at the far edge count.
pub fn pooled_dims(dims: Dims, rate: usize) -> Dims {
    Dims::new(dims.nx.div_ceil(rate), dims.ny.div_ceil(rate), dims.nz.div_ceil(rate))
}

/// Average pooling with kernel = stride = `rate`, averaging only the voxels
/// inside the grid.
pub fn avg_pool<T: Scalar>(x: &Tensor5<T>, rate: usize) -> Tensor5<T> {
    let d = x.dims();
    let pd = pooled_dims(d, rate);
    let mut out = Tensor5::zeros(x.batch(), x.channels(), pd);
    let counts = pool_counts(d, rate);
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let src = x.channel(b, c);
            let dst = out.channel_mut(b, c);
            for (i, &v) in src.iter().enumerate() {
                let (px, py, pz) = d.coords(i);
                dst[pd.index(px / rate, py / rate, pz / rate)] += v;
            }
            for (v, &n) in dst.iter_mut().zip(&counts) {
                *v = *v / T::of(n as f64);
            }
        }
    }
    out
}

fn pool_counts(d: Dims, rate: usize) -> Vec<usize> {
    let pd = pooled_dims(d, rate);
    let mut counts = vec![0usize; pd.len()];
    for i in 0..d.len() {
        let (x, y, z) = d.coords(i);
        counts[pd.index(x / rate, y / rate, z / rate)] += 1;
    }
    counts
}

pub fn avg_pool_backward<T: Scalar>(gout: &Tensor5<T>, input_dims: Dims, rate: usize) -> Tensor5<T> {
    let pd = gout.dims();
    let counts = pool_counts(input_dims, rate);
    let mut gx = Tensor5::zeros(gout.batch(), gout.channels(), input_dims);
    for b in 0..gout.batch() {
        for c in 0..gout.channels() {
            let g = gout.channel(b, c);
            for (i, v) in gx.channel_mut(b, c).iter_mut().enumerate() {
                let (x, y, z) = input_dims.coords(i);
                let p = pd.index(x / rate, y / rate, z / rate);
                *v = g[p] / T::of(counts[p] as f64);
            }
        }
    }
    gx
}

/// Nearest-neighbour upsampling: output voxel `v` copies input `v / rate`.
pub fn upsample_nearest<T: Scalar>(x: &Tensor5<T>, rate: usize, out_dims: Dims) -> Tensor5<T> {
    let d = x.dims();
    let mut out = Tensor5::zeros(x.batch(), x.channels(), out_dims);
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let src = x.channel(b, c);
            for (i, v) in out.channel_mut(b, c).iter_mut().enumerate() {
                let (px, py, pz) = out_dims.coords(i);
                *v = src[d.index(px / rate, py / rate, pz / rate)];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Scalar>(gout: &Tensor5<T>, rate: usize, in_dims: Dims) -> Tensor5<T> {
    let od = gout.dims();
    let mut gx = Tensor5::zeros(gout.batch(), gout.channels(), in_dims);
    for b in 0..gout.batch() {
        for c in 0..gout.channels() {
            let g = gout.channel(b, c);
            let dst = gx.channel_mut(b, c);
            for (i, &v) in g.iter().enumerate() {
                let (px, py, pz) = od.coords(i);
                dst[in_dims.index(px / rate, py / rate, pz / rate)] += v;
            }
        }
    }
    gx
}

/// Convolution, batch-norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<T> {
    pub conv: Conv3d<T>,
    pub bn: BatchNorm3d<T>,
}

#[derive(Debug, Clone)]
pub struct UnitCache<T> {
    input: Tensor5<T>,
    bn: BnCache<T>,
    out: Tensor5<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NetError> {
        Ok(Self {
            conv: Conv3d::new(&format!("{name}.conv"), in_ch, out_ch, kernel, stride, dilation, rng)?,
            bn: BatchNorm3d::new(&format!("{name}.bn"), out_ch),
        })
    }

    pub fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, UnitCache<T>), NetError> {
        let z = self.conv.forward(x)?;
        let (n, bn) = self.bn.forward(&z, mode);
        let out = relu(&n);
        Ok((
            out.clone(),
            UnitCache {
                input: x.clone(),
                bn,
                out,
            },
        ))
    }

    pub fn backward(&mut self, cache: &UnitCache<T>, gout: &Tensor5<T>) -> Tensor5<T> {
        let g = relu_backward(&cache.out, gout);
        let g = self.bn.backward(&cache.bn, &g);
        self.conv.backward(&cache.input, &g)
    }
}

impl<T: Scalar> Module<T> for ConvBnRelu<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// Transposed convolution, batch-norm, ReLU.
#[derive(Debug, Clone)]
pub struct UpBnRelu<T> {
    pub up: ConvTranspose3d<T>,
    pub bn: BatchNorm3d<T>,
}

impl<T: Scalar> UpBnRelu<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize) -> Self {
        Self {
            up: ConvTranspose3d::upsample2(&format!("{name}.deconv"), in_ch, out_ch),
            bn: BatchNorm3d::new(&format!("{name}.bn"), out_ch),
        }
    }

    pub fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, UnitCache<T>), NetError> {
        let z = self.up.forward(x)?;
        let (n, bn) = self.bn.forward(&z, mode);
        let out = relu(&n);
        Ok((
            out.clone(),
            UnitCache {
                input: x.clone(),
                bn,
                out,
            },
        ))
    }

    pub fn backward(&mut self, cache: &UnitCache<T>, gout: &Tensor5<T>) -> Tensor5<T> {
        let g = relu_backward(&cache.out, gout);
        let g = self.bn.backward(&cache.bn, &g);
        self.up.backward(&cache.input, &g)
    }
}

impl<T: Scalar> Module<T> for UpBnRelu<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.up.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.up.visit_mut(f);
        self.bn.visit_mut(f);
    }
}
