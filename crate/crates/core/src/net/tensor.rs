use std::cell::RefCell;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::volgrid::Dims;

/// Element type of activations and parameters. Training runs in `f32`;
/// gradient probes run the same code in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// `c <- alpha * a * b + beta * c` on raw strided storage.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds `m x k`, `k x n`, and
    /// `m x n` matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Runs `f` with two scratch slices of the given lengths, reusing
    /// per-thread storage across calls. Contents on entry are unspecified.
    fn with_scratch<R>(a: usize, b: usize, f: impl FnOnce(&mut [Self], &mut [Self]) -> R) -> R;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

thread_local! {
    static SCRATCH_F32: RefCell<(Vec<f32>, Vec<f32>)> = const { RefCell::new((Vec::new(), Vec::new())) };
    static SCRATCH_F64: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

fn prepare<T: Copy + Default>(buf: &mut Vec<T>, len: usize) {
    if buf.len() < len {
        buf.resize(len, T::default());
    }
}

impl Scalar for f32 {
    fn with_scratch<R>(a: usize, b: usize, f: impl FnOnce(&mut [Self], &mut [Self]) -> R) -> R {
        SCRATCH_F32.with(|cell| {
            let mut bufs = cell.borrow_mut();
            let (x, y) = &mut *bufs;
            prepare(x, a);
            prepare(y, b);
            f(&mut x[..a], &mut y[..b])
        })
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn with_scratch<R>(a: usize, b: usize, f: impl FnOnce(&mut [Self], &mut [Self]) -> R) -> R {
        SCRATCH_F64.with(|cell| {
            let mut bufs = cell.borrow_mut();
            let (x, y) = &mut *bufs;
            prepare(x, a);
            prepare(y, b);
            f(&mut x[..a], &mut y[..b])
        })
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C (m x n) = alpha * op(A) * op(B) + beta * C`.
///
/// `A` is stored `m x k` (or `k x m` when `trans_a`), `B` is stored `k x n`
/// (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertions above bound every index the strides reach,
    // and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `c (m x n) += a (m x k) * b (n x k)^T` as independent dot products.
///
/// GEMM packing wastes most of its work when `m` and `n` are tiny and `k` is
/// long, which is the shape of every convolution weight gradient.
pub fn matmul_nt_long<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for j in 0..n {
        let bj = &b[j * k..(j + 1) * k];
        for i in 0..m {
            c[i * n + j] += dot(&a[i * k..(i + 1) * k], bj);
        }
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// A batch of multi-channel volumes, laid out `[batch][channel][z][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5<T> {
    batch: usize,
    channels: usize,
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> Tensor5<T> {
    pub fn zeros(batch: usize, channels: usize, dims: Dims) -> Self {
        Self {
            batch,
            channels,
            dims,
            data: vec![T::zero(); batch * channels * dims.len()],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, dims: Dims, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            batch * channels * dims.len(),
            "tensor data length must equal the shape product"
        );
        Self {
            batch,
            channels,
            dims,
            data,
        }
    }

    pub fn filled(batch: usize, channels: usize, dims: Dims, v: T) -> Self {
        Self {
            batch,
            channels,
            dims,
            data: vec![v; batch * channels * dims.len()],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// `(batch, channels, nx, ny, nz)`.
    pub fn shape(&self) -> [usize; 5] {
        [self.batch, self.channels, self.dims.nx, self.dims.ny, self.dims.nz]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn spatial(&self) -> usize {
        self.dims.len()
    }

    /// All channels of one batch item, contiguous.
    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.channels * self.spatial();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.channels * self.spatial();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn channel(&self, b: usize, c: usize) -> &[T] {
        let s = self.spatial();
        let off = (b * self.channels + c) * s;
        &self.data[off..off + s]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let s = self.spatial();
        let off = (b * self.channels + c) * s;
        &mut self.data[off..off + s]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "shape mismatch in add");
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            batch: self.batch,
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Channel-wise concatenation.
    pub fn concat(parts: &[&Tensor5<T>]) -> Self {
        let first = parts[0];
        let (batch, dims) = (first.batch, first.dims);
        assert!(parts.iter().all(|p| p.batch == batch && p.dims == dims));
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(batch * channels * dims.len());
        for b in 0..batch {
            for p in parts {
                data.extend_from_slice(p.sample(b));
            }
        }
        Self {
            batch,
            channels,
            dims,
            data,
        }
    }

    /// Inverse of [`Tensor5::concat`]: split into chunks of the given widths.
    pub fn split(&self, widths: &[usize]) -> Vec<Tensor5<T>> {
        assert_eq!(widths.iter().sum::<usize>(), self.channels);
        let s = self.spatial();
        let mut out: Vec<Tensor5<T>> = widths
            .iter()
            .map(|&w| Tensor5::zeros(self.batch, w, self.dims))
            .collect();
        for b in 0..self.batch {
            let src = self.sample(b);
            let mut off = 0;
            for (t, &w) in out.iter_mut().zip(widths) {
                t.sample_mut(b).copy_from_slice(&src[off * s..(off + w) * s]);
                off += w;
            }
        }
        out
    }

    pub fn convert<U: Scalar>(&self) -> Tensor5<U> {
        Tensor5 {
            batch: self.batch,
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}
