//! Minimal convolutional building blocks with explicit backward passes.
//!
//! Activations are laid out channel-major (`C × N × H × W`) so that a
//! convolution over the whole batch is a single `W · col` product whose
//! result is already in the output layout.

use std::fmt::Debug;

use num_traits::Float;

/// Floating-point element usable by the network. Implemented for `f32`
/// (training) and `f64` (gradient checks).
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `c ← alpha · a·b + beta · c` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Channel-major activation tensor, index `((c·n + i)·h + y)·w + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, y: usize, x: usize) -> usize {
        ((c * self.batch + i) * self.height + y) * self.width + x
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        (self.channels, self.batch, self.height, self.width)
            == (other.channels, other.batch, other.height, other.width)
    }

    /// Stacks interleaved-RGB images (`H × W × 3`, row-major) into a batch.
    pub fn from_hwc_images<'a, I>(images: I, height: usize, width: usize) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let images: Vec<&[f64]> = images.into_iter().collect();
        let mut t = Self::zeros(3, images.len(), height, width);
        for (i, img) in images.iter().enumerate() {
            assert_eq!(img.len(), height * width * 3);
            for c in 0..3 {
                let base = t.index(c, i, 0, 0);
                for p in 0..height * width {
                    t.data[base + p] = T::from_f64(img[p * 3 + c]);
                }
            }
        }
        t
    }

    /// Sample `i` as interleaved RGB `f64`.
    pub fn sample_to_hwc(&self, i: usize) -> Vec<f64> {
        assert_eq!(self.channels, 3);
        let plane = self.plane();
        let mut out = vec![0.0; plane * 3];
        for c in 0..3 {
            let base = self.index(c, i, 0, 0);
            for p in 0..plane {
                out[p * 3 + c] = self.data[base + p].as_f64();
            }
        }
        out
    }

    /// Concatenates along channels (cheap in channel-major layout).
    pub fn concat(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(
            (self.batch, self.height, self.width),
            (other.batch, other.height, other.width)
        );
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor {
            channels: self.channels + other.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Splits channels `[0, first)` and `[first, C)`.
    pub fn split(&self, first: usize) -> (Tensor<T>, Tensor<T>) {
        let cut = first * self.batch * self.plane();
        (
            Tensor {
                channels: first,
                batch: self.batch,
                height: self.height,
                width: self.width,
                data: self.data[..cut].to_vec(),
            },
            Tensor {
                channels: self.channels - first,
                batch: self.batch,
                height: self.height,
                width: self.width,
                data: self.data[cut..].to_vec(),
            },
        )
    }

    /// Picks batch entries by index (with repetition).
    pub fn gather(&self, indices: &[usize]) -> Tensor<T> {
        let plane = self.plane();
        let mut out = Tensor::zeros(self.channels, indices.len(), self.height, self.width);
        for c in 0..self.channels {
            for (j, &i) in indices.iter().enumerate() {
                let src = self.index(c, i, 0, 0);
                let dst = out.index(c, j, 0, 0);
                out.data[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        out
    }

    /// Adjoint of [`gather`](Self::gather): sums rows back into `batch` slots.
    pub fn scatter_add(&self, indices: &[usize], batch: usize) -> Tensor<T> {
        let plane = self.plane();
        let mut out = Tensor::zeros(self.channels, batch, self.height, self.width);
        for c in 0..self.channels {
            for (j, &i) in indices.iter().enumerate() {
                let src = self.index(c, j, 0, 0);
                let dst = out.index(c, i, 0, 0);
                for p in 0..plane {
                    out.data[dst + p] = out.data[dst + p] + self.data[src + p];
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Static description of one convolution and where its weights live in the
/// flat parameter vector. Weights are `[cout][cin][k][k]` followed by `[cout]`
/// biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub offset: usize,
}

/// Upper bound on im2col buffer elements; larger batches are processed in
/// sample chunks.
/// Flushes subnormal floats to zero on the current thread until dropped.
///
/// Late in training the f32 backward pass underflows into subnormals, which
/// x86 handles in microcode at a large per-operation cost. Elsewhere this is
/// a no-op.
pub struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
const MXCSR_FTZ_DAZ: u32 = 0x8040;

#[cfg(target_arch = "x86_64")]
fn read_mxcsr() -> u32 {
    let mut v = 0u32;
    // SAFETY: stores the 32-bit control register into a local.
    unsafe { std::arch::asm!("stmxcsr [{}]", in(reg) &mut v, options(nostack, preserves_flags)) };
    v
}

#[cfg(target_arch = "x86_64")]
fn write_mxcsr(v: u32) {
    // SAFETY: only the rounding-mode-neutral FTZ/DAZ bits ever differ from
    // the value read back from the register.
    unsafe { std::arch::asm!("ldmxcsr [{}]", in(reg) &v, options(nostack, readonly, preserves_flags)) };
}

impl FlushDenormals {
    pub fn new() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            let saved = read_mxcsr();
            write_mxcsr(saved | MXCSR_FTZ_DAZ);
            Self { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        Self {}
    }
}

impl Default for FlushDenormals {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        write_mxcsr(self.saved);
    }
}

const COL_BUDGET: usize = 1 << 20;

impl Conv {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, offset: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            offset,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn chunk(&self, ho: usize, wo: usize, batch: usize) -> usize {
        let per_sample = self.fan_in() * ho * wo;
        (COL_BUDGET / per_sample.max(1)).clamp(1, batch.max(1))
    }

    /// Output columns `ox` whose input column `ox·stride + kx − pad` lies
    /// inside `0..w`.
    fn valid_cols(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        // Largest ox with ox·s + kx − pad ≤ w − 1.
        let hi = if w + self.pad <= kx {
            0
        } else {
            ((w + self.pad - kx - 1) / s + 1).min(wo)
        };
        (lo.min(hi), hi)
    }

    /// Fills `col` (`[cin·k·k, chunk·ho·wo]`) for samples `i0..i0+chunk`.
    fn im2col<T: Scalar>(&self, x: &Tensor<T>, i0: usize, chunk: usize, col: &mut [T]) {
        let (ho, wo) = self.out_size(x.height, x.width);
        let ncols = chunk * ho * wo;
        let h = x.height;
        let k = self.kernel;
        let s = self.stride;
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    let (lo, hi) = self.valid_cols(kx, x.width, wo);
                    for j in 0..chunk {
                        let base = x.index(ci, i0 + j, 0, 0);
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - self.pad as isize;
                            let out = &mut dst[(j * ho + oy) * wo..(j * ho + oy + 1) * wo];
                            if iy < 0 || iy >= h as isize {
                                out.fill(T::zero());
                                continue;
                            }
                            out[..lo].fill(T::zero());
                            out[hi..].fill(T::zero());
                            if hi > lo {
                                let first = base + iy as usize * x.width + lo * s + kx - self.pad;
                                if s == 1 {
                                    out[lo..hi].copy_from_slice(&x.data[first..first + hi - lo]);
                                } else {
                                    let src = &x.data[first..];
                                    for (o, v) in out[lo..hi].iter_mut().zip(src.iter().step_by(s)) {
                                        *o = *v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col), accumulating into `dx`.
    fn col2im<T: Scalar>(&self, col: &[T], i0: usize, chunk: usize, dx: &mut Tensor<T>) {
        let (ho, wo) = self.out_size(dx.height, dx.width);
        let ncols = chunk * ho * wo;
        let h = dx.height;
        let k = self.kernel;
        let s = self.stride;
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * ncols..(row + 1) * ncols];
                    let (lo, hi) = self.valid_cols(kx, dx.width, wo);
                    if hi <= lo {
                        continue;
                    }
                    for j in 0..chunk {
                        let base = dx.index(ci, i0 + j, 0, 0);
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let first = base + iy as usize * dx.width + lo * s + kx - self.pad;
                            let vals = &src[(j * ho + oy) * wo + lo..(j * ho + oy) * wo + hi];
                            if s == 1 {
                                for (d, &v) in dx.data[first..first + hi - lo].iter_mut().zip(vals) {
                                    *d = *d + v;
                                }
                            } else {
                                for (d, &v) in dx.data[first..].iter_mut().step_by(s).zip(vals) {
                                    *d = *d + v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels, self.cin, "conv input channels");
        let (ho, wo) = self.out_size(x.height, x.width);
        let n = x.batch;
        let total_cols = n * ho * wo;
        let mut y = Tensor::zeros(self.cout, n, ho, wo);
        let weights = &params[self.offset..self.offset + self.weight_len()];
        let bias = &params[self.offset + self.weight_len()..self.offset + self.param_len()];
        for (co, &b) in bias.iter().enumerate() {
            y.data[co * total_cols..(co + 1) * total_cols].fill(b);
        }
        let kdim = self.fan_in();
        if self.is_pointwise() {
            unsafe {
                T::gemm(
                    self.cout,
                    kdim,
                    total_cols,
                    T::one(),
                    weights.as_ptr(),
                    kdim as isize,
                    1,
                    x.data.as_ptr(),
                    total_cols as isize,
                    1,
                    T::one(),
                    y.data.as_mut_ptr(),
                    total_cols as isize,
                    1,
                );
            }
            return y;
        }
        let chunk = self.chunk(ho, wo, n);
        let mut col = vec![T::zero(); kdim * chunk * ho * wo];
        let mut i0 = 0;
        while i0 < n {
            let c = chunk.min(n - i0);
            let ncols = c * ho * wo;
            self.im2col(x, i0, c, &mut col[..kdim * ncols]);
            unsafe {
                T::gemm(
                    self.cout,
                    kdim,
                    ncols,
                    T::one(),
                    weights.as_ptr(),
                    kdim as isize,
                    1,
                    col.as_ptr(),
                    ncols as isize,
                    1,
                    T::one(),
                    y.data.as_mut_ptr().add(i0 * ho * wo),
                    total_cols as isize,
                    1,
                );
            }
            i0 += c;
        }
        y
    }

    /// Accumulates parameter gradients into `grads` and returns `∂L/∂x`.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        grads: &mut [T],
        x: &Tensor<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let (ho, wo) = self.out_size(x.height, x.width);
        let n = x.batch;
        let total_cols = n * ho * wo;
        let kdim = self.fan_in();
        let wlen = self.weight_len();
        let weights = &params[self.offset..self.offset + wlen];
        let bias_grads = &mut grads[self.offset + wlen..self.offset + self.param_len()];
        for (co, g) in bias_grads.iter_mut().enumerate() {
            let s: T = dy.data[co * total_cols..(co + 1) * total_cols].iter().copied().sum();
            *g = *g + s;
        }
        let mut dx = need_dx.then(|| Tensor::zeros(self.cin, n, x.height, x.width));

        if self.is_pointwise() {
            unsafe {
                // dW[cout, cin] += dy[cout, M] · xᵀ[M, cin]
                T::gemm(
                    self.cout,
                    total_cols,
                    kdim,
                    T::one(),
                    dy.data.as_ptr(),
                    total_cols as isize,
                    1,
                    x.data.as_ptr(),
                    1,
                    total_cols as isize,
                    T::one(),
                    grads.as_mut_ptr().add(self.offset),
                    kdim as isize,
                    1,
                );
                if let Some(dx) = dx.as_mut() {
                    T::gemm(
                        kdim,
                        self.cout,
                        total_cols,
                        T::one(),
                        weights.as_ptr(),
                        1,
                        kdim as isize,
                        dy.data.as_ptr(),
                        total_cols as isize,
                        1,
                        T::zero(),
                        dx.data.as_mut_ptr(),
                        total_cols as isize,
                        1,
                    );
                }
            }
            return dx;
        }

        let chunk = self.chunk(ho, wo, n);
        let mut col = vec![T::zero(); kdim * chunk * ho * wo];
        let mut dcol = if need_dx {
            vec![T::zero(); kdim * chunk * ho * wo]
        } else {
            Vec::new()
        };
        let mut i0 = 0;
        while i0 < n {
            let c = chunk.min(n - i0);
            let ncols = c * ho * wo;
            self.im2col(x, i0, c, &mut col[..kdim * ncols]);
            unsafe {
                let dy_ptr = dy.data.as_ptr().add(i0 * ho * wo);
                T::gemm(
                    self.cout,
                    ncols,
                    kdim,
                    T::one(),
                    dy_ptr,
                    total_cols as isize,
                    1,
                    col.as_ptr(),
                    1,
                    ncols as isize,
                    T::one(),
                    grads.as_mut_ptr().add(self.offset),
                    kdim as isize,
                    1,
                );
                if need_dx {
                    T::gemm(
                        kdim,
                        self.cout,
                        ncols,
                        T::one(),
                        weights.as_ptr(),
                        1,
                        kdim as isize,
                        dy_ptr,
                        total_cols as isize,
                        1,
                        T::zero(),
                        dcol.as_mut_ptr(),
                        ncols as isize,
                        1,
                    );
                }
            }
            if let Some(dx) = dx.as_mut() {
                self.col2im(&dcol[..kdim * ncols], i0, c, dx);
            }
            i0 += c;
        }
        dx
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    let slope = T::from_f64(LEAKY_SLOPE);
    for v in &mut x.data {
        if *v < T::zero() {
            *v = *v * slope;
        }
    }
}

/// Gradient through a leaky rectifier given its *output* (the sign is preserved).
pub fn leaky_relu_backward<T: Scalar>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    let slope = T::from_f64(LEAKY_SLOPE);
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o < T::zero() {
            *g = *g * slope;
        }
    }
}

pub fn sigmoid_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        *v = T::one() / (T::one() + (-*v).exp());
    }
}

pub fn sigmoid_backward<T: Scalar>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, &s) in dy.data.iter_mut().zip(&out.data) {
        *g = *g * s * (T::one() - s);
    }
}

pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = Tensor::zeros(x.channels, x.batch, x.height * 2, x.width * 2);
    let (w, w2) = (x.width, x.width * 2);
    for plane in 0..x.channels * x.batch {
        let src = &x.data[plane * x.plane()..(plane + 1) * x.plane()];
        let dst = &mut y.data[plane * 4 * x.plane()..(plane + 1) * 4 * x.plane()];
        for yy in 0..x.height * 2 {
            let srow = &src[(yy / 2) * w..(yy / 2 + 1) * w];
            let drow = &mut dst[yy * w2..(yy + 1) * w2];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut dx = Tensor::zeros(dy.channels, dy.batch, h, w);
    for plane in 0..dy.channels * dy.batch {
        let src = &dy.data[plane * dy.plane()..(plane + 1) * dy.plane()];
        let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
        for yy in 0..dy.height {
            for xx in 0..dy.width {
                let d = &mut dst[(yy / 2) * w + xx / 2];
                *d = *d + src[yy * dy.width + xx];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    #[test]
    fn flush_guard_is_scoped() {
        let tiny = std::hint::black_box(f32::MIN_POSITIVE);
        assert!((tiny / 4.0).is_subnormal());
        {
            let _g = FlushDenormals::new();
            let v = std::hint::black_box(tiny) / std::hint::black_box(4.0f32);
            if cfg!(target_arch = "x86_64") {
                assert_eq!(v, 0.0);
            }
        }
        assert!((std::hint::black_box(tiny) / std::hint::black_box(4.0f32)).is_subnormal());
    }

    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, n: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(c, n, h, w);
        for v in &mut t.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(conv: &Conv, params: &[f64], x: &Tensor<f64>) -> Tensor<f64> {
        let (ho, wo) = conv.out_size(x.height, x.width);
        let mut y = Tensor::zeros(conv.cout, x.batch, ho, wo);
        let k = conv.kernel;
        for co in 0..conv.cout {
            for i in 0..x.batch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = params[conv.offset + conv.weight_len() + co];
                        for ci in 0..conv.cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                        continue;
                                    }
                                    let wv = params[conv.offset + ((co * conv.cin + ci) * k + ky) * k + kx];
                                    acc += wv * x.data[x.index(ci, i, iy as usize, ix as usize)];
                                }
                            }
                        }
                        let idx = y.index(co, i, oy, ox);
                        y.data[idx] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let conv = Conv::new(3, 4, k, s, 5);
            let params: Vec<f64> = (0..conv.param_len() + 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = random_tensor(&mut rng, 3, 2, 6, 8);
            let fast = conv.forward(&params, &x);
            let slow = naive_conv(&conv, &params, &x);
            assert!(fast.same_shape(&slow));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), dy> is bilinear in (params, x); check both gradients by
        // comparing against finite differences of that scalar.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let conv = Conv::new(2, 3, k, s, 0);
            let params: Vec<f64> = (0..conv.param_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = random_tensor(&mut rng, 2, 2, 6, 6);
            let y = conv.forward(&params, &x);
            let dy = random_tensor(&mut rng, y.channels, y.batch, y.height, y.width);
            let scalar = |p: &[f64], x: &Tensor<f64>| -> f64 {
                conv.forward(p, x).data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
            };
            let mut grads = vec![0.0; params.len()];
            let dx = conv.backward(&params, &mut grads, &x, &dy, true).unwrap();
            let h = 1e-6;
            for idx in [0, 3, params.len() - 1] {
                let mut p1 = params.clone();
                p1[idx] += h;
                let mut p0 = params.clone();
                p0[idx] -= h;
                let fd = (scalar(&p1, &x) - scalar(&p0, &x)) / (2.0 * h);
                assert!((fd - grads[idx]).abs() < 1e-6, "param {idx}: {fd} vs {}", grads[idx]);
            }
            for idx in [0, 7, x.data.len() - 1] {
                let mut x1 = x.clone();
                x1.data[idx] += h;
                let mut x0 = x.clone();
                x0.data[idx] -= h;
                let fd = (scalar(&params, &x1) - scalar(&params, &x0)) / (2.0 * h);
                assert!((fd - dx.data[idx]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn upsample_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 2, 2, 3, 4);
        let y = upsample2x(&x);
        assert_eq!((y.height, y.width), (6, 8));
        assert_eq!(y.data[y.index(1, 1, 5, 7)], x.data[x.index(1, 1, 2, 3)]);
        let dy = random_tensor(&mut rng, 2, 2, 6, 8);
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let dx = upsample2x_backward(&dy);
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gather_scatter_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, 2, 3, 2, 2);
        let idx = [2, 0, 2, 1];
        let g = x.gather(&idx);
        let dy = random_tensor(&mut rng, 2, 4, 2, 2);
        let lhs: f64 = g.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let back = dy.scatter_add(&idx, 3);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn hwc_round_trip_and_concat_split() {
        let img: Vec<f64> = (0..8 * 8 * 3).map(|i| i as f64 / 192.0).collect();
        let t: Tensor<f64> = Tensor::from_hwc_images([img.as_slice(), img.as_slice()], 8, 8);
        assert_eq!(t.sample_to_hwc(1), img);
        let both = t.concat(&t);
        let (a, b) = both.split(3);
        assert_eq!(a, t);
        assert_eq!(b, t);
    }
}
