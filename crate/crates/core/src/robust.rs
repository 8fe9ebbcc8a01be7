//! Corruptions applied to containers.
//!
//! During training the corruption sits between container and decoder, so each
//! differentiable variant exposes a backward pass (the adjoint of its linear
//! part; rounding is treated as identity). Evaluation uses the exact channel,
//! e.g. an actual JPEG encode/decode.

use std::f64::consts::PI;
use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{quantize_value, ImageArray, CHANNELS};

pub const BLUR_KERNEL_SIZES: [usize; 4] = [3, 5, 7, 9];
pub const JPEG_QUALITIES: [u8; 5] = [10, 30, 50, 70, 90];
pub const JPEG_QUALITY_MIN: u8 = 10;

/// One sampled corruption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorruptionSpec {
    Identity,
    GaussianBlur { kernel_size: usize },
    JpegDiff { quality: u8 },
    Quantize,
}

/// σ used for a blur kernel of size `k` when none is given.
pub fn default_sigma(kernel_size: usize) -> f64 {
    0.3 * ((kernel_size as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

fn check_kernel(kernel_size: usize) -> Result<()> {
    if kernel_size % 2 == 0 {
        return Err(Error::Config(format!(
            "blur kernel size must be odd, got {kernel_size}"
        )));
    }
    Ok(())
}

fn check_quality(quality: u8) -> Result<()> {
    if !(JPEG_QUALITY_MIN..=100).contains(&quality) {
        return Err(Error::Config(format!(
            "jpeg quality must lie in [{JPEG_QUALITY_MIN}, 100], got {quality}"
        )));
    }
    Ok(())
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CorruptionSpec::GaussianBlur { kernel_size } => {
                check_kernel(kernel_size)?;
                if kernel_size < 3 {
                    return Err(Error::Config("blur kernel size must be at least 3".into()));
                }
                Ok(())
            }
            CorruptionSpec::JpegDiff { quality } => check_quality(quality),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            CorruptionSpec::Identity => "identity".into(),
            CorruptionSpec::GaussianBlur { kernel_size } => format!("blur{kernel_size}"),
            CorruptionSpec::JpegDiff { quality } => format!("jpeg{quality}"),
            CorruptionSpec::Quantize => "quantize".into(),
        }
    }

    /// Differentiable forward on an interleaved `h × w × 3` buffer.
    pub fn forward(&self, data: &[f64], h: usize, w: usize) -> Vec<f64> {
        match *self {
            CorruptionSpec::Identity => data.to_vec(),
            CorruptionSpec::GaussianBlur { kernel_size } => {
                blur_hwc(data, h, w, &gaussian_kernel_1d(kernel_size, default_sigma(kernel_size)))
            }
            CorruptionSpec::JpegDiff { quality } => jpeg_surrogate(data, h, w, quality, true),
            CorruptionSpec::Quantize => data.iter().map(|&v| quantize_value(v)).collect(),
        }
    }

    /// Gradient w.r.t. the input given the gradient w.r.t. the output.
    /// `input` is the forward input (needed for the JPEG clamp mask).
    pub fn backward(&self, input: &[f64], grad: &[f64], h: usize, w: usize) -> Vec<f64> {
        match *self {
            CorruptionSpec::Identity | CorruptionSpec::Quantize => grad.to_vec(),
            CorruptionSpec::GaussianBlur { kernel_size } => blur_hwc_adjoint(
                grad,
                h,
                w,
                &gaussian_kernel_1d(kernel_size, default_sigma(kernel_size)),
            ),
            CorruptionSpec::JpegDiff { quality } => jpeg_surrogate_backward(input, grad, h, w, quality),
        }
    }

    /// The non-differentiable channel used at evaluation time.
    pub fn apply_real(&self, img: &ImageArray) -> Result<ImageArray> {
        match *self {
            CorruptionSpec::Identity => Ok(img.clone()),
            CorruptionSpec::GaussianBlur { kernel_size } => {
                gaussian_blur(img, kernel_size, default_sigma(kernel_size))
            }
            CorruptionSpec::JpegDiff { quality } => jpeg_real(img, quality),
            CorruptionSpec::Quantize => Ok(img.quantize()),
        }
    }
}

// ---------------------------------------------------------------------------
// Gaussian blur
// ---------------------------------------------------------------------------

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_kernel_1d(kernel_size: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel_size / 2) as f64;
    let taps: Vec<f64> = (0..kernel_size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Mirror index without repeating the edge sample (`-1 → 1`, `n → n-2`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn blur_pass(src: &[f64], h: usize, w: usize, taps: &[f64], horizontal: bool, adjoint: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut dst = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for (t, &g) in taps.iter().enumerate() {
                let off = t as isize - r;
                let (sy, sx) = if horizontal {
                    (y, reflect(x as isize + off, w))
                } else {
                    (reflect(y as isize + off, h), x)
                };
                let (i_out, i_in) = ((y * w + x) * CHANNELS, (sy * w + sx) * CHANNELS);
                for c in 0..CHANNELS {
                    if adjoint {
                        dst[i_in + c] += g * src[i_out + c];
                    } else {
                        dst[i_out + c] += g * src[i_in + c];
                    }
                }
            }
        }
    }
    dst
}

pub(crate) fn blur_hwc(data: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    if taps.len() == 1 {
        return data.to_vec();
    }
    let tmp = blur_pass(data, h, w, taps, true, false);
    blur_pass(&tmp, h, w, taps, false, false)
}

pub(crate) fn blur_hwc_adjoint(grad: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    if taps.len() == 1 {
        return grad.to_vec();
    }
    let tmp = blur_pass(grad, h, w, taps, false, true);
    blur_pass(&tmp, h, w, taps, true, true)
}

/// Depthwise Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &ImageArray, kernel_size: usize, sigma: f64) -> Result<ImageArray> {
    check_kernel(kernel_size)?;
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("blur sigma must be positive, got {sigma}")));
    }
    let (h, w) = img.shape();
    if kernel_size / 2 >= h.min(w) {
        return Err(Error::Config(format!(
            "blur kernel {kernel_size} too large for {h}x{w} image"
        )));
    }
    let taps = gaussian_kernel_1d(kernel_size, sigma);
    ImageArray::from_clamped(h, w, blur_hwc(img.as_slice(), h, w, &taps))
}

// ---------------------------------------------------------------------------
// JPEG
// ---------------------------------------------------------------------------

#[rustfmt::skip]
const LUMA_QTABLE: [u16; 64] = [
    16, 11, 10, 16,  24,  40,  51,  61,
    12, 12, 14, 19,  26,  58,  60,  55,
    14, 13, 16, 24,  40,  57,  69,  56,
    14, 17, 22, 29,  51,  87,  80,  62,
    18, 22, 37, 56,  68, 109, 103,  77,
    24, 35, 55, 64,  81, 104, 113,  92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103,  99,
];

#[rustfmt::skip]
const CHROMA_QTABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Quality-scaled table (`q < 50: 5000/q`, else `200 - 2q`, percent, floor 1).
pub fn scaled_qtable(base: &[u16; 64], quality: u8) -> [f64; 64] {
    let q = u32::from(quality.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    base.map(|v| ((u32::from(v) * scale + 50) / 100).clamp(1, 255) as f64)
}

pub fn luma_table(quality: u8) -> [f64; 64] {
    scaled_qtable(&LUMA_QTABLE, quality)
}

pub fn chroma_table(quality: u8) -> [f64; 64] {
    scaled_qtable(&CHROMA_QTABLE, quality)
}

/// Orthonormal 8-point DCT-II basis, `basis[u][x]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
        }
    }
    b
}

/// 2-D DCT of an 8×8 block (`inverse` applies the transpose).
fn dct8x8(block: &[f64; 64], basis: &[[f64; 8]; 8], inverse: bool) -> [f64; 64] {
    let m = |a: usize, b: usize| if inverse { basis[b][a] } else { basis[a][b] };
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for x in 0..8 {
            let mut s = 0.0;
            for y in 0..8 {
                s += m(u, y) * block[y * 8 + x];
            }
            tmp[u * 8 + x] = s;
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            let mut s = 0.0;
            for x in 0..8 {
                s += m(v, x) * tmp[u * 8 + x];
            }
            out[u * 8 + v] = s;
        }
    }
    out
}

const RGB_TO_YCC: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_736, -0.331_264, 0.5],
    [0.5, -0.418_688, -0.081_312],
];

const YCC_TO_RGB: [[f64; 3]; 3] = [
    [1.0, 0.0, 1.402],
    [1.0, -0.344_136, -0.714_136],
    [1.0, 1.772, 0.0],
];

fn padded_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(8) * 8, w.div_ceil(8) * 8)
}

/// Level-shifted YCbCr planes (0–255 scale minus 128), reflect-padded to
/// multiples of 8.
fn to_ycc_planes(data: &[f64], h: usize, w: usize) -> (usize, usize, [Vec<f64>; 3]) {
    let (ph, pw) = padded_dims(h, w);
    let mut planes = [vec![0.0; ph * pw], vec![0.0; ph * pw], vec![0.0; ph * pw]];
    for y in 0..ph {
        for x in 0..pw {
            let s = (reflect(y as isize, h) * w + reflect(x as isize, w)) * CHANNELS;
            let rgb = [data[s] * 255.0, data[s + 1] * 255.0, data[s + 2] * 255.0];
            for (c, plane) in planes.iter_mut().enumerate() {
                let m = RGB_TO_YCC[c];
                let v = m[0] * rgb[0] + m[1] * rgb[1] + m[2] * rgb[2];
                // Chroma carries a +128 offset that the level shift cancels.
                plane[y * pw + x] = if c == 0 { v - 128.0 } else { v };
            }
        }
    }
    (ph, pw, planes)
}

fn blocks_apply(plane: &mut [f64], pw: usize, ph: usize, mut f: impl FnMut(&mut [f64; 64])) {
    for by in (0..ph).step_by(8) {
        for bx in (0..pw).step_by(8) {
            let mut block = [0.0; 64];
            for y in 0..8 {
                block[y * 8..y * 8 + 8].copy_from_slice(&plane[(by + y) * pw + bx..(by + y) * pw + bx + 8]);
            }
            f(&mut block);
            for y in 0..8 {
                plane[(by + y) * pw + bx..(by + y) * pw + bx + 8].copy_from_slice(&block[y * 8..y * 8 + 8]);
            }
        }
    }
}

/// JPEG-like compression with full-precision arithmetic, before the final
/// clamp. When `round` is false the quantizer is replaced by identity, giving
/// the smooth surrogate whose derivative the pass-through gradient equals.
fn jpeg_unclamped(data: &[f64], h: usize, w: usize, quality: u8, round: bool) -> Vec<f64> {
    let basis = dct_basis();
    let tables = [luma_table(quality), chroma_table(quality), chroma_table(quality)];
    let (ph, pw, mut planes) = to_ycc_planes(data, h, w);
    for (plane, table) in planes.iter_mut().zip(&tables) {
        blocks_apply(plane, pw, ph, |block| {
            let mut coef = dct8x8(block, &basis, false);
            for (c, q) in coef.iter_mut().zip(table) {
                let scaled = *c / q;
                *c = if round { scaled.round() } else { scaled } * q;
            }
            *block = dct8x8(&coef, &basis, true);
        });
    }
    let mut out = vec![0.0; h * w * CHANNELS];
    for y in 0..h {
        for x in 0..w {
            let ycc = [
                planes[0][y * pw + x] + 128.0,
                planes[1][y * pw + x],
                planes[2][y * pw + x],
            ];
            for c in 0..CHANNELS {
                let m = YCC_TO_RGB[c];
                out[(y * w + x) * CHANNELS + c] = (m[0] * ycc[0] + m[1] * ycc[1] + m[2] * ycc[2]) / 255.0;
            }
        }
    }
    out
}

/// Clamped JPEG approximation on an interleaved buffer; see [`jpeg_unclamped`].
pub fn jpeg_surrogate(data: &[f64], h: usize, w: usize, quality: u8, round: bool) -> Vec<f64> {
    let mut out = jpeg_unclamped(data, h, w, quality, round);
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Adjoint of the surrogate's linear chain (pad → color → DCT → scale →
/// inverse), masked by the output clamp of the rounded forward pass.
fn jpeg_surrogate_backward(input: &[f64], grad: &[f64], h: usize, w: usize, quality: u8) -> Vec<f64> {
    let forward_pre_clamp = jpeg_unclamped(input, h, w, quality, true);
    let basis = dct_basis();
    let (ph, pw) = padded_dims(h, w);

    // Through the clamp and YCbCr→RGB (transpose of the color matrix).
    let mut planes = [vec![0.0; ph * pw], vec![0.0; ph * pw], vec![0.0; ph * pw]];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * CHANNELS;
            for c in 0..CHANNELS {
                let v = forward_pre_clamp[base + c];
                if !(0.0..=1.0).contains(&v) {
                    continue;
                }
                let g = grad[base + c] / 255.0;
                for (k, plane) in planes.iter_mut().enumerate() {
                    plane[y * pw + x] += YCC_TO_RGB[c][k] * g;
                }
            }
        }
    }
    // Through IDCT and DCT; the divide/round/multiply step is identity under
    // pass-through. The adjoint of the inverse DCT is the forward DCT.
    for plane in planes.iter_mut() {
        blocks_apply(plane, pw, ph, |block| {
            let coef = dct8x8(block, &basis, false);
            *block = dct8x8(&coef, &basis, true);
        });
    }
    // Through RGB→YCbCr and the reflect padding.
    let mut out = vec![0.0; h * w * CHANNELS];
    for y in 0..ph {
        for x in 0..pw {
            let s = (reflect(y as isize, h) * w + reflect(x as isize, w)) * CHANNELS;
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (k, plane) in planes.iter().enumerate() {
                    acc += RGB_TO_YCC[k][c] * plane[y * pw + x];
                }
                out[s + c] += acc * 255.0;
            }
        }
    }
    out
}

/// Differentiable JPEG approximation (4:4:4, standard tables).
pub fn jpeg_diff(img: &ImageArray, quality: u8) -> Result<ImageArray> {
    check_quality(quality)?;
    let (h, w) = img.shape();
    ImageArray::from_clamped(h, w, jpeg_surrogate(img.as_slice(), h, w, quality, true))
}

/// Pass-through gradient of `jpeg_diff` for upstream gradient `grad`.
pub fn jpeg_diff_backward(img: &ImageArray, grad: &[f64], quality: u8) -> Result<Vec<f64>> {
    check_quality(quality)?;
    if grad.len() != img.len() {
        return Err(Error::Shape("gradient length differs from image".into()));
    }
    let (h, w) = img.shape();
    Ok(jpeg_surrogate_backward(img.as_slice(), grad, h, w, quality))
}

/// Encodes to real JPEG bytes at `quality` and decodes them back.
pub fn jpeg_real(img: &ImageArray, quality: u8) -> Result<ImageArray> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Config(format!(
            "jpeg quality must lie in [1, 100], got {quality}"
        )));
    }
    let mut bytes = Vec::new();
    JpegEncoder::new_with_quality(&mut bytes, quality)
        .encode_image(&img.to_rgb8())
        .map_err(|e| Error::Format(format!("jpeg encode: {e}")))?;
    let decoded = image::load(Cursor::new(bytes), image::ImageFormat::Jpeg)
        .map_err(|e| Error::Format(format!("jpeg decode: {e}")))?;
    let out = ImageArray::from_rgb8(&decoded.to_rgb8())?;
    img.ensure_same_shape(&out)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Mixture of corruptions the training loop draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionMenu {
    pub identity: f64,
    pub blur: f64,
    pub jpeg: f64,
    pub quantize: f64,
    /// Kernel sizes drawn uniformly when blur is selected.
    pub blur_kernel_sizes: Vec<usize>,
    /// Inclusive quality range drawn uniformly when JPEG is selected.
    pub jpeg_quality: (u8, u8),
}

impl Default for CorruptionMenu {
    fn default() -> Self {
        Self {
            identity: 0.4,
            blur: 0.2,
            jpeg: 0.3,
            quantize: 0.1,
            blur_kernel_sizes: vec![3, 5],
            jpeg_quality: (30, 90),
        }
    }
}

impl CorruptionMenu {
    pub fn identity_only() -> Self {
        Self {
            identity: 1.0,
            blur: 0.0,
            jpeg: 0.0,
            quantize: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.identity, self.blur, self.jpeg, self.quantize];
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(format!("menu probabilities must be non-negative: {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("menu probabilities sum to {total}, expected 1")));
        }
        if self.blur > 0.0 {
            if self.blur_kernel_sizes.is_empty() {
                return Err(Error::Config("blur selected but no kernel sizes given".into()));
            }
            for &k in &self.blur_kernel_sizes {
                CorruptionSpec::GaussianBlur { kernel_size: k }.validate()?;
            }
        }
        if self.jpeg > 0.0 {
            let (lo, hi) = self.jpeg_quality;
            check_quality(lo)?;
            check_quality(hi)?;
            if lo > hi {
                return Err(Error::Config(format!("jpeg quality range {lo}..{hi} is empty")));
            }
        }
        Ok(())
    }

    /// Draws one corruption.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CorruptionSpec {
        let u: f64 = rng.gen();
        let mut acc = self.identity;
        if u < acc {
            return CorruptionSpec::Identity;
        }
        acc += self.blur;
        if u < acc {
            let k = self.blur_kernel_sizes[rng.gen_range(0..self.blur_kernel_sizes.len())];
            return CorruptionSpec::GaussianBlur { kernel_size: k };
        }
        acc += self.jpeg;
        if u < acc {
            let (lo, hi) = self.jpeg_quality;
            return CorruptionSpec::JpegDiff {
                quality: rng.gen_range(lo..=hi),
            };
        }
        if self.quantize > 0.0 {
            return CorruptionSpec::Quantize;
        }
        // Rounding slack at the top of the cumulative range.
        CorruptionSpec::Identity
    }
}

/// Validates the menu and draws one corruption from it.
pub fn sample_corruption<R: Rng + ?Sized>(menu: &CorruptionMenu, rng: &mut R) -> Result<CorruptionSpec> {
    menu.validate()?;
    Ok(menu.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn textured(h: usize, w: usize, seed: u64) -> ImageArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3)
            .map(|i| {
                let p = i / 3;
                let (y, x) = ((p / w) as f64, (p % w) as f64);
                (0.5 + 0.3 * (x / 5.0).sin() * (y / 7.0).cos() + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)
            })
            .collect();
        ImageArray::new(h, w, data).unwrap()
    }

    #[test]
    fn blur_preserves_constants_and_identity() {
        let img = ImageArray::filled(16, 16, 0.37).unwrap();
        for k in BLUR_KERNEL_SIZES {
            let out = gaussian_blur(&img, k, default_sigma(k)).unwrap();
            assert!(out.as_slice().iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
        let t = textured(16, 16, 1);
        assert_eq!(gaussian_blur(&t, 1, 1.0).unwrap(), t);
        assert!(matches!(gaussian_blur(&t, 4, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn blur_impulse_reproduces_kernel() {
        let mut data = vec![0.0; 9 * 9 * 3];
        for c in 0..3 {
            data[(4 * 9 + 4) * 3 + c] = 1.0;
        }
        let img = ImageArray::new(9, 9, data).unwrap();
        let out = gaussian_blur(&img, 3, 0.8).unwrap();
        // Closed-form 2-D Gaussian, normalized over the 3x3 support.
        let g = |d: f64| (-d / (2.0 * 0.64)).exp();
        let z: f64 = (-1..=1)
            .flat_map(|y| (-1..=1).map(move |x| g((x * x + y * y) as f64)))
            .sum();
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let want = g((dx * dx + dy * dy) as f64) / z;
                let got = out.get((4 + dy) as usize, (4 + dx) as usize, 1);
                assert!((want - got).abs() < 1e-12, "{dy},{dx}: {want} vs {got}");
            }
        }
        assert_eq!(out.get(4, 6, 0), 0.0);
    }

    #[test]
    fn default_sigma_mapping() {
        assert!((default_sigma(3) - 0.8).abs() < 1e-12);
        assert!((default_sigma(5) - 1.1).abs() < 1e-12);
        assert!((default_sigma(9) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn quality_tables_follow_scaling_law() {
        assert!(luma_table(100).iter().all(|&v| v == 1.0));
        assert_eq!(luma_table(50)[0], 16.0);
        // q=10: scale 500 → (16*500+50)/100 = 80
        assert_eq!(luma_table(10)[0], 80.0);
        // q=90: scale 20 → (16*20+50)/100 = 3
        assert_eq!(luma_table(90)[0], 3.0);
        assert_eq!(chroma_table(10)[63], 255.0);
    }

    #[test]
    fn dct_round_trip() {
        let basis = dct_basis();
        let block: [f64; 64] = std::array::from_fn(|i| (i as f64 * 0.37).sin() * 50.0);
        let back = dct8x8(&dct8x8(&block, &basis, false), &basis, true);
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn jpeg_diff_on_mid_gray_is_near_exact() {
        let img = ImageArray::filled(16, 16, 128.0 / 255.0).unwrap();
        for q in [10, 50, 90] {
            let out = jpeg_diff(&img, q).unwrap();
            for (a, b) in out.as_slice().iter().zip(img.as_slice()) {
                assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn jpeg_diff_handles_non_multiple_of_eight() {
        let img = textured(12, 20, 3);
        let out = jpeg_diff(&img, 50).unwrap();
        assert_eq!(out.shape(), (12, 20));
        assert!(matches!(jpeg_diff(&img, 5), Err(Error::Config(_))));
    }

    #[test]
    fn jpeg_real_keeps_dims_and_orders_by_quality() {
        let img = textured(24, 32, 4);
        let lo = jpeg_real(&img, 10).unwrap();
        let hi = jpeg_real(&img, 90).unwrap();
        assert_eq!(hi.shape(), img.shape());
        let mse = |a: &ImageArray| -> f64 {
            a.as_slice().iter().zip(img.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        };
        assert!(mse(&hi) <= mse(&lo));
    }

    #[test]
    fn menu_validation() {
        assert!(CorruptionMenu::default().validate().is_ok());
        let bad = CorruptionMenu {
            identity: 0.5,
            ..CorruptionMenu::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = CorruptionMenu {
            blur_kernel_sizes: vec![4],
            ..CorruptionMenu::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn identity_menu_and_reproducibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let menu = CorruptionMenu::identity_only();
        for _ in 0..100 {
            assert_eq!(sample_corruption(&menu, &mut rng).unwrap(), CorruptionSpec::Identity);
        }
        let menu = CorruptionMenu::default();
        let a: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            (0..50).map(|_| menu.sample(&mut r)).collect()
        };
        let b: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            (0..50).map(|_| menu.sample(&mut r)).collect()
        };
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.validate().is_ok()));
    }

    #[test]
    fn menu_frequencies_match() {
        // Binomial sd at p = 0.25, n = 10000 is ~0.0043; ±0.02 is > 4σ.
        let menu = CorruptionMenu {
            identity: 0.25,
            blur: 0.25,
            jpeg: 0.25,
            quantize: 0.25,
            ..CorruptionMenu::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let idx = match menu.sample(&mut rng) {
                CorruptionSpec::Identity => 0,
                CorruptionSpec::GaussianBlur { .. } => 1,
                CorruptionSpec::JpegDiff { .. } => 2,
                CorruptionSpec::Quantize => 3,
            };
            counts[idx] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{counts:?}");
        }
    }
}
