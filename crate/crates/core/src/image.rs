//! Canonical image representation.
//!
//! Pixels are stored as `f64` in `[0, 1]`, interleaved RGB, row-major
//! (`H × W × 3`). Everything that crosses a file boundary goes through 8-bit
//! PNG with round-half-away-from-zero quantization.

use std::path::Path;

use image::imageops::FilterType;
use image::{ImageReader, RgbImage};

use crate::error::{Error, Result};

/// Display scale used when metrics are expressed on the 8-bit range.
pub const PIXEL_MAX: f64 = 255.0;

/// Number of color channels; the pipeline is RGB only.
pub const CHANNELS: usize = 3;

/// Smallest admissible side length.
pub const MIN_SIDE: usize = 8;

/// An `H × W × 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageArray {
    /// Wraps `data` (row-major, interleaved RGB). Fails if the shape is
    /// inconsistent, too small, or any value falls outside `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Shape(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Clamps every value into `[0, 1]` before wrapping. NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    /// Every pixel set to the same RGB triple.
    pub fn solid(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub fn ensure_same_shape(&self, other: &ImageArray) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Nearest-byte version of the image, the values a PNG round-trip yields.
    pub fn quantize(&self) -> ImageArray {
        ImageArray {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize_value(v)).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| to_byte(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| f64::from(b) / PIXEL_MAX).collect();
        Self::new(h as usize, w as usize, data)
    }

    /// Bilinear resize, result clamped to `[0, 1]`.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == self.shape() {
            return Ok(self.clone());
        }
        let rgb32 = image::Rgb32FImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("buffer length matches dimensions");
        let resized =
            image::imageops::resize(&rgb32, width as u32, height as u32, FilterType::Triangle);
        Self::from_clamped(
            height,
            width,
            resized.into_raw().into_iter().map(f64::from).collect(),
        )
    }
}

/// `round(v · 255)` with halves rounded away from zero, saturating to a byte.
#[inline]
pub fn to_byte(v: f64) -> u8 {
    (v * PIXEL_MAX).round().clamp(0.0, PIXEL_MAX) as u8
}

#[inline]
pub fn quantize_value(v: f64) -> f64 {
    f64::from(to_byte(v)) / PIXEL_MAX
}

/// Free-function form of [`ImageArray::quantize`].
pub fn quantize(img: &ImageArray) -> ImageArray {
    img.quantize()
}

/// Reads an 8-bit raster as RGB, optionally resizing to `target` (`H × W`).
pub fn load_image(path: &Path, target: Option<(usize, usize)>) -> Result<ImageArray> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    if decoded.color().channel_count() == 2 || decoded.color().has_alpha() {
        log::debug!("{}: dropping alpha channel", path.display());
    }
    let img = ImageArray::from_rgb8(&decoded.to_rgb8())?;
    match target {
        Some((h, w)) => img.resize(h, w),
        None => Ok(img),
    }
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(img: &ImageArray, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.to_rgb8()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other}", path.display())),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_rule_on_halves_and_ends() {
        assert_eq!(to_byte(0.5), 128);
        assert_eq!(to_byte(0.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(quantize_value(0.5), 128.0 / 255.0);
    }

    #[test]
    fn rejects_out_of_range_and_small() {
        assert!(matches!(
            ImageArray::new(8, 8, vec![1.5; 192]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            ImageArray::new(4, 8, vec![0.0; 96]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            ImageArray::new(8, 8, vec![0.0; 10]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn png_round_trip_of_quantized_image_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let data: Vec<f64> = (0..16 * 16 * 3).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = ImageArray::new(16, 16, data).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path, None).unwrap();
        assert_eq!(back, img.quantize());

        let path2 = dir.path().join("b.png");
        save_image(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn gray_128_written_by_reference_writer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        RgbImage::from_pixel(16, 16, image::Rgb([128, 128, 128]))
            .save(&path)
            .unwrap();
        let img = load_image(&path, None).unwrap();
        assert!(img.as_slice().iter().all(|&v| (v - 0.501_960_784).abs() < 1e-8));
    }

    #[test]
    fn half_writes_byte_128() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.png");
        save_image(&ImageArray::filled(8, 8, 0.5).unwrap(), &path).unwrap();
        let raw = image::open(&path).unwrap().to_rgb8();
        assert!(raw.as_raw().iter().all(|&b| b == 128));
    }

    #[test]
    fn resize_keeps_range() {
        let data: Vec<f64> = (0..32 * 32 * 3).map(|i| ((i * 7) % 2) as f64).collect();
        let img = ImageArray::new(32, 32, data).unwrap();
        let r = img.resize(16, 24).unwrap();
        assert_eq!(r.shape(), (16, 24));
        assert!(r.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn missing_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(&dir.path().join("none.png"), None),
            Err(Error::Io { .. })
        ));
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(matches!(load_image(&bad, None), Err(Error::Format(_))));
    }

    proptest::proptest! {
        #[test]
        fn quantize_is_idempotent_and_close(v in proptest::collection::vec(0.0f64..=1.0, 192)) {
            let img = ImageArray::new(8, 8, v).unwrap();
            let q = img.quantize();
            proptest::prop_assert_eq!(q.quantize(), q.clone());
            for (a, b) in img.as_slice().iter().zip(q.as_slice()) {
                proptest::prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
            }
        }
    }
}
