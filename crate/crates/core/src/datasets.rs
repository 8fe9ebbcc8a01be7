//! Small deterministic image sets: random crops of natural photos for covers
//! and flat-colored synthetic logos for secrets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageArray;

/// Saturated colors used for logos and solid keys.
pub const PALETTE: [[u8; 3]; 8] = [
    [255, 255, 255],
    [0, 0, 0],
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [0, 255, 255],
    [255, 0, 255],
];

/// Distinct solid key colors, red and green first.
pub const KEY_COLORS: [[u8; 3]; 6] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [0, 255, 255],
    [255, 0, 255],
];

fn crop(img: &ImageArray, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageArray> {
    let mut data = Vec::with_capacity(h * w * 3);
    let row = img.width() * 3;
    for y in y0..y0 + h {
        let start = y * row + x0 * 3;
        data.extend_from_slice(&img.as_slice()[start..start + w * 3]);
    }
    ImageArray::new(h, w, data)
}

/// `count` square crops of random size and position, randomly mirrored,
/// resized to `resolution` and quantized to 8 bits.
pub fn random_crops(
    sources: &[ImageArray],
    count: usize,
    resolution: (usize, usize),
    seed: u64,
) -> Result<Vec<ImageArray>> {
    if sources.is_empty() {
        return Err(Error::Data("no source images to crop from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let src = &sources[rng.gen_range(0..sources.len())];
        let side = src.height().min(src.width());
        let size = rng.gen_range((side / 4).max(8)..=side);
        let y0 = rng.gen_range(0..=src.height() - size);
        let x0 = rng.gen_range(0..=src.width() - size);
        let mut c = crop(src, y0, x0, size, size)?.resize(resolution.0, resolution.1)?;
        if rng.gen_bool(0.5) {
            let (h, w) = c.shape();
            let mut data = c.into_vec();
            for y in 0..h {
                for x in 0..w / 2 {
                    for ch in 0..3 {
                        data.swap((y * w + x) * 3 + ch, (y * w + w - 1 - x) * 3 + ch);
                    }
                }
            }
            c = ImageArray::new(h, w, data)?;
        }
        out.push(c.quantize());
    }
    Ok(out)
}

/// A flat-colored logo: a palette background with a few filled discs, rings
/// and bars in other palette colors. Every pixel is 0 or 1 per channel.
pub fn logo(resolution: (usize, usize), seed: u64) -> ImageArray {
    let (h, w) = resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = rng.gen_range(0..PALETTE.len());
    let mut px = vec![PALETTE[bg]; h * w];
    let shapes = rng.gen_range(3..=5);
    let scale = h.min(w) as f64;
    for _ in 0..shapes {
        let mut color = rng.gen_range(0..PALETTE.len());
        if color == bg {
            color = (color + 1) % PALETTE.len();
        }
        let cy = rng.gen_range(0.15..0.85) * h as f64;
        let cx = rng.gen_range(0.15..0.85) * w as f64;
        let r = rng.gen_range(0.12..0.3) * scale;
        let kind = rng.gen_range(0..3);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (sin, cos) = angle.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let inside = match kind {
                    0 => dy * dy + dx * dx <= r * r,
                    1 => {
                        let d = (dy * dy + dx * dx).sqrt();
                        d <= r && d >= 0.6 * r
                    }
                    _ => {
                        let u = dx * cos + dy * sin;
                        let v = -dx * sin + dy * cos;
                        u.abs() <= 1.3 * r && v.abs() <= 0.3 * r
                    }
                };
                if inside {
                    px[y * w + x] = PALETTE[color];
                }
            }
        }
    }
    let data = px
        .into_iter()
        .flat_map(|p| p.map(|v| f64::from(v) / 255.0))
        .collect();
    ImageArray::new(h, w, data).expect("palette values lie in [0, 1]")
}
