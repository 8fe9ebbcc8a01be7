//! The universal perturbation: one signed image-shaped signal shared by every
//! cover, bounded elementwise by `epsilon`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageArray, CHANNELS};
use crate::io;

pub const DELTA_FILE: &str = "delta.bin";
pub const META_FILE: &str = "meta.json";
pub const FORMAT_VERSION: u32 = 1;

/// The carrier `δ` with its bound. Values are kept as `f32`, the on-disk
/// precision, so checkpoints round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    height: usize,
    width: usize,
    epsilon: f64,
    seed: u64,
    delta: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationMeta {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub iteration: u64,
}

/// Largest `f32` not exceeding `epsilon`, so clamped values never overshoot
/// the bound when compared in `f64`.
fn bound_f32(epsilon: f64) -> f32 {
    let e = epsilon as f32;
    if f64::from(e) > epsilon {
        f32::from_bits(e.to_bits() - 1)
    } else {
        e
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Config(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    Ok(())
}

impl Perturbation {
    /// Uniform draw on `[-ε/10, ε/10]`, deterministic in `seed`.
    pub fn init(resolution: (usize, usize), epsilon: f64, seed: u64) -> Result<Self> {
        check_epsilon(epsilon)?;
        let (height, width) = resolution;
        let scale = epsilon / 10.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delta = (0..height * width * CHANNELS)
            .map(|_| rng.gen_range(-scale..=scale) as f32)
            .collect();
        let mut p = Self {
            height,
            width,
            epsilon,
            seed,
            delta,
        };
        p.project_linf();
        Ok(p)
    }

    /// Builds a perturbation from raw values, projecting them into the ball.
    pub fn from_values(
        resolution: (usize, usize),
        epsilon: f64,
        delta: Vec<f32>,
    ) -> Result<Self> {
        check_epsilon(epsilon)?;
        let (height, width) = resolution;
        if delta.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "delta has {} values, expected {}",
                delta.len(),
                height * width * CHANNELS
            )));
        }
        let mut p = Self {
            height,
            width,
            epsilon,
            seed: 0,
            delta,
        };
        p.project_linf();
        Ok(p)
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn values(&self) -> &[f32] {
        &self.delta
    }

    /// Mutable access for the optimizer. Callers must re-project afterwards.
    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.delta
    }

    pub fn linf_norm(&self) -> f64 {
        self.delta
            .iter()
            .fold(0.0f64, |m, &v| m.max(f64::from(v).abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.delta
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Elementwise clamp onto `[-ε, ε]`.
    pub fn project_linf(&mut self) {
        let e = bound_f32(self.epsilon);
        for v in &mut self.delta {
            *v = v.clamp(-e, e);
        }
    }

    pub fn projected(mut self) -> Self {
        self.project_linf();
        self
    }

    /// `clamp(cover + δ, 0, 1)`.
    pub fn make_container(&self, cover: &ImageArray) -> Result<ImageArray> {
        if cover.shape() != self.resolution() {
            return Err(Error::Shape(format!(
                "cover is {}x{}, perturbation is {}x{}",
                cover.height(),
                cover.width(),
                self.height,
                self.width
            )));
        }
        let data = cover
            .as_slice()
            .iter()
            .zip(&self.delta)
            .map(|(&c, &d)| c + f64::from(d))
            .collect();
        ImageArray::from_clamped(self.height, self.width, data)
    }

    pub fn meta(&self, iteration: u64) -> PerturbationMeta {
        PerturbationMeta {
            format_version: FORMAT_VERSION,
            height: self.height,
            width: self.width,
            channels: CHANNELS,
            epsilon: self.epsilon,
            seed: self.seed,
            iteration,
        }
    }

    pub fn save(&self, dir: &Path, iteration: u64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_f32_file(&dir.join(DELTA_FILE), &self.delta)?;
        io::write_json(&dir.join(META_FILE), &self.meta(iteration))
    }

    /// Loads a checkpoint, returning the perturbation and its recorded iteration.
    pub fn load(dir: &Path) -> Result<(Self, u64)> {
        let meta: PerturbationMeta = io::read_json(&dir.join(META_FILE))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported perturbation format version {}",
                meta.format_version
            )));
        }
        if meta.channels != CHANNELS {
            return Err(Error::Checkpoint(format!(
                "perturbation has {} channels, expected {CHANNELS}",
                meta.channels
            )));
        }
        check_epsilon(meta.epsilon).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let expected = meta.height * meta.width * meta.channels;
        let delta = io::read_f32_file(&dir.join(DELTA_FILE), expected)?;
        let e = f64::from(bound_f32(meta.epsilon));
        if delta.iter().any(|v| !v.is_finite() || f64::from(v.abs()) > e) {
            return Err(Error::Checkpoint(
                "delta values violate the recorded epsilon bound".into(),
            ));
        }
        Ok((
            Self {
                height: meta.height,
                width: meta.width,
                epsilon: meta.epsilon,
                seed: meta.seed,
                delta,
            },
            meta.iteration,
        ))
    }
}

/// Free-function aliases mirroring the operation names used by the CLI.
pub fn init_perturbation(resolution: (usize, usize), epsilon: f64, seed: u64) -> Result<Perturbation> {
    Perturbation::init(resolution, epsilon, seed)
}

pub fn project_linf(p: Perturbation) -> Perturbation {
    p.projected()
}

pub fn make_container(cover: &ImageArray, p: &Perturbation) -> Result<ImageArray> {
    p.make_container(cover)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EPS: f64 = 10.0 / 255.0;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = Perturbation::init((64, 64), EPS, 7).unwrap();
        let b = Perturbation::init((64, 64), EPS, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.linf_norm() <= EPS / 10.0 + 1e-9);
        assert_ne!(a, Perturbation::init((64, 64), EPS, 8).unwrap());
    }

    #[test]
    fn init_mean_within_three_sigma() {
        // Uniform on [-a, a] has variance a²/3; the mean of n draws has sd a/sqrt(3n).
        let p = Perturbation::init((64, 64), EPS, 11).unwrap();
        let n = p.values().len() as f64;
        let mean = p.values().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let a = EPS / 10.0;
        let sd = a / (3.0 * n).sqrt();
        assert!(mean.abs() <= 3.0 * sd, "mean {mean} sd {sd}");
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        assert!(matches!(
            Perturbation::init((8, 8), 0.0, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Perturbation::init((8, 8), -0.1, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn projection_clamps_to_bound() {
        let mut vals = vec![0.0f32; 192];
        vals[0] = 0.06;
        vals[1] = -0.06;
        vals[2] = 0.01;
        let p = Perturbation::from_values((8, 8), EPS, vals).unwrap();
        assert!((f64::from(p.values()[0]) - 0.039_215_686).abs() < 1e-7);
        assert!((f64::from(p.values()[1]) + 0.039_215_686).abs() < 1e-7);
        assert_eq!(p.values()[2], 0.01);
        assert!(p.linf_norm() <= EPS);
    }

    #[test]
    fn container_examples() {
        let p = Perturbation::from_values((8, 8), EPS, vec![0.02; 192]).unwrap();
        let cover = ImageArray::filled(8, 8, 0.5).unwrap();
        let c = p.make_container(&cover).unwrap();
        assert!(c.as_slice().iter().all(|&v| (v - 0.52).abs() < 1e-7));

        let p = Perturbation::from_values((8, 8), EPS, vec![0.039_216; 192]).unwrap();
        let cover = ImageArray::filled(8, 8, 0.99).unwrap();
        let c = p.make_container(&cover).unwrap();
        assert!(c.as_slice().iter().all(|&v| v == 1.0));

        let wrong = ImageArray::filled(16, 8, 0.5).unwrap();
        assert!(matches!(p.make_container(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let p = Perturbation::init((16, 16), EPS, 3).unwrap();
        p.save(dir.path(), 42).unwrap();
        let (q, iter) = Perturbation::load(dir.path()).unwrap();
        assert_eq!(iter, 42);
        assert_eq!(q, p);
        assert_eq!(q.epsilon(), EPS);

        let meta_path = dir.path().join(META_FILE);
        let text = fs::read_to_string(&meta_path).unwrap();
        fs::write(&meta_path, text.replace("\"height\": 16", "\"height\": 17")).unwrap();
        assert!(matches!(
            Perturbation::load(dir.path()),
            Err(Error::Checkpoint(_))
        ));

        fs::write(&meta_path, text.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
        assert!(matches!(
            Perturbation::load(dir.path()),
            Err(Error::Checkpoint(_))
        ));
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(vals in prop::collection::vec(-0.2f32..0.2, 192)) {
            let once = Perturbation::from_values((8, 8), EPS, vals).unwrap();
            let twice = once.clone().projected();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.linf_norm() <= EPS);
        }

        #[test]
        fn container_stays_within_epsilon(
            cover in prop::collection::vec(0.0f64..=1.0, 192),
            vals in prop::collection::vec(-0.1f32..0.1, 192),
        ) {
            let cover = ImageArray::new(8, 8, cover).unwrap();
            let p = Perturbation::from_values((8, 8), EPS, vals).unwrap();
            let c = p.make_container(&cover).unwrap();
            let mut abs_sum = 0.0;
            for (a, b) in c.as_slice().iter().zip(cover.as_slice()) {
                prop_assert!((a - b).abs() <= EPS + 1e-12);
                abs_sum += (a - b).abs();
            }
            prop_assert!(abs_sum / 192.0 * 255.0 <= 10.0 + 1e-9);
        }
    }
}
