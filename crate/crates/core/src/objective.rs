//! Losses and the joint objective `L_enc + L_dec + λ·L_supp`.
//!
//! Every loss is a mean squared error averaged over batch, pixels and
//! channels, so `λ` does not depend on resolution or batch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageArray;
use crate::nn::Scalar;

/// Which parameters receive which loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientRouting {
    /// `δ` follows the full objective; `θ` follows `L_dec + λ·L_supp`.
    #[default]
    Joint,
    /// `δ` follows `L_enc` only; `θ` follows `L_dec + λ·L_supp`.
    LiteralAlg1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_enc: f64,
    pub l_dec: f64,
    pub l_supp: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn new(l_enc: f64, l_dec: f64, l_supp: f64, lambda: f64) -> Result<Self> {
        Ok(Self {
            l_enc,
            l_dec,
            l_supp,
            total: total_objective(l_enc, l_dec, l_supp, lambda)?,
            lambda,
        })
    }
}

/// Mean squared difference of two equally long buffers.
pub fn mse_slices<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} elements", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// `∂/∂a` of [`mse_slices`], scaled by `weight`.
pub fn mse_grad_slices<T: Scalar>(a: &[T], b: &[T], weight: f64) -> Vec<T> {
    let k = 2.0 * weight / a.len() as f64;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| T::from_f64(k * (x.as_f64() - y.as_f64())))
        .collect()
}

fn batch_mse(a: &[ImageArray], b: &[ImageArray]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "batches of {} and {} images",
            a.len(),
            b.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b) {
        x.ensure_same_shape(y)?;
        sum += x
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>();
        count += x.len();
    }
    Ok(sum / count as f64)
}

/// Encoding cost of the containers relative to their covers.
pub fn loss_enc(containers: &[ImageArray], covers: &[ImageArray]) -> Result<f64> {
    batch_mse(containers, covers)
}

/// Reconstruction error of legally decoded secrets.
pub fn loss_dec(decoded: &[ImageArray], secrets: &[ImageArray]) -> Result<f64> {
    batch_mse(decoded, secrets)
}

/// Distance of illegal-key decodes from their nonsense targets.
pub fn loss_supp(decoded_illegal: &[ImageArray], nonsense: &[ImageArray]) -> Result<f64> {
    batch_mse(decoded_illegal, nonsense)
}

pub fn total_objective(l_enc: f64, l_dec: f64, l_supp: f64, lambda: f64) -> Result<f64> {
    for (name, v) in [("l_enc", l_enc), ("l_dec", l_dec), ("l_supp", l_supp), ("lambda", lambda)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Numeric(format!("{name} must be finite and non-negative, got {v}")));
        }
    }
    Ok(l_enc + l_dec + lambda * l_supp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(n: usize, seed: u64) -> Vec<ImageArray> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| ImageArray::new(8, 8, (0..192).map(|_| rng.gen()).collect()).unwrap())
            .collect()
    }

    fn brute_force(a: &[ImageArray], b: &[ImageArray]) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for (x, y) in a.iter().zip(b) {
            for i in 0..x.len() {
                let d = x.as_slice()[i] - y.as_slice()[i];
                s += d * d;
                n += 1.0;
            }
        }
        s / n
    }

    #[test]
    fn loss_examples() {
        let cover = vec![ImageArray::filled(8, 8, 0.5).unwrap()];
        assert_eq!(loss_enc(&cover, &cover).unwrap(), 0.0);
        let shifted = vec![ImageArray::filled(8, 8, 0.52).unwrap()];
        assert!((loss_enc(&shifted, &cover).unwrap() - 4.0e-4).abs() < 1e-12);

        let secret = vec![ImageArray::new(8, 8, (0..192).map(|i| (i % 2) as f64).collect()).unwrap()];
        let inverted = vec![ImageArray::new(8, 8, (0..192).map(|i| 1.0 - (i % 2) as f64).collect()).unwrap()];
        assert_eq!(loss_dec(&inverted, &secret).unwrap(), 1.0);

        let a = vec![ImageArray::filled(8, 8, 0.2).unwrap()];
        let b = vec![ImageArray::filled(8, 8, 0.3).unwrap()];
        assert!((loss_supp(&a, &b).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(loss_supp(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn losses_match_brute_force_and_are_symmetric() {
        let a = random_batch(3, 1);
        let b = random_batch(3, 2);
        let oracle = brute_force(&a, &b);
        for f in [loss_enc, loss_dec, loss_supp] {
            assert!((f(&a, &b).unwrap() - oracle).abs() < 1e-9);
            assert_eq!(f(&a, &b).unwrap(), f(&b, &a).unwrap());
        }
        assert!(matches!(loss_enc(&a, &b[..2]), Err(Error::Shape(_))));
    }

    #[test]
    fn objective_arithmetic() {
        assert!((total_objective(0.1, 0.2, 0.4, 0.05).unwrap() - 0.32).abs() < 1e-12);
        assert_eq!(total_objective(0.1, 0.2, 0.4, 0.0).unwrap(), 0.1 + 0.2);
        assert_eq!(total_objective(0.0, 0.0, 0.0, 0.05).unwrap(), 0.0);
        assert!(matches!(total_objective(-0.1, 0.0, 0.0, 0.05), Err(Error::Numeric(_))));
        let r = LossReport::new(0.1, 0.2, 0.4, 0.05).unwrap();
        assert!((r.total - (r.l_enc + r.l_dec + r.lambda * r.l_supp)).abs() <= 1e-9 * r.total);
    }

    #[test]
    fn mse_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..192).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..192).map(|_| rng.gen()).collect();
        let g = mse_grad_slices(&a, &b, 1.0);
        let h = 1e-4;
        for i in [0, 17, 100, 191] {
            let mut p = a.clone();
            p[i] += h;
            let mut m = a.clone();
            m[i] -= h;
            let fd = (mse_slices(&p, &b).unwrap() - mse_slices(&m, &b).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-3 * fd.abs().max(1e-12));
        }
    }
}
