//! Image-quality metrics on `[0, 1]` images.
//!
//! PSNR uses a peak of 1.0, which is numerically identical to the usual
//! 255-peak formula on 8-bit data. APD (average pixel distance) is reported
//! on the 0–255 scale. SSIM follows the usual Gaussian-window formulation
//! (11×11, σ = 1.5, K1 = 0.01, K2 = 0.03) over the fully-contained windows,
//! averaged over channels.

use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::{ImageArray, CHANNELS, PIXEL_MAX};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn mse(a: &ImageArray, b: &ImageArray) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(1 / mse)`; identical images give `+∞`.
pub fn psnr(a: &ImageArray, b: &ImageArray) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Mean absolute difference on the 0–255 scale.
pub fn apd(a: &ImageArray, b: &ImageArray) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(sum / a.len() as f64 * PIXEL_MAX)
}

fn ssim_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().enumerate().map(|(t, g)| g * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(t, g)| g * tmp[(y + t) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

pub fn ssim(a: &ImageArray, b: &ImageArray) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = ssim_taps();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for c in 0..CHANNELS {
        let x: Vec<f64> = a.as_slice().iter().skip(c).step_by(CHANNELS).copied().collect();
        let y: Vec<f64> = b.as_slice().iter().skip(c).step_by(CHANNELS).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter_valid(&x, h, w, &taps);
        let (my, _, _) = filter_valid(&y, h, w, &taps);
        let (sxx, _, _) = filter_valid(&xx, h, w, &taps);
        let (syy, _, _) = filter_valid(&yy, h, w, &taps);
        let (sxy, _, _) = filter_valid(&xy, h, w, &taps);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / CHANNELS as f64)
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad dB value {t}"))),
    }
}

/// Formats dB values with the `inf` sentinel.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub apd: f64,
}

impl MetricReport {
    pub fn compute(reference: &ImageArray, candidate: &ImageArray) -> Result<Self> {
        let m = mse(reference, candidate)?;
        Ok(Self {
            mse: m,
            psnr: psnr_from_mse(m),
            ssim: ssim(reference, candidate)?,
            apd: apd(reference, candidate)?,
        })
    }

    /// Arithmetic means; PSNR is averaged in dB with infinite values left
    /// out (a warning is logged). All-infinite input averages to `+∞`.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Data("cannot average an empty set of metrics".into()));
        }
        let n = reports.len() as f64;
        let finite: Vec<f64> = reports.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect();
        if finite.len() < reports.len() {
            log::warn!(
                "{} of {} pairs have infinite PSNR; excluded from the mean",
                reports.len() - finite.len(),
                reports.len()
            );
        }
        let psnr = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        Ok(Self {
            mse: reports.iter().map(|r| r.mse).sum::<f64>() / n,
            psnr,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            apd: reports.iter().map(|r| r.apd).sum::<f64>() / n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub pair_id: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

/// Per-pair table plus its means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub rows: Vec<PairRow>,
    pub means: MetricReport,
}

impl PairEvaluation {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,mse,psnr_db,ssim,apd\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{},{:.8},{},{:.6},{:.4}",
                r.pair_id,
                m.mse,
                format_db(m.psnr),
                m.ssim,
                m.apd
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Scores every `(reference, candidate)` pair and averages.
pub fn evaluate_pairs(pairs: &[(String, &ImageArray, &ImageArray)]) -> Result<PairEvaluation> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    let rows = pairs
        .iter()
        .map(|(id, reference, candidate)| {
            Ok(PairRow {
                pair_id: id.clone(),
                metrics: MetricReport::compute(reference, candidate)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricReport> = rows.iter().map(|r| r.metrics).collect();
    Ok(PairEvaluation {
        means: MetricReport::mean(&reports)?,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> ImageArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageArray::new(h, w, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let a = ImageArray::filled(16, 16, 0.4).unwrap();
        let b = ImageArray::filled(16, 16, 0.5).unwrap();
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!(psnr(&a, &a).unwrap().is_infinite());
        assert_eq!(apd(&a, &a).unwrap(), 0.0);

        let c = ImageArray::filled(16, 16, 0.4 + 5.0 / 255.0).unwrap();
        assert!((psnr(&a, &c).unwrap() - 34.1514).abs() < 0.01);
        assert!((apd(&a, &c).unwrap() - 5.0).abs() < 1e-9);

        let black = ImageArray::filled(16, 16, 0.0).unwrap();
        let white = ImageArray::filled(16, 16, 1.0).unwrap();
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_and_small_ssim() {
        let a = ImageArray::filled(16, 16, 0.4).unwrap();
        let b = ImageArray::filled(16, 8, 0.4).unwrap();
        assert!(matches!(mse(&a, &b), Err(Error::Shape(_))));
        let s = ImageArray::filled(8, 8, 0.4).unwrap();
        assert!(matches!(ssim(&s, &s), Err(Error::Config(_))));
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = random(20, 24, 1);
        let b = random(20, 24, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_offset() {
        let a = ImageArray::filled(16, 16, 0.3).unwrap();
        let mut last = f64::INFINITY;
        for k in 1..20 {
            let b = ImageArray::filled(16, 16, 0.3 + k as f64 * 0.01).unwrap();
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn evaluate_pairs_means_and_rows() {
        let a = random(16, 16, 3);
        let single = evaluate_pairs(&[("0".into(), &a, &a)]).unwrap();
        assert_eq!(single.means.mse, 0.0);
        assert!(single.means.psnr.is_infinite());
        assert!((single.means.ssim - 1.0).abs() < 1e-9);
        assert_eq!(single.means.apd, 0.0);
        assert!(single.to_csv().contains(",inf,"));
        let parsed: PairEvaluation = serde_json::from_str(&single.to_json()).unwrap();
        assert!(parsed.means.psnr.is_infinite());

        // mse 1e-3 → 30 dB, mse 1e-4 → 40 dB
        let base = ImageArray::filled(16, 16, 0.5).unwrap();
        let d30 = ImageArray::filled(16, 16, 0.5 + 1e-3f64.sqrt()).unwrap();
        let d40 = ImageArray::filled(16, 16, 0.5 + 1e-2).unwrap();
        let ev = evaluate_pairs(&[
            ("a".into(), &base, &d30),
            ("b".into(), &base, &d40),
        ])
        .unwrap();
        assert!((ev.means.psnr - 35.0).abs() < 1e-9);
        assert_eq!(ev.rows.len(), 2);
        assert_eq!(ev.to_csv().lines().count(), 3);

        assert!(matches!(evaluate_pairs(&[]), Err(Error::Data(_))));
    }
}
