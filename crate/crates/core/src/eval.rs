//! Evaluation of a trained carrier/decoder pair over a set of covers,
//! optionally under a sweep of real corruptions.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::carrier::Perturbation;
use crate::decoder::{DecoderParams, KeyImage};
use crate::error::{Error, Result};
use crate::image::ImageArray;
use crate::metrics::{format_db, MetricReport};
use crate::robust::CorruptionSpec;
use crate::trainer::{spawn_illegal_pair, SecretBook};

pub const ILLEGAL_LABEL: &str = "illegal";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "points")]
pub enum Sweep {
    None,
    Blur(Vec<usize>),
    Jpeg(Vec<u8>),
}

impl Sweep {
    /// Corruptions applied to each container; the clean container comes first.
    pub fn corruptions(&self) -> Vec<CorruptionSpec> {
        let mut v = vec![CorruptionSpec::Identity];
        match self {
            Sweep::None => {}
            Sweep::Blur(ks) => v.extend(ks.iter().map(|&k| CorruptionSpec::GaussianBlur { kernel_size: k })),
            Sweep::Jpeg(qs) => v.extend(qs.iter().map(|&q| CorruptionSpec::JpegDiff { quality: q })),
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub sweep: Sweep,
    pub illegal_key_seed: u64,
    pub min_key_distance: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            sweep: Sweep::None,
            illegal_key_seed: 7,
            min_key_distance: 0.15,
        }
    }
}

/// One (cover, corruption, key) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub cover_id: String,
    pub corruption: String,
    pub key: String,
    pub legal: bool,
    /// Cover vs. quantized container.
    pub container: MetricReport,
    /// Decoded image vs. its secret; for the illegal key, vs. the legal
    /// secret it resembles most (highest PSNR).
    pub secret: MetricReport,
}

/// Means over covers for one (corruption, key) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub corruption: String,
    pub key: String,
    pub container: MetricReport,
    pub secret: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Per key, then one `legal_mean` row per corruption averaging all legal keys.
    pub summary: Vec<SummaryRow>,
}

pub const LEGAL_MEAN_LABEL: &str = "legal_mean";

impl EvalReport {
    pub fn summary_for(&self, corruption: &str, key: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.corruption == corruption && r.key == key)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "cover_id,corruption,key,legal,c_mse,c_psnr_db,c_ssim,c_apd,m_mse,m_psnr_db,m_ssim,m_apd\n",
        );
        for r in &self.rows {
            let (c, m) = (&r.container, &r.secret);
            writeln!(
                s,
                "{},{},{},{},{:.8},{},{:.6},{:.6},{:.8},{},{:.6},{:.6}",
                r.cover_id,
                r.corruption,
                r.key,
                r.legal,
                c.mse,
                format_db(c.psnr),
                c.ssim,
                c.apd,
                m.mse,
                format_db(m.psnr),
                m.ssim,
                m.apd
            )
            .expect("writing to a string");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Builds containers for every cover, corrupts them across the sweep, and
/// decodes with every legal key plus one seeded illegal key.
pub fn evaluate(
    perturbation: &Perturbation,
    decoder: &DecoderParams<f32>,
    book: &SecretBook,
    covers: &[(String, ImageArray)],
    options: &EvalOptions,
) -> Result<EvalReport> {
    let res = decoder.resolution();
    if perturbation.resolution() != res || book.resolution() != res {
        return Err(Error::Shape(format!(
            "carrier {:?}, decoder {:?} and secret book {:?} resolutions differ",
            perturbation.resolution(),
            res,
            book.resolution()
        )));
    }
    if covers.is_empty() {
        return Err(Error::Data("no covers to evaluate".into()));
    }
    let legal: Vec<&KeyImage> = book.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.illegal_key_seed);
    let (illegal, _) = spawn_illegal_pair(&mut rng, &legal, res, options.min_key_distance)?;
    let mut keys = legal.clone();
    keys.push(&illegal);
    let key_index: Vec<usize> = (0..keys.len()).collect();
    let corruptions = options.sweep.corruptions();
    for c in &corruptions {
        c.validate()?;
    }

    let mut rows = Vec::with_capacity(covers.len() * corruptions.len() * keys.len());
    for (id, cover) in covers {
        if cover.shape() != res {
            return Err(Error::Shape(format!(
                "cover {id} is {}x{}, expected {}x{}",
                cover.height(),
                cover.width(),
                res.0,
                res.1
            )));
        }
        let container = perturbation.make_container(cover)?.quantize();
        let container_report = MetricReport::compute(cover, &container)?;
        for spec in &corruptions {
            let received = spec.apply_real(&container)?;
            let inputs = vec![&received; keys.len()];
            let decoded = decoder.decode_batch(&inputs, &keys, &key_index)?;
            for (k, out) in decoded.iter().enumerate() {
                let is_legal = k < book.len();
                let secret = if is_legal {
                    MetricReport::compute(book.secret(k), out)?
                } else {
                    let mut best: Option<MetricReport> = None;
                    for s in book.secrets() {
                        let r = MetricReport::compute(s, out)?;
                        if best.as_ref().is_none_or(|b| r.psnr > b.psnr) {
                            best = Some(r);
                        }
                    }
                    best.expect("book is non-empty")
                };
                rows.push(EvalRow {
                    cover_id: id.clone(),
                    corruption: spec.label(),
                    key: if is_legal {
                        keys[k].label.clone()
                    } else {
                        ILLEGAL_LABEL.to_string()
                    },
                    legal: is_legal,
                    container: container_report,
                    secret,
                });
            }
        }
    }

    let mut summary = Vec::new();
    for spec in &corruptions {
        let label = spec.label();
        let in_cell = |pred: &dyn Fn(&EvalRow) -> bool| -> Result<(MetricReport, MetricReport)> {
            let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.corruption == label && pred(r)).collect();
            let c: Vec<MetricReport> = sel.iter().map(|r| r.container).collect();
            let m: Vec<MetricReport> = sel.iter().map(|r| r.secret).collect();
            Ok((MetricReport::mean(&c)?, MetricReport::mean(&m)?))
        };
        for (k, key) in keys.iter().enumerate() {
            let name = if k < book.len() { key.label.clone() } else { ILLEGAL_LABEL.to_string() };
            let legal_k = k < book.len();
            let (c, m) = in_cell(&|r: &EvalRow| {
                r.legal == legal_k && (!legal_k || r.key == name)
            })?;
            summary.push(SummaryRow {
                corruption: label.clone(),
                key: name,
                container: c,
                secret: m,
            });
        }
        let (c, m) = in_cell(&|r: &EvalRow| r.legal)?;
        summary.push(SummaryRow {
            corruption: label.clone(),
            key: LEGAL_MEAN_LABEL.to_string(),
            container: c,
            secret: m,
        });
    }
    Ok(EvalReport { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderArch;

    #[test]
    fn row_count_and_labels() {
        let res = (16, 16);
        let decoder = DecoderParams::init(DecoderArch::new(res, 2, 8), 0).unwrap();
        let p = Perturbation::init(res, 10.0 / 255.0, 0).unwrap();
        let book = SecretBook::new(vec![
            (
                KeyImage::solid(res, [255, 0, 0], "red").unwrap(),
                ImageArray::filled(16, 16, 0.2).unwrap(),
            ),
            (
                KeyImage::solid(res, [0, 255, 0], "green").unwrap(),
                ImageArray::filled(16, 16, 0.8).unwrap(),
            ),
        ])
        .unwrap();
        let covers: Vec<(String, ImageArray)> = (0..3)
            .map(|i| (format!("c{i}"), ImageArray::filled(16, 16, 0.1 + 0.3 * i as f64).unwrap()))
            .collect();
        let opts = EvalOptions {
            sweep: Sweep::Jpeg(vec![10, 30, 50, 70, 90]),
            ..EvalOptions::default()
        };
        let report = evaluate(&p, &decoder, &book, &covers, &opts).unwrap();
        assert_eq!(report.rows.len(), 3 * 6 * 3);
        assert_eq!(report.summary.len(), 6 * 4);
        assert!(report.summary_for("jpeg50", "red").is_some());
        assert!(report.summary_for("identity", LEGAL_MEAN_LABEL).is_some());
        assert_eq!(report.to_csv().lines().count(), 1 + 54);
        let back: EvalReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back.rows.len(), report.rows.len());
        let again = evaluate(&p, &decoder, &book, &covers, &opts).unwrap();
        assert_eq!(again, report);
    }
}
