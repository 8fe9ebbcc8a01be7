//! Key-controlled data hiding with a single universal perturbation.
//!
//! A bounded perturbation `δ` is optimized jointly with a key-conditioned
//! decoder so that `clamp(C + δ)` carries several secret images for any cover
//! `C`; each legal key image selects one secret, and unknown keys decode to
//! noise.

pub mod carrier;
pub mod config;
pub mod datasets;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod image;
mod io;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod robust;
pub mod trainer;

pub use carrier::Perturbation;
pub use decoder::{DecoderArch, DecoderParams, KeyImage};
pub use error::{Error, Result};
pub use image::ImageArray;
pub use metrics::MetricReport;
pub use objective::LossReport;
pub use robust::{CorruptionMenu, CorruptionSpec};
pub use trainer::{SecretBook, TrainConfig, TrainState};
