//! JSON run configuration with `paper` and `desk` profiles.
//!
//! Every field is optional; missing ones are taken from the selected profile
//! and unknown keys are rejected. [`RunConfig::resolve`] yields the effective
//! settings, and [`EffectiveConfig::to_run_config`] writes them back out in
//! full so a run can be repeated from its own output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::objective::GradientRouting;
use crate::robust::{CorruptionMenu, BLUR_KERNEL_SIZES, JPEG_QUALITIES};
use crate::trainer::{Seeds, TrainConfig};

pub const SEED_ENV: &str = "PERTURBKEY_SEED";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    #[default]
    Desk,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub resolution: Option<(usize, usize)>,
    pub split_seed: Option<u64>,
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarrierSection {
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSection {
    pub embed_channels: Option<usize>,
    pub base_channels: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MenuSection {
    pub identity: Option<f64>,
    pub blur: Option<f64>,
    pub jpeg: Option<f64>,
    pub quantize: Option<f64>,
    pub blur_kernel_sizes: Option<Vec<usize>>,
    pub jpeg_quality: Option<(u8, u8)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustSection {
    pub enabled: Option<bool>,
    pub menu: Option<MenuSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub lambda: Option<f64>,
    pub gradient_routing: Option<GradientRouting>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_iter: Option<u64>,
    pub eval_interval: Option<u64>,
    pub checkpoint_interval: Option<u64>,
    pub min_key_distance: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub illegal_key_seed: Option<u64>,
    pub blur_sweep: Option<Vec<usize>>,
    pub jpeg_sweep: Option<Vec<u8>>,
}

/// The on-disk configuration document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub profile: Profile,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub carrier: CarrierSection,
    #[serde(default)]
    pub decoder: DecoderSection,
    #[serde(default)]
    pub robust: RobustSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub split_seed: u64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub illegal_key_seed: u64,
    pub blur_sweep: Vec<usize>,
    pub jpeg_sweep: Vec<u8>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            illegal_key_seed: 7,
            blur_sweep: BLUR_KERNEL_SIZES.to_vec(),
            jpeg_sweep: JPEG_QUALITIES.to_vec(),
        }
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveConfig {
    pub profile: Profile,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Merges onto the profile defaults and validates.
    pub fn resolve(&self) -> Result<EffectiveConfig> {
        let base = match self.profile {
            Profile::Paper => TrainConfig::paper(),
            Profile::Desk => TrainConfig::desk(),
        };
        let data = DataConfig {
            split_seed: self.data.split_seed.unwrap_or(0),
            test_fraction: self.data.test_fraction.unwrap_or(match self.profile {
                Profile::Paper => 1.0 / 11.0,
                Profile::Desk => 0.2,
            }),
        };
        let menu = match &self.robust.menu {
            None => base.menu.clone(),
            Some(m) => CorruptionMenu {
                identity: m.identity.unwrap_or(base.menu.identity),
                blur: m.blur.unwrap_or(base.menu.blur),
                jpeg: m.jpeg.unwrap_or(base.menu.jpeg),
                quantize: m.quantize.unwrap_or(base.menu.quantize),
                blur_kernel_sizes: m
                    .blur_kernel_sizes
                    .clone()
                    .unwrap_or_else(|| base.menu.blur_kernel_sizes.clone()),
                jpeg_quality: m.jpeg_quality.unwrap_or(base.menu.jpeg_quality),
            },
        };
        let t = &self.trainer;
        let train = TrainConfig {
            resolution: self.data.resolution.unwrap_or(base.resolution),
            epsilon: self.carrier.epsilon.unwrap_or(base.epsilon),
            lambda: self.objective.lambda.unwrap_or(base.lambda),
            learning_rate: t.learning_rate.unwrap_or(base.learning_rate),
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            max_iter: t.max_iter.unwrap_or(base.max_iter),
            eval_interval: t.eval_interval.unwrap_or(base.eval_interval),
            checkpoint_interval: t.checkpoint_interval.unwrap_or(base.checkpoint_interval),
            embed_channels: self.decoder.embed_channels.unwrap_or(base.embed_channels),
            base_channels: self.decoder.base_channels.unwrap_or(base.base_channels),
            robust: self.robust.enabled.unwrap_or(base.robust),
            menu,
            gradient_routing: self.objective.gradient_routing.unwrap_or(base.gradient_routing),
            min_key_distance: t.min_key_distance.unwrap_or(base.min_key_distance),
            seeds: Seeds {
                carrier: self.carrier.seed.unwrap_or(base.seeds.carrier),
                decoder: self.decoder.seed.unwrap_or(base.seeds.decoder),
                trainer: t.seed.unwrap_or(base.seeds.trainer),
            },
        };
        let defaults = MetricsConfig::default();
        let metrics = MetricsConfig {
            illegal_key_seed: self.metrics.illegal_key_seed.unwrap_or(defaults.illegal_key_seed),
            blur_sweep: self.metrics.blur_sweep.clone().unwrap_or(defaults.blur_sweep),
            jpeg_sweep: self.metrics.jpeg_sweep.clone().unwrap_or(defaults.jpeg_sweep),
        };
        let eff = EffectiveConfig {
            profile: self.profile,
            data,
            train,
            metrics,
        };
        eff.validate()?;
        Ok(eff)
    }
}

impl EffectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.data.test_fraction
            )));
        }
        if let Some(&k) = self.metrics.blur_sweep.iter().find(|&&k| k % 2 == 0 || k == 0) {
            return Err(Error::Config(format!("blur sweep kernel {k} must be odd")));
        }
        if let Some(&q) = self.metrics.jpeg_sweep.iter().find(|&&q| !(1..=100).contains(&q)) {
            return Err(Error::Config(format!("jpeg sweep quality {q} outside 1..=100")));
        }
        self.train.validate()
    }

    /// Replaces every seed with one derived from `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.train.seeds = Seeds {
            carrier: seed,
            decoder: seed.wrapping_add(1),
            trainer: seed.wrapping_add(2),
        };
        self.data.split_seed = seed.wrapping_add(3);
        self.metrics.illegal_key_seed = seed.wrapping_add(4);
    }

    /// Applies `PERTURBKEY_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got '{v}'")))?;
                self.override_seeds(seed);
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
        }
    }

    pub fn to_run_config(&self) -> RunConfig {
        let t = &self.train;
        RunConfig {
            profile: self.profile,
            data: DataSection {
                resolution: Some(t.resolution),
                split_seed: Some(self.data.split_seed),
                test_fraction: Some(self.data.test_fraction),
            },
            carrier: CarrierSection {
                epsilon: Some(t.epsilon),
                seed: Some(t.seeds.carrier),
            },
            decoder: DecoderSection {
                embed_channels: Some(t.embed_channels),
                base_channels: Some(t.base_channels),
                seed: Some(t.seeds.decoder),
            },
            robust: RobustSection {
                enabled: Some(t.robust),
                menu: Some(MenuSection {
                    identity: Some(t.menu.identity),
                    blur: Some(t.menu.blur),
                    jpeg: Some(t.menu.jpeg),
                    quantize: Some(t.menu.quantize),
                    blur_kernel_sizes: Some(t.menu.blur_kernel_sizes.clone()),
                    jpeg_quality: Some(t.menu.jpeg_quality),
                }),
            },
            objective: ObjectiveSection {
                lambda: Some(t.lambda),
                gradient_routing: Some(t.gradient_routing),
            },
            trainer: TrainerSection {
                learning_rate: Some(t.learning_rate),
                batch_size: Some(t.batch_size),
                max_iter: Some(t.max_iter),
                eval_interval: Some(t.eval_interval),
                checkpoint_interval: Some(t.checkpoint_interval),
                min_key_distance: Some(t.min_key_distance),
                seed: Some(t.seeds.trainer),
            },
            metrics: MetricsSection {
                illegal_key_seed: Some(self.metrics.illegal_key_seed),
                blur_sweep: Some(self.metrics.blur_sweep.clone()),
                jpeg_sweep: Some(self.metrics.jpeg_sweep.clone()),
            },
        }
    }

    /// Writes `config.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_json(&dir.join(EFFECTIVE_CONFIG_FILE), &self.to_run_config())
    }
}
