//! Co-joint optimization of the perturbation and the decoder.
//!
//! Each step samples covers, assigns legal keys round-robin, spawns fresh
//! illegal key/nonsense pairs, corrupts the containers, decodes both branches
//! in one batched pass and takes an Adam step on `δ` and `θ`, followed by the
//! `L∞` projection of `δ`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::carrier::Perturbation;
use crate::decoder::{DecoderArch, DecoderParams, KeyImage};
use crate::error::{Error, Result};
use crate::image::{load_image, save_image, ImageArray};
use crate::io;
use crate::metrics::psnr_from_mse;
use crate::nn::{FlushDenormals, Scalar, Tensor};
use crate::objective::{mse_grad_slices, mse_slices, GradientRouting, LossReport};
use crate::optim::Adam;
use crate::robust::{CorruptionMenu, CorruptionSpec};

pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STATE_META_FILE: &str = "state_meta.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const BOOK_DIR: &str = "book";
pub const STATE_FORMAT_VERSION: u32 = 1;
pub const MAX_KEY_REJECTIONS: usize = 100;

/// Ordered `(key, secret)` pairs; key `i` reveals secret `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecretBook {
    pairs: Vec<(KeyImage, ImageArray)>,
}

impl SecretBook {
    pub fn new(pairs: Vec<(KeyImage, ImageArray)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("a secret book needs at least one pair".into()));
        }
        let res = pairs[0].0.resolution();
        for (k, m) in &pairs {
            if k.resolution() != res || m.shape() != res {
                return Err(Error::Shape(format!(
                    "key '{}' and its secret must both be {}x{}",
                    k.label, res.0, res.1
                )));
            }
        }
        for i in 0..pairs.len() {
            for j in i + 1..pairs.len() {
                if pairs[i].0.image == pairs[j].0.image {
                    return Err(Error::Data(format!(
                        "keys '{}' and '{}' are identical",
                        pairs[i].0.label, pairs[j].0.label
                    )));
                }
            }
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.pairs[0].0.resolution()
    }

    pub fn key(&self, i: usize) -> &KeyImage {
        &self.pairs[i].0
    }

    pub fn secret(&self, i: usize) -> &ImageArray {
        &self.pairs[i].1
    }

    pub fn keys(&self) -> impl Iterator<Item = &KeyImage> {
        self.pairs.iter().map(|(k, _)| k)
    }

    pub fn secrets(&self) -> impl Iterator<Item = &ImageArray> {
        self.pairs.iter().map(|(_, m)| m)
    }

    /// Writes `book/key_XX_<label>.png` and `book/secret_XX.png`.
    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        let dir = checkpoint.join(BOOK_DIR);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, (k, m)) in self.pairs.iter().enumerate() {
            save_image(&k.image, &dir.join(format!("key_{i:02}_{}.png", k.label)))?;
            save_image(m, &dir.join(format!("secret_{i:02}.png")))?;
        }
        Ok(())
    }

    pub fn load(checkpoint: &Path) -> Result<Self> {
        let dir = checkpoint.join(BOOK_DIR);
        let mut keys = Vec::new();
        let entries = fs::read_dir(&dir)
            .map_err(|e| Error::Checkpoint(format!("cannot list {}: {e}", dir.display())))?;
        for entry in entries {
            let name = entry.map_err(|e| Error::io(&dir, e))?.file_name();
            let name = name.to_string_lossy().to_string();
            if let Some(rest) = name.strip_prefix("key_").and_then(|r| r.strip_suffix(".png")) {
                let (idx, label) = rest.split_once('_').unwrap_or((rest, ""));
                let idx: usize = idx
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad key file name {name}")))?;
                keys.push((idx, label.to_string(), name));
            }
        }
        keys.sort();
        let mut pairs = Vec::new();
        for (pos, (idx, label, name)) in keys.into_iter().enumerate() {
            if idx != pos {
                return Err(Error::Checkpoint(format!("secret book is missing key {pos}")));
            }
            let key = load_image(&dir.join(&name), None)?;
            let secret = load_image(&dir.join(format!("secret_{idx:02}.png")), None)
                .map_err(|e| Error::Checkpoint(format!("secret {idx}: {e}")))?;
            pairs.push((KeyImage::new(key, label), secret));
        }
        Self::new(pairs).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Seeds for every random stream of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub carrier: u64,
    pub decoder: u64,
    pub trainer: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub resolution: (usize, usize),
    pub epsilon: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iter: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub embed_channels: usize,
    pub base_channels: usize,
    pub robust: bool,
    pub menu: CorruptionMenu,
    pub gradient_routing: GradientRouting,
    pub min_key_distance: f64,
    pub seeds: Seeds,
}

impl TrainConfig {
    /// The reduced CPU-sized configuration.
    pub fn desk() -> Self {
        Self {
            resolution: (64, 64),
            epsilon: 10.0 / 255.0,
            lambda: 0.05,
            learning_rate: 1e-4,
            batch_size: 16,
            max_iter: 6000,
            eval_interval: 50,
            checkpoint_interval: 500,
            embed_channels: 8,
            base_channels: 16,
            robust: true,
            menu: CorruptionMenu::default(),
            gradient_routing: GradientRouting::Joint,
            min_key_distance: 0.15,
            seeds: Seeds {
                carrier: 0,
                decoder: 1,
                trainer: 2,
            },
        }
    }

    /// The full-size configuration (400×400, batch 64, 140K iterations).
    pub fn paper() -> Self {
        Self {
            resolution: (400, 400),
            batch_size: 64,
            max_iter: 140_000,
            eval_interval: 500,
            checkpoint_interval: 5000,
            embed_channels: 16,
            base_channels: 32,
            ..Self::desk()
        }
    }

    pub fn decoder_arch(&self) -> DecoderArch {
        DecoderArch::new(self.resolution, self.embed_channels, self.base_channels)
    }

    pub fn effective_menu(&self) -> CorruptionMenu {
        if self.robust {
            self.menu.clone()
        } else {
            CorruptionMenu::identity_only()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.eval_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config("intervals must be positive".into()));
        }
        if !(self.min_key_distance > 0.0) {
            return Err(Error::Config("min_key_distance must be positive".into()));
        }
        if self.base_channels < 8 {
            return Err(Error::Config("base_channels must be at least 8".into()));
        }
        self.decoder_arch().validate()?;
        if self.robust {
            self.menu.validate()?;
        }
        Ok(())
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub perturbation: Perturbation,
    pub decoder: DecoderParams<f32>,
    pub delta_opt: Adam<f32>,
    pub theta_opt: Adam<f32>,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let perturbation = Perturbation::init(config.resolution, config.epsilon, config.seeds.carrier)?;
        let decoder = DecoderParams::init(config.decoder_arch(), config.seeds.decoder)?;
        Ok(Self {
            delta_opt: Adam::new(perturbation.values().len(), config.learning_rate),
            theta_opt: Adam::new(decoder.parameter_count(), config.learning_rate),
            perturbation,
            decoder,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seeds.trainer),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    format_version: u32,
    iteration: u64,
    delta_len: usize,
    theta_len: usize,
    delta_opt_step: u64,
    theta_opt_step: u64,
    learning_rate: f64,
    rng: ChaCha8Rng,
}

/// Writes the full training state (carrier, decoder, optimizer, rng).
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    state.perturbation.save(dir, state.iteration)?;
    state.decoder.save(dir)?;
    let mut moments = Vec::with_capacity(2 * (state.delta_opt.len() + state.theta_opt.len()));
    moments.extend_from_slice(&state.delta_opt.first);
    moments.extend_from_slice(&state.delta_opt.second);
    moments.extend_from_slice(&state.theta_opt.first);
    moments.extend_from_slice(&state.theta_opt.second);
    io::write_f32_file(&dir.join(OPTIMIZER_FILE), &moments)?;
    io::write_json(
        &dir.join(STATE_META_FILE),
        &StateMeta {
            format_version: STATE_FORMAT_VERSION,
            iteration: state.iteration,
            delta_len: state.delta_opt.len(),
            theta_len: state.theta_opt.len(),
            delta_opt_step: state.delta_opt.step,
            theta_opt_step: state.theta_opt.step,
            learning_rate: state.delta_opt.learning_rate,
            rng: state.rng.clone(),
        },
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let meta: StateMeta = io::read_json(&dir.join(STATE_META_FILE))?;
    if meta.format_version != STATE_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported training-state format version {}",
            meta.format_version
        )));
    }
    let (perturbation, carrier_iter) = Perturbation::load(dir)?;
    let decoder = DecoderParams::load(dir)?;
    if carrier_iter != meta.iteration {
        return Err(Error::Checkpoint(format!(
            "carrier iteration {carrier_iter} differs from state iteration {}",
            meta.iteration
        )));
    }
    if meta.delta_len != perturbation.values().len() || meta.theta_len != decoder.parameter_count() {
        return Err(Error::Checkpoint("optimizer sizes do not match the parameters".into()));
    }
    let (d, t) = (meta.delta_len, meta.theta_len);
    let moments = io::read_f32_file(&dir.join(OPTIMIZER_FILE), 2 * (d + t))?;
    let mut delta_opt = Adam::new(d, meta.learning_rate);
    delta_opt.step = meta.delta_opt_step;
    delta_opt.first.copy_from_slice(&moments[..d]);
    delta_opt.second.copy_from_slice(&moments[d..2 * d]);
    let mut theta_opt = Adam::new(t, meta.learning_rate);
    theta_opt.step = meta.theta_opt_step;
    theta_opt.first.copy_from_slice(&moments[2 * d..2 * d + t]);
    theta_opt.second.copy_from_slice(&moments[2 * d + t..]);
    Ok(TrainState {
        perturbation,
        decoder,
        delta_opt,
        theta_opt,
        iteration: meta.iteration,
        rng: meta.rng,
    })
}

fn is_candidate_file(path: &Path) -> bool {
    path.is_file()
        && !path
            .file_name()
            .map(|n| n.to_string_lossy().starts_with('.'))
            .unwrap_or(true)
}

/// Sorted list of non-hidden files in `dir`.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_candidate_file(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every file of `dir` as an image, keyed by file name.
pub fn load_named_images(dir: &Path, resolution: (usize, usize)) -> Result<Vec<(String, ImageArray)>> {
    let files = list_files(dir)?;
    let mut out = Vec::with_capacity(files.len());
    let mut bad = Vec::new();
    for f in files {
        match load_image(&f, Some(resolution)) {
            Ok(img) => out.push((f.file_name().unwrap().to_string_lossy().to_string(), img)),
            Err(e) => bad.push(format!("{} ({e})", f.display())),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Data(format!("unreadable images: {}", bad.join(", "))));
    }
    Ok(out)
}

/// Deterministic shuffled split of `items` into `(train, test)`.
pub fn split_items<T>(items: Vec<T>, split_seed: u64, test_fraction: f64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test_fraction must lie in [0, 1), got {test_fraction}")));
    }
    if items.len() < 2 {
        return Err(Error::Data(format!("{} images found, at least 2 are needed", items.len())));
    }
    let n = items.len();
    let n_test = ((n as f64 * test_fraction).round() as usize).min(n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let test = order[..n_test].iter().map(|&i| slots[i].take().unwrap()).collect();
    let train = order[n_test..].iter().map(|&i| slots[i].take().unwrap()).collect();
    Ok((train, test))
}

/// Loads and deterministically splits a cover folder into train/test sets.
pub fn load_image_folder(
    dir: &Path,
    resolution: (usize, usize),
    split_seed: u64,
    test_fraction: f64,
) -> Result<(Vec<ImageArray>, Vec<ImageArray>)> {
    let images = load_named_images(dir, resolution)?
        .into_iter()
        .map(|(_, img)| img)
        .collect();
    split_items(images, split_seed, test_fraction)
        .map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", dir.display())),
            other => other,
        })
}

/// Fresh uniform-noise illegal key far enough from every legal key, plus a
/// uniform-noise nonsense target.
pub fn spawn_illegal_pair<R: Rng + ?Sized>(
    rng: &mut R,
    legal_keys: &[&KeyImage],
    resolution: (usize, usize),
    min_key_distance: f64,
) -> Result<(KeyImage, ImageArray)> {
    if !(min_key_distance > 0.0) {
        return Err(Error::Config("min_key_distance must be positive".into()));
    }
    let (h, w) = resolution;
    let n = h * w * 3;
    for _ in 0..MAX_KEY_REJECTIONS {
        let key: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let far_enough = legal_keys.iter().all(|k| {
            let d: f64 = k
                .image
                .as_slice()
                .iter()
                .zip(&key)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / n as f64;
            d >= min_key_distance
        });
        if far_enough {
            let nonsense = (0..n).map(|_| rng.gen::<f64>()).collect();
            return Ok((
                KeyImage::new(ImageArray::new(h, w, key)?, "illegal"),
                ImageArray::new(h, w, nonsense)?,
            ));
        }
    }
    Err(Error::Config(format!(
        "{MAX_KEY_REJECTIONS} consecutive illegal keys fell within {min_key_distance} of a legal key"
    )))
}

/// The random choices of one training step.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub cover_index: Vec<usize>,
    pub legal_index: Vec<usize>,
    pub illegal_keys: Vec<KeyImage>,
    pub nonsense: Vec<ImageArray>,
    pub corruptions: Vec<CorruptionSpec>,
}

/// Legal key for sample `j` of step `iteration`: a global round-robin, so any
/// `N` consecutive assignments use every key exactly once.
pub fn balanced_key_index(iteration: u64, batch_size: usize, j: usize, n_keys: usize) -> usize {
    ((iteration as u128 * batch_size as u128 + j as u128) % n_keys as u128) as usize
}

pub fn plan_batch<R: Rng + ?Sized>(
    rng: &mut R,
    pool_size: usize,
    book: &SecretBook,
    config: &TrainConfig,
    iteration: u64,
) -> Result<BatchPlan> {
    if pool_size == 0 {
        return Err(Error::Data("no training covers".into()));
    }
    let bs = config.batch_size;
    let cover_index = if pool_size >= bs {
        sample_indices(rng, pool_size, bs).into_vec()
    } else {
        (0..bs).map(|_| rng.gen_range(0..pool_size)).collect()
    };
    let legal_index = (0..bs)
        .map(|j| balanced_key_index(iteration, bs, j, book.len()))
        .collect();
    let legal: Vec<&KeyImage> = book.keys().collect();
    let mut illegal_keys = Vec::with_capacity(bs);
    let mut nonsense = Vec::with_capacity(bs);
    for _ in 0..bs {
        let (k, m) = spawn_illegal_pair(rng, &legal, config.resolution, config.min_key_distance)?;
        illegal_keys.push(k);
        nonsense.push(m);
    }
    let menu = config.effective_menu();
    let corruptions = (0..bs).map(|_| menu.sample(rng)).collect();
    Ok(BatchPlan {
        cover_index,
        legal_index,
        illegal_keys,
        nonsense,
        corruptions,
    })
}

/// Losses and gradients of one planned batch.
pub struct StepGradients<T> {
    pub report: LossReport,
    pub delta_grad: Vec<f64>,
    pub theta_grad: Vec<T>,
    /// Batch statistics for the training log.
    pub psnr_container: f64,
    pub psnr_per_key: Vec<f64>,
    pub psnr_illegal: f64,
}

/// Forward and backward pass of the composite objective for a planned batch.
pub fn compute_gradients<T: Scalar>(
    delta: &[f64],
    decoder: &DecoderParams<T>,
    covers: &[ImageArray],
    book: &SecretBook,
    plan: &BatchPlan,
    lambda: f64,
    routing: GradientRouting,
) -> Result<StepGradients<T>> {
    let (h, w) = decoder.resolution();
    let bs = plan.cover_index.len();
    let plane = h * w * 3;
    if delta.len() != plane {
        return Err(Error::Shape("perturbation does not match the decoder resolution".into()));
    }

    // Containers, clamp masks and corrupted inputs.
    let mut containers = Vec::with_capacity(bs);
    let mut masks = Vec::with_capacity(bs);
    let mut corrupted = Vec::with_capacity(bs);
    for (j, &ci) in plan.cover_index.iter().enumerate() {
        let cover = covers[ci].as_slice();
        if cover.len() != plane {
            return Err(Error::Shape("cover does not match the decoder resolution".into()));
        }
        let mut c = Vec::with_capacity(plane);
        let mut m = Vec::with_capacity(plane);
        for (&x, &d) in cover.iter().zip(delta) {
            let v = x + d;
            m.push((0.0..=1.0).contains(&v));
            c.push(v.clamp(0.0, 1.0));
        }
        corrupted.push(plan.corruptions[j].forward(&c, h, w));
        containers.push(c);
        masks.push(m);
    }

    // Encoding loss on the uncorrupted containers.
    let flat_containers: Vec<f64> = containers.iter().flatten().copied().collect();
    let flat_covers: Vec<f64> = plan
        .cover_index
        .iter()
        .flat_map(|&ci| covers[ci].as_slice().iter().copied())
        .collect();
    let l_enc = mse_slices(&flat_containers, &flat_covers)?;
    let enc_grad = mse_grad_slices(&flat_containers, &flat_covers, 1.0);

    // Legal branch (first bs samples) and illegal branch (next bs), one pass.
    let inputs: Vec<&[f64]> = corrupted.iter().chain(&corrupted).map(|v| v.as_slice()).collect();
    let container_t = Tensor::<T>::from_hwc_images(inputs, h, w);
    let key_imgs: Vec<&[f64]> = book
        .keys()
        .map(|k| k.image.as_slice())
        .chain(plan.illegal_keys.iter().map(|k| k.image.as_slice()))
        .collect();
    let keys_t = Tensor::<T>::from_hwc_images(key_imgs, h, w);
    let key_index: Vec<usize> = plan
        .legal_index
        .iter()
        .copied()
        .chain((0..bs).map(|j| book.len() + j))
        .collect();
    let cache = decoder.forward(&container_t, &keys_t, &key_index)?;
    let out = cache.output();

    let secrets: Vec<&[f64]> = plan.legal_index.iter().map(|&i| book.secret(i).as_slice()).collect();
    let target_legal = Tensor::<T>::from_hwc_images(secrets.iter().copied(), h, w);
    let target_illegal = Tensor::<T>::from_hwc_images(plan.nonsense.iter().map(|m| m.as_slice()), h, w);
    let half = |t: &Tensor<T>, second: bool| -> Vec<T> {
        // Channel-major: each channel holds 2·bs planes.
        let mut v = Vec::with_capacity(3 * bs * h * w);
        for c in 0..3 {
            let start = (c * 2 * bs + if second { bs } else { 0 }) * h * w;
            v.extend_from_slice(&t.data[start..start + bs * h * w]);
        }
        v
    };
    let out_legal = half(out, false);
    let out_illegal = half(out, true);
    let l_dec = mse_slices(&out_legal, &target_legal.data)?;
    let l_supp = mse_slices(&out_illegal, &target_illegal.data)?;
    let report = LossReport::new(l_enc, l_dec, l_supp, lambda)
        .map_err(|e| Error::Numeric(format!("loss evaluation: {e}")))?;

    // Gradient w.r.t. decoder output, reassembled in the 2·bs layout.
    let g_legal = mse_grad_slices(&out_legal, &target_legal.data, 1.0);
    let g_illegal = mse_grad_slices(&out_illegal, &target_illegal.data, lambda);
    let mut d_out = Tensor::<T>::zeros(3, 2 * bs, h, w);
    for c in 0..3 {
        let n = bs * h * w;
        let base = c * 2 * n;
        d_out.data[base..base + n].copy_from_slice(&g_legal[c * n..(c + 1) * n]);
        d_out.data[base + n..base + 2 * n].copy_from_slice(&g_illegal[c * n..(c + 1) * n]);
    }
    let mut theta_grad = vec![T::zero(); decoder.parameter_count()];
    let d_containers = decoder.backward(&cache, &d_out, &mut theta_grad);

    let mut delta_grad = vec![0.0; plane];
    for j in 0..bs {
        let mut g = vec![0.0; plane];
        if routing == GradientRouting::Joint {
            let from_decoder = {
                let legal = d_containers.sample_to_hwc(j);
                let illegal = d_containers.sample_to_hwc(bs + j);
                let sum: Vec<f64> = legal.iter().zip(&illegal).map(|(a, b)| a + b).collect();
                plan.corruptions[j].backward(&containers[j], &sum, h, w)
            };
            for (a, b) in g.iter_mut().zip(&from_decoder) {
                *a += b;
            }
        }
        for (a, b) in g.iter_mut().zip(&enc_grad[j * plane..(j + 1) * plane]) {
            *a += b;
        }
        for ((d, gv), &inside) in delta_grad.iter_mut().zip(&g).zip(&masks[j]) {
            if inside {
                *d += gv;
            }
        }
    }

    // Batch statistics.
    let psnr_container = plan
        .cover_index
        .iter()
        .zip(&containers)
        .map(|(&ci, c)| psnr_from_mse(mse_slices(c, covers[ci].as_slice()).unwrap_or(0.0)))
        .sum::<f64>()
        / bs as f64;
    let mut per_key = vec![(0.0, 0usize); book.len()];
    let mut illegal = 0.0;
    for j in 0..bs {
        let dec_j: Vec<f64> = out.sample_to_hwc(j);
        let k = plan.legal_index[j];
        let m = mse_slices(&dec_j, book.secret(k).as_slice())?;
        per_key[k].0 += psnr_from_mse(m);
        per_key[k].1 += 1;
        let bad: Vec<f64> = out.sample_to_hwc(bs + j);
        let worst = book
            .secrets()
            .map(|s| psnr_from_mse(mse_slices(&bad, s.as_slice()).unwrap_or(1.0)))
            .fold(f64::NEG_INFINITY, f64::max);
        illegal += worst;
    }
    let psnr_per_key = per_key
        .into_iter()
        .map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect();

    Ok(StepGradients {
        report,
        delta_grad,
        theta_grad,
        psnr_container,
        psnr_per_key,
        psnr_illegal: illegal / bs as f64,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub l_enc: f64,
    pub l_dec: f64,
    pub l_supp: f64,
    pub total: f64,
    pub psnr_container: f64,
    pub psnr_secret_per_key: Vec<f64>,
    pub psnr_illegal: f64,
}

/// One optimization step on a batch drawn from `covers`.
pub fn train_step(
    state: &mut TrainState,
    covers: &[ImageArray],
    book: &SecretBook,
    config: &TrainConfig,
) -> Result<(LossReport, LogRecord)> {
    let _ftz = FlushDenormals::new();
    let plan = plan_batch(&mut state.rng, covers.len(), book, config, state.iteration)?;
    let delta: Vec<f64> = state.perturbation.values().iter().map(|&v| f64::from(v)).collect();
    let grads = compute_gradients(
        &delta,
        &state.decoder,
        covers,
        book,
        &plan,
        config.lambda,
        config.gradient_routing,
    )
    .map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("iteration {}: {msg}", state.iteration)),
        other => other,
    })?;
    if !grads.report.total.is_finite() {
        return Err(Error::Numeric(format!(
            "iteration {}: non-finite loss {:?}",
            state.iteration, grads.report
        )));
    }
    let delta_grad: Vec<f32> = grads.delta_grad.iter().map(|&g| g as f32).collect();
    state.delta_opt.update(state.perturbation.values_mut(), &delta_grad);
    state.perturbation.project_linf();
    state.theta_opt.update(state.decoder.values_mut(), &grads.theta_grad);
    if !state.decoder.all_finite() {
        return Err(Error::Numeric(format!(
            "iteration {}: decoder weights became non-finite",
            state.iteration
        )));
    }
    state.iteration += 1;
    let r = grads.report;
    Ok((
        r,
        LogRecord {
            iter: state.iteration,
            l_enc: r.l_enc,
            l_dec: r.l_dec,
            l_supp: r.l_supp,
            total: r.total,
            psnr_container: grads.psnr_container,
            psnr_secret_per_key: grads.psnr_per_key,
            psnr_illegal: grads.psnr_illegal,
        },
    ))
}

/// Outcome of [`train`].
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRecord>,
}

fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::Checkpoint(format!("corrupt log line: {e}")))
        })
        .collect()
}

fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("log record serializes"));
        text.push('\n');
    }
    io::write_atomic(path, text.as_bytes())
}

/// Runs (or resumes) training up to `config.max_iter`.
///
/// With `out_dir`, checkpoints are written every `checkpoint_interval` steps
/// and at the end, and log records are appended to `log.jsonl`. When `resume`
/// is given, training continues from that state; log lines past its
/// iteration are discarded first.
pub fn train(
    config: &TrainConfig,
    covers: &[ImageArray],
    book: &SecretBook,
    out_dir: Option<&Path>,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if book.resolution() != config.resolution {
        return Err(Error::Shape(format!(
            "secret book is {}x{}, config expects {}x{}",
            book.resolution().0,
            book.resolution().1,
            config.resolution.0,
            config.resolution.1
        )));
    }
    if let Some(c) = covers.iter().find(|c| c.shape() != config.resolution) {
        return Err(Error::Shape(format!(
            "cover is {}x{}, config expects {}x{}",
            c.height(),
            c.width(),
            config.resolution.0,
            config.resolution.1
        )));
    }
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::init(config)?,
    };
    let mut log = Vec::new();
    let mut log_file = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let mut previous = read_log(&path)?;
        previous.retain(|r| r.iter <= state.iteration);
        write_log(&path, &previous)?;
        log = previous;
        log_file = Some(
            OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?,
        );
        if state.iteration == 0 || state.iteration >= config.max_iter {
            save_checkpoint(&state, dir)?;
        }
    }
    while state.iteration < config.max_iter {
        let (_, record) = train_step(&mut state, covers, book, config)?;
        if record.iter % config.eval_interval == 0 {
            log::info!(
                "iter {} total {:.5} l_dec {:.5} l_supp {:.5} psnr_c {:.2} psnr_m {:?} psnr_illegal {:.2}",
                record.iter,
                record.total,
                record.l_dec,
                record.l_supp,
                record.psnr_container,
                record.psnr_secret_per_key,
                record.psnr_illegal
            );
            if let (Some(f), Some(dir)) = (log_file.as_mut(), out_dir) {
                let line = serde_json::to_string(&record).expect("log record serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
            }
            log.push(record);
        }
        if let Some(dir) = out_dir {
            if state.iteration % config.checkpoint_interval == 0 || state.iteration == config.max_iter {
                save_checkpoint(&state, dir)?;
            }
        }
    }
    Ok(TrainOutcome { state, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> TrainConfig {
        TrainConfig {
            resolution: (16, 16),
            batch_size: 4,
            max_iter: 3,
            eval_interval: 1,
            checkpoint_interval: 2,
            embed_channels: 2,
            base_channels: 8,
            ..TrainConfig::desk()
        }
    }

    fn toy_book() -> SecretBook {
        let r = (16, 16);
        SecretBook::new(vec![
            (
                KeyImage::solid(r, [255, 0, 0], "red").unwrap(),
                ImageArray::solid(16, 16, [1.0, 1.0, 0.0]).unwrap(),
            ),
            (
                KeyImage::solid(r, [0, 255, 0], "green").unwrap(),
                ImageArray::solid(16, 16, [0.0, 0.0, 1.0]).unwrap(),
            ),
        ])
        .unwrap()
    }

    #[test]
    fn secret_book_validation() {
        let k = KeyImage::solid((16, 16), [255, 0, 0], "a").unwrap();
        let m = ImageArray::filled(16, 16, 0.5).unwrap();
        assert!(SecretBook::new(vec![]).is_err());
        assert!(matches!(
            SecretBook::new(vec![(k.clone(), m.clone()), (k.clone(), m.clone())]),
            Err(Error::Data(_))
        ));
        let small = ImageArray::filled(8, 8, 0.5).unwrap();
        assert!(matches!(SecretBook::new(vec![(k, small)]), Err(Error::Shape(_))));
    }

    #[test]
    fn balanced_assignment_windows() {
        for n in 1..6 {
            let mut seq = Vec::new();
            for it in 0..7u64 {
                for j in 0..5 {
                    seq.push(balanced_key_index(it, 5, j, n));
                }
            }
            for window in seq.windows(n) {
                let mut counts = vec![0; n];
                for &k in window {
                    counts[k] += 1;
                }
                assert!(counts.iter().all(|&c| c == 1));
            }
        }
    }

    #[test]
    fn illegal_pairs_are_reproducible_and_far() {
        let book = toy_book();
        let keys: Vec<&KeyImage> = book.keys().collect();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let (ka, ma) = spawn_illegal_pair(&mut a, &keys, (16, 16), 0.15).unwrap();
            let (kb, mb) = spawn_illegal_pair(&mut b, &keys, (16, 16), 0.15).unwrap();
            assert_eq!(ka, kb);
            assert_eq!(ma, mb);
            for k in &keys {
                let d: f64 = k.image.as_slice().iter().zip(ka.image.as_slice()).map(|(x, y)| (x - y).abs()).sum::<f64>()
                    / ka.image.len() as f64;
                assert!(d >= 0.15);
            }
        }
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            spawn_illegal_pair(&mut r, &keys, (16, 16), 0.9),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_iterations_yield_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            max_iter: 0,
            ..toy_config()
        };
        let covers = vec![ImageArray::filled(16, 16, 0.5).unwrap(); 4];
        let out = train(&config, &covers, &toy_book(), Some(dir.path()), None).unwrap();
        assert_eq!(out.state, TrainState::init(&config).unwrap());
        assert_eq!(load_checkpoint(dir.path()).unwrap(), out.state);
    }

    #[test]
    fn checkpoint_round_trip_and_missing_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let config = toy_config();
        let covers = vec![ImageArray::filled(16, 16, 0.4).unwrap(); 4];
        let out = train(&config, &covers, &toy_book(), Some(dir.path()), None).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, out.state);
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(carrier_meta())).unwrap()).unwrap();
        assert_eq!(meta["iteration"], 3);
        fs::remove_file(dir.path().join(OPTIMIZER_FILE)).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }

    fn carrier_meta() -> &'static str {
        crate::carrier::META_FILE
    }

    #[test]
    fn book_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let book = toy_book();
        book.save(dir.path()).unwrap();
        assert_eq!(SecretBook::load(dir.path()).unwrap(), book);
    }

    #[test]
    fn folder_split() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..10 {
            save_image(
                &ImageArray::filled(8, 8, i as f64 / 10.0).unwrap(),
                &dir.path().join(format!("{i}.png")),
            )
            .unwrap();
        }
        let (train, test) = load_image_folder(dir.path(), (16, 16), 4, 0.2).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let again = load_image_folder(dir.path(), (16, 16), 4, 0.2).unwrap();
        assert_eq!(again.0, train);
        assert_eq!(again.1, test);

        fs::write(dir.path().join("broken.png"), b"nope").unwrap();
        let err = load_image_folder(dir.path(), (16, 16), 4, 0.2).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("broken.png")), "{err}");

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_image_folder(empty.path(), (16, 16), 0, 0.2), Err(Error::Data(_))));
    }
}
