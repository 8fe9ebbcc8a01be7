//! Secret-key controlled decoder.
//!
//! Two sub-networks share one flat parameter vector:
//!
//! * the key branch projects a key image to an `embed_channels`-deep map of
//!   the same resolution: `conv → 3 × residual(conv, lrelu, conv) → conv`;
//! * the main branch is a U-Net over `container ‖ embedding`: `depth`
//!   stride-2 encoder convs with widths `b, 2b, 4b, …`, a bottleneck conv,
//!   `depth` decoder stages (2× nearest upsample, concatenate the mirrored
//!   encoder output, conv) and a 1×1 head followed by a sigmoid.
//!
//! All 3×3 convs use zero padding 1; hidden activations are leaky rectifiers
//! with slope 0.2. The canonical parameter order (used by `decoder.bin`) is:
//! key input conv, residual convs `1a 1b 2a 2b 3a 3b`, key output conv,
//! encoder convs shallow→deep, bottleneck, decoder convs deep→shallow, head.
//! Each conv stores `[cout][cin][k][k]` weights followed by `cout` biases.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageArray;
use crate::io;
use crate::nn::{self, Conv, Scalar, Tensor, LEAKY_SLOPE};

pub const PARAMS_FILE: &str = "decoder.bin";
pub const META_FILE: &str = "decoder_meta.json";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DEPTH: usize = 4;
pub const KEY_RESIDUAL_BLOCKS: usize = 3;

/// A key image with a short label (e.g. `"red"`).
#[derive(Debug, Clone, PartialEq)]
pub struct KeyImage {
    pub image: ImageArray,
    pub label: String,
}

impl KeyImage {
    pub fn new(image: ImageArray, label: impl Into<String>) -> Self {
        Self {
            image,
            label: label.into(),
        }
    }

    /// Pure-color key from 8-bit RGB.
    pub fn solid(resolution: (usize, usize), rgb: [u8; 3], label: impl Into<String>) -> Result<Self> {
        let rgb = rgb.map(|b| f64::from(b) / 255.0);
        Ok(Self::new(
            ImageArray::solid(resolution.0, resolution.1, rgb)?,
            label,
        ))
    }

    /// i.i.d. uniform noise key, quantized to 8 bits so it survives a PNG round-trip.
    pub fn noise(resolution: (usize, usize), seed: u64, label: impl Into<String>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = resolution.0 * resolution.1 * 3;
        let data = (0..n).map(|_| f64::from(rng.gen::<u8>()) / 255.0).collect();
        Ok(Self::new(
            ImageArray::new(resolution.0, resolution.1, data)?,
            label,
        ))
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.image.shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderArch {
    pub resolution: (usize, usize),
    pub embed_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
}

impl DecoderArch {
    pub fn new(resolution: (usize, usize), embed_channels: usize, base_channels: usize) -> Self {
        Self {
            resolution,
            embed_channels,
            base_channels,
            depth: DEFAULT_DEPTH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_channels < 1 {
            return Err(Error::Config("embed_channels must be at least 1".into()));
        }
        if self.base_channels < 1 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.depth < 1 {
            return Err(Error::Config("decoder depth must be at least 1".into()));
        }
        let m = 1usize << self.depth;
        let (h, w) = self.resolution;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "resolution {h}x{w} must be divisible by {m} for a depth-{} decoder",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    key_in: Conv,
    key_res: Vec<(Conv, Conv)>,
    key_out: Conv,
    enc: Vec<Conv>,
    bottleneck: Conv,
    /// `dec[j]` produces the map at resolution `H / 2^j`; stored deep→shallow
    /// in the parameter vector but indexed by `j` here.
    dec: Vec<Conv>,
    head: Conv,
    total: usize,
}

impl Layers {
    fn build(arch: &DecoderArch) -> Self {
        let e = arch.embed_channels;
        let b = arch.base_channels;
        let d = arch.depth;
        let mut off = 0;
        let mut next = |cin, cout, k, s| {
            let c = Conv::new(cin, cout, k, s, off);
            off += c.param_len();
            c
        };
        let key_in = next(3, e, 3, 1);
        let key_res = (0..KEY_RESIDUAL_BLOCKS)
            .map(|_| (next(e, e, 3, 1), next(e, e, 3, 1)))
            .collect();
        let key_out = next(e, e, 3, 1);
        let width = |i: usize| b << i;
        let input = 3 + e;
        let enc: Vec<Conv> = (0..d)
            .map(|i| next(if i == 0 { input } else { width(i - 1) }, width(i), 3, 2))
            .collect();
        let bottleneck = next(width(d - 1), width(d - 1), 3, 1);
        let mut dec: Vec<Option<Conv>> = vec![None; d];
        let mut prev = width(d - 1);
        for j in (0..d).rev() {
            let (skip, out) = if j >= 1 {
                (width(j - 1), width(j - 1))
            } else {
                (input, b)
            };
            dec[j] = Some(next(prev + skip, out, 3, 1));
            prev = out;
        }
        let head = next(b, 3, 1, 1);
        Self {
            key_in,
            key_res,
            key_out,
            enc,
            bottleneck,
            dec: dec.into_iter().map(|c| c.expect("every stage built")).collect(),
            head,
            total: off,
        }
    }

    fn all(&self) -> Vec<Conv> {
        let mut v = vec![self.key_in];
        for (a, b) in &self.key_res {
            v.push(*a);
            v.push(*b);
        }
        v.push(self.key_out);
        v.extend(&self.enc);
        v.push(self.bottleneck);
        v.extend(self.dec.iter().rev());
        v.push(self.head);
        v
    }
}

/// Weights `θ` of the key branch and the main decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T = f32> {
    arch: DecoderArch,
    layers: Layers,
    params: Vec<T>,
}

/// Intermediate activations kept for the backward pass.
pub struct DecoderCache<T> {
    keys: Tensor<T>,
    key_a0: Tensor<T>,
    key_blocks: Vec<(Tensor<T>, Tensor<T>)>,
    key_last: Tensor<T>,
    key_index: Vec<usize>,
    x0: Tensor<T>,
    enc: Vec<Tensor<T>>,
    bottleneck: Tensor<T>,
    cats: Vec<Tensor<T>>,
    dec: Vec<Tensor<T>>,
    out: Tensor<T>,
}

impl<T> DecoderCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderMeta {
    pub format_version: u32,
    pub embed_channels: usize,
    pub base_channels: usize,
    pub resolution: (usize, usize),
    pub parameter_count: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
}

fn default_depth() -> usize {
    DEFAULT_DEPTH
}

/// Key embedding, `H × W × embed_channels`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyEmbedding {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl KeyEmbedding {
    pub fn l2_distance(&self, other: &KeyEmbedding) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Default-depth decoder in `f32`.
pub fn init_decoder(
    resolution: (usize, usize),
    embed_channels: usize,
    base_channels: usize,
    seed: u64,
) -> Result<DecoderParams<f32>> {
    if base_channels < 8 {
        return Err(Error::Config(format!(
            "base_channels must be at least 8, got {base_channels}"
        )));
    }
    DecoderParams::init(
        DecoderArch::new(resolution, embed_channels, base_channels),
        seed,
    )
}

impl<T: Scalar> DecoderParams<T> {
    /// Fan-in scaled uniform weights (leaky-rectifier gain), zero biases.
    pub fn init(arch: DecoderArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layers = Layers::build(&arch);
        let mut params = vec![T::zero(); layers.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        for conv in layers.all() {
            let bound = gain * (3.0 / conv.fan_in() as f64).sqrt();
            for w in &mut params[conv.offset..conv.offset + conv.weight_len()] {
                *w = T::from_f64(rng.gen_range(-bound..bound));
            }
        }
        Ok(Self {
            arch,
            layers,
            params,
        })
    }

    pub fn arch(&self) -> &DecoderArch {
        &self.arch
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.arch.resolution
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn values(&self) -> &[T] {
        &self.params
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> DecoderParams<U> {
        DecoderParams {
            arch: self.arch,
            layers: self.layers.clone(),
            params: self.params.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    fn check_input(&self, what: &str, t: &Tensor<T>) -> Result<()> {
        let (h, w) = self.arch.resolution;
        if t.channels != 3 || t.height != h || t.width != w {
            return Err(Error::Shape(format!(
                "{what} is {}x{}x{}, decoder expects {h}x{w}x3",
                t.height, t.width, t.channels
            )));
        }
        Ok(())
    }

    fn embed_forward(&self, keys: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Vec<(Tensor<T>, Tensor<T>)>, Tensor<T>) {
        let p = &self.params;
        let l = &self.layers;
        let mut a = l.key_in.forward(p, keys);
        nn::leaky_relu_inplace(&mut a);
        let a0 = a.clone();
        let mut blocks = Vec::with_capacity(l.key_res.len());
        for (ca, cb) in &l.key_res {
            let mut h = ca.forward(p, &a);
            nn::leaky_relu_inplace(&mut h);
            let mut next = cb.forward(p, &h);
            next.add_assign(&a);
            blocks.push((a, h));
            a = next;
        }
        let e = l.key_out.forward(p, &a);
        (e, a0, blocks, a)
    }

    /// Runs the key branch on a batch of keys (`3 × K × H × W`).
    pub fn embed_keys(&self, keys: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input("key", keys)?;
        let e = self.embed_forward(keys).0;
        if !e.all_finite() {
            return Err(Error::Numeric("non-finite key embedding".into()));
        }
        Ok(e)
    }

    pub fn embed_key(&self, key: &KeyImage) -> Result<KeyEmbedding> {
        let (h, w) = key.resolution();
        let t = Tensor::from_hwc_images([key.image.as_slice()], h, w);
        let e = self.embed_keys(&t)?;
        Ok(KeyEmbedding {
            channels: e.channels,
            height: e.height,
            width: e.width,
            data: e.data.iter().map(|v| v.as_f64()).collect(),
        })
    }

    /// Decodes `containers[i]` with key `keys[key_index[i]]`, keeping the
    /// activations needed by [`backward`](Self::backward).
    pub fn forward(
        &self,
        containers: &Tensor<T>,
        keys: &Tensor<T>,
        key_index: &[usize],
    ) -> Result<DecoderCache<T>> {
        self.check_input("container", containers)?;
        self.check_input("key", keys)?;
        if key_index.len() != containers.batch {
            return Err(Error::Shape(format!(
                "{} key indices for {} containers",
                key_index.len(),
                containers.batch
            )));
        }
        if let Some(&bad) = key_index.iter().find(|&&i| i >= keys.batch) {
            return Err(Error::Shape(format!(
                "key index {bad} out of range for {} keys",
                keys.batch
            )));
        }
        let p = &self.params;
        let l = &self.layers;
        let d = self.arch.depth;

        let (emb, key_a0, key_blocks, key_last) = self.embed_forward(keys);
        let x0 = containers.concat(&emb.gather(key_index));

        let mut enc: Vec<Tensor<T>> = Vec::with_capacity(d);
        for (i, conv) in l.enc.iter().enumerate() {
            let mut y = conv.forward(p, if i == 0 { &x0 } else { &enc[i - 1] });
            nn::leaky_relu_inplace(&mut y);
            enc.push(y);
        }
        let mut bottleneck = l.bottleneck.forward(p, &enc[d - 1]);
        nn::leaky_relu_inplace(&mut bottleneck);

        let mut cats: Vec<Option<Tensor<T>>> = vec![None; d];
        let mut dec: Vec<Option<Tensor<T>>> = vec![None; d];
        let mut u = bottleneck.clone();
        for j in (0..d).rev() {
            let skip = if j >= 1 { &enc[j - 1] } else { &x0 };
            let cat = nn::upsample2x(&u).concat(skip);
            let mut y = l.dec[j].forward(p, &cat);
            nn::leaky_relu_inplace(&mut y);
            cats[j] = Some(cat);
            dec[j] = Some(y.clone());
            u = y;
        }
        let mut out = l.head.forward(p, &u);
        nn::sigmoid_inplace(&mut out);
        if !out.all_finite() {
            return Err(Error::Numeric("non-finite decoder output".into()));
        }
        Ok(DecoderCache {
            keys: keys.clone(),
            key_a0,
            key_blocks,
            key_last,
            key_index: key_index.to_vec(),
            x0,
            enc,
            bottleneck,
            cats: cats.into_iter().map(|c| c.expect("built")).collect(),
            dec: dec.into_iter().map(|c| c.expect("built")).collect(),
            out,
        })
    }

    /// Backpropagates `d_out` (gradient w.r.t. the decoded images), adding
    /// parameter gradients into `grads` and returning the gradient w.r.t. the
    /// containers.
    pub fn backward(&self, cache: &DecoderCache<T>, d_out: &Tensor<T>, grads: &mut [T]) -> Tensor<T> {
        assert_eq!(grads.len(), self.params.len());
        assert!(d_out.same_shape(&cache.out));
        let p = &self.params;
        let l = &self.layers;
        let d = self.arch.depth;

        let mut g = d_out.clone();
        nn::sigmoid_backward(&cache.out, &mut g);
        let mut du = l
            .head
            .backward(p, grads, &cache.dec[0], &g, true)
            .expect("dx requested");

        let mut d_enc: Vec<Option<Tensor<T>>> = vec![None; d];
        let mut d_x0: Option<Tensor<T>> = None;
        let accumulate = |slot: &mut Option<Tensor<T>>, t: Tensor<T>| match slot {
            Some(acc) => acc.add_assign(&t),
            None => *slot = Some(t),
        };

        for j in 0..d {
            nn::leaky_relu_backward(&cache.dec[j], &mut du);
            let dcat = l.dec[j]
                .backward(p, grads, &cache.cats[j], &du, true)
                .expect("dx requested");
            let up_channels = cache.cats[j].channels
                - if j >= 1 {
                    cache.enc[j - 1].channels
                } else {
                    cache.x0.channels
                };
            let (d_up, d_skip) = dcat.split(up_channels);
            if j >= 1 {
                accumulate(&mut d_enc[j - 1], d_skip);
            } else {
                accumulate(&mut d_x0, d_skip);
            }
            du = nn::upsample2x_backward(&d_up);
        }

        nn::leaky_relu_backward(&cache.bottleneck, &mut du);
        let db = l
            .bottleneck
            .backward(p, grads, &cache.enc[d - 1], &du, true)
            .expect("dx requested");
        accumulate(&mut d_enc[d - 1], db);

        for i in (0..d).rev() {
            let mut de = d_enc[i].take().expect("every encoder output feeds forward");
            nn::leaky_relu_backward(&cache.enc[i], &mut de);
            let input = if i == 0 { &cache.x0 } else { &cache.enc[i - 1] };
            let dx = l.enc[i].backward(p, grads, input, &de, true).expect("dx requested");
            if i == 0 {
                accumulate(&mut d_x0, dx);
            } else {
                accumulate(&mut d_enc[i - 1], dx);
            }
        }

        let (d_containers, d_emb_gathered) = d_x0.expect("input gradient").split(3);
        let d_emb = d_emb_gathered.scatter_add(&cache.key_index, cache.keys.batch);

        // Key branch.
        let mut da = l
            .key_out
            .backward(p, grads, &cache.key_last, &d_emb, true)
            .expect("dx requested");
        for ((ca, cb), (a_in, h)) in l.key_res.iter().zip(&cache.key_blocks).rev() {
            let mut dh = cb.backward(p, grads, h, &da, true).expect("dx requested");
            nn::leaky_relu_backward(h, &mut dh);
            let d_in = ca.backward(p, grads, a_in, &dh, true).expect("dx requested");
            da.add_assign(&d_in);
        }
        nn::leaky_relu_backward(&cache.key_a0, &mut da);
        l.key_in.backward(p, grads, &cache.keys, &da, false);

        d_containers
    }

    /// Decodes one container with one key.
    pub fn decode(&self, container: &ImageArray, key: &KeyImage) -> Result<ImageArray> {
        Ok(self.decode_batch(&[container], &[key], &[0])?.remove(0))
    }

    /// Decodes `containers[i]` with `keys[key_index[i]]`.
    pub fn decode_batch(
        &self,
        containers: &[&ImageArray],
        keys: &[&KeyImage],
        key_index: &[usize],
    ) -> Result<Vec<ImageArray>> {
        let (h, w) = self.arch.resolution;
        for c in containers {
            if c.shape() != (h, w) {
                return Err(Error::Shape(format!(
                    "container is {}x{}, decoder expects {h}x{w}",
                    c.height(),
                    c.width()
                )));
            }
        }
        for k in keys {
            if k.resolution() != (h, w) {
                return Err(Error::Shape(format!(
                    "key '{}' is {}x{}, decoder expects {h}x{w}",
                    k.label,
                    k.image.height(),
                    k.image.width()
                )));
            }
        }
        let ct = Tensor::from_hwc_images(containers.iter().map(|c| c.as_slice()), h, w);
        let kt = Tensor::from_hwc_images(keys.iter().map(|k| k.image.as_slice()), h, w);
        let cache = self.forward(&ct, &kt, key_index)?;
        (0..containers.len())
            .map(|i| ImageArray::from_clamped(h, w, cache.out.sample_to_hwc(i)))
            .collect()
    }
}

impl DecoderParams<f32> {
    pub fn meta(&self) -> DecoderMeta {
        DecoderMeta {
            format_version: FORMAT_VERSION,
            embed_channels: self.arch.embed_channels,
            base_channels: self.arch.base_channels,
            resolution: self.arch.resolution,
            parameter_count: self.params.len(),
            depth: self.arch.depth,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_f32_file(&dir.join(PARAMS_FILE), &self.params)?;
        io::write_json(&dir.join(META_FILE), &self.meta())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DecoderMeta = io::read_json(&dir.join(META_FILE))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported decoder format version {}",
                meta.format_version
            )));
        }
        let arch = DecoderArch {
            resolution: meta.resolution,
            embed_channels: meta.embed_channels,
            base_channels: meta.base_channels,
            depth: meta.depth,
        };
        arch.validate()
            .map_err(|e| Error::Checkpoint(format!("decoder metadata: {e}")))?;
        let layers = Layers::build(&arch);
        if layers.total != meta.parameter_count {
            return Err(Error::Checkpoint(format!(
                "metadata says {} parameters, architecture has {}",
                meta.parameter_count, layers.total
            )));
        }
        let params = io::read_f32_file(&dir.join(PARAMS_FILE), layers.total)?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite decoder weights".into()));
        }
        Ok(Self {
            arch,
            layers,
            params,
        })
    }
}
