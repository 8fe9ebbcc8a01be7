use std::fs;
use std::path::{Path, PathBuf};

use perturbkey::config::{EffectiveConfig, RunConfig, EFFECTIVE_CONFIG_FILE};
use perturbkey::eval::{evaluate, EvalOptions, Sweep};
use perturbkey::image::{load_image, save_image};
use perturbkey::objective::GradientRouting;
use perturbkey::trainer::{self, list_files, load_named_images, split_items};
use perturbkey::{CorruptionSpec, DecoderParams, Error, ImageArray, KeyImage, Perturbation, SecretBook};

use crate::{Command, SweepKind};

pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::Core(Error::Numeric(_)) => 4,
            CliError::Core(Error::Checkpoint(_)) => 5,
            CliError::Core(_) => 3,
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

pub fn parse_rgb(s: &str) -> Result<[u8; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected R,G,B, got '{s}'"));
    }
    let mut rgb = [0u8; 3];
    for (v, p) in rgb.iter_mut().zip(parts) {
        *v = p.parse().map_err(|_| format!("'{p}' is not a value in 0..=255"))?;
    }
    Ok(rgb)
}

pub fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in '{s}'"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in '{s}'"))?;
    if h == 0 || w == 0 {
        return Err(format!("resolution must be positive, got '{s}'"));
    }
    Ok((h, w))
}

pub fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::MakeKey {
            color,
            noise_seed,
            resolution,
            out,
        } => make_key(color, noise_seed, resolution, &out),
        Command::Train {
            config,
            covers,
            secrets,
            keys,
            out,
            max_iter,
            resume,
            literal_alg1,
        } => train(config.as_deref(), &covers, &secrets, &keys, &out, max_iter, resume, literal_alg1),
        Command::Encode { checkpoint, cover, out } => encode(&checkpoint, &cover, &out),
        Command::Decode {
            checkpoint,
            container,
            key,
            out,
        } => decode(&checkpoint, &container, &key, &out),
        Command::Corrupt {
            input,
            out,
            blur,
            jpeg,
            quantize,
        } => corrupt(&input, &out, blur, jpeg, quantize),
        Command::Evaluate {
            checkpoint,
            covers,
            sweep,
            report,
        } => evaluate_cmd(&checkpoint, &covers, sweep, &report),
    }
}

fn make_key(color: Option<[u8; 3]>, noise_seed: Option<u64>, res: (usize, usize), out: &Path) -> CliResult {
    let key = match (color, noise_seed) {
        (Some(rgb), None) => KeyImage::solid(res, rgb, "key")?,
        (None, Some(seed)) => KeyImage::noise(res, seed, "key")?,
        _ => return Err(CliError::Usage("give exactly one of --color or --noise-seed".into())),
    };
    save_image(&key.image, out)?;
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default()
}

/// Pairs the sorted key and secret files of two folders.
fn load_book(keys: &Path, secrets: &Path, res: (usize, usize)) -> CliResult<SecretBook> {
    let key_files = list_files(keys)?;
    let secret_files = list_files(secrets)?;
    if key_files.len() != secret_files.len() {
        return Err(CliError::Usage(format!(
            "{} key files but {} secret files",
            key_files.len(),
            secret_files.len()
        )));
    }
    let mut pairs = Vec::with_capacity(key_files.len());
    for (k, s) in key_files.iter().zip(&secret_files) {
        let key = load_resized(k, res)?;
        let secret = load_resized(s, res)?;
        pairs.push((KeyImage::new(key, stem(k)), secret));
    }
    Ok(SecretBook::new(pairs)?)
}

fn load_resized(path: &Path, res: (usize, usize)) -> CliResult<ImageArray> {
    let img = load_image(path, None)?;
    if img.shape() != res {
        log::warn!(
            "{} is {}x{}, resizing to {}x{}",
            path.display(),
            img.height(),
            img.width(),
            res.0,
            res.1
        );
        return Ok(img.resize(res.0, res.1)?);
    }
    Ok(img)
}

fn train(
    config: Option<&Path>,
    covers: &Path,
    secrets: &Path,
    keys: &Path,
    out: &Path,
    max_iter: Option<u64>,
    resume: bool,
    literal_alg1: bool,
) -> CliResult {
    let run_config = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut eff: EffectiveConfig = run_config.resolve()?;
    eff.apply_env()?;
    if let Some(n) = max_iter {
        eff.train.max_iter = n;
    }
    if literal_alg1 {
        eff.train.gradient_routing = GradientRouting::LiteralAlg1;
    }
    eff.validate()?;
    let res = eff.train.resolution;
    let book = load_book(keys, secrets, res)?;
    let named = load_named_images(covers, res)?;
    let (train_set, test_set) = split_items(named, eff.data.split_seed, eff.data.test_fraction)?;
    let split = serde_json::json!({
        "train": train_set.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        "test": test_set.iter().map(|(n, _)| n).collect::<Vec<_>>(),
    });
    let state = if resume {
        Some(trainer::load_checkpoint(out)?)
    } else {
        None
    };
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    eff.save(out)?;
    fs::write(out.join("split.json"), serde_json::to_string_pretty(&split).expect("json"))
        .map_err(|e| Error::Io {
            path: out.join("split.json"),
            source: e,
        })?;
    book.save(out)?;
    let images: Vec<ImageArray> = train_set.into_iter().map(|(_, img)| img).collect();
    log::info!(
        "training {} iterations on {} covers with {} secrets",
        eff.train.max_iter,
        images.len(),
        book.len()
    );
    trainer::train(&eff.train, &images, &book, Some(out), state)?;
    Ok(())
}

fn missing_checkpoint(dir: &Path, e: Error) -> Error {
    match e {
        Error::Io { .. } => Error::Checkpoint(format!("cannot read checkpoint in {}: {e}", dir.display())),
        other => other,
    }
}

fn load_carrier(dir: &Path) -> CliResult<Perturbation> {
    Ok(Perturbation::load(dir).map_err(|e| missing_checkpoint(dir, e))?.0)
}

fn load_decoder(dir: &Path) -> CliResult<DecoderParams<f32>> {
    Ok(DecoderParams::load(dir).map_err(|e| missing_checkpoint(dir, e))?)
}

fn encode(checkpoint: &Path, cover: &Path, out: &Path) -> CliResult {
    let delta = load_carrier(checkpoint)?;
    let res = delta.resolution();
    let jobs: Vec<(PathBuf, PathBuf)> = if cover.is_dir() {
        list_files(cover)?
            .into_iter()
            .map(|p| {
                let dst = out.join(p.with_extension("png").file_name().expect("listed files have names"));
                (p, dst)
            })
            .collect()
    } else {
        vec![(cover.to_path_buf(), out.to_path_buf())]
    };
    for (src, dst) in jobs {
        let img = load_resized(&src, res)?;
        let container = delta.make_container(&img)?.quantize();
        save_image(&container, &dst)?;
    }
    Ok(())
}

fn decode(checkpoint: &Path, container: &Path, key: &Path, out: &Path) -> CliResult {
    let decoder = load_decoder(checkpoint)?;
    let c = load_image(container, None)?;
    let k = load_image(key, None)?;
    let res = decoder.resolution();
    for (what, img) in [("container", &c), ("key", &k)] {
        if img.shape() != res {
            return Err(Error::Shape(format!(
                "{what} is {}x{}, checkpoint expects {}x{}",
                img.height(),
                img.width(),
                res.0,
                res.1
            ))
            .into());
        }
    }
    let secret = decoder.decode(&c, &KeyImage::new(k, stem(key)))?;
    save_image(&secret, out)?;
    Ok(())
}

fn corrupt(input: &Path, out: &Path, blur: Option<usize>, jpeg: Option<u8>, quantize: bool) -> CliResult {
    let spec = match (blur, jpeg, quantize) {
        (Some(k), None, false) => CorruptionSpec::GaussianBlur { kernel_size: k },
        (None, Some(q), false) => CorruptionSpec::JpegDiff { quality: q },
        (None, None, true) => CorruptionSpec::Quantize,
        _ => return Err(CliError::Usage("give exactly one of --blur, --jpeg, --quantize".into())),
    };
    spec.validate()?;
    let img = load_image(input, None)?;
    save_image(&spec.apply_real(&img)?, out)?;
    Ok(())
}

fn evaluate_cmd(checkpoint: &Path, covers: &Path, sweep: SweepKind, report: &Path) -> CliResult {
    let delta = load_carrier(checkpoint)?;
    let decoder = load_decoder(checkpoint)?;
    let book = SecretBook::load(checkpoint)?;
    let config_path = checkpoint.join(EFFECTIVE_CONFIG_FILE);
    let eff = if config_path.exists() {
        RunConfig::load(&config_path)?.resolve()?
    } else {
        RunConfig::default().resolve()?
    };
    let options = EvalOptions {
        sweep: match sweep {
            SweepKind::None => Sweep::None,
            SweepKind::Blur => Sweep::Blur(eff.metrics.blur_sweep.clone()),
            SweepKind::Jpeg => Sweep::Jpeg(eff.metrics.jpeg_sweep.clone()),
        },
        illegal_key_seed: eff.metrics.illegal_key_seed,
        min_key_distance: eff.train.min_key_distance,
    };
    let images = load_named_images(covers, decoder.resolution())?;
    let result = evaluate(&delta, &decoder, &book, &images, &options)?;
    let text = if report.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        result.to_csv()
    } else {
        result.to_json()
    };
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(report, text).map_err(|e| Error::Io {
        path: report.to_path_buf(),
        source: e,
    })?;
    for row in result.summary.iter().filter(|r| r.key == perturbkey::eval::LEGAL_MEAN_LABEL || r.key == perturbkey::eval::ILLEGAL_LABEL) {
        println!(
            "{:<10} {:<10} secret psnr {:>8} dB  container psnr {:>8} dB",
            row.corruption,
            row.key,
            perturbkey::metrics::format_db(row.secret.psnr),
            perturbkey::metrics::format_db(row.container.psnr)
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_parsing() {
        assert_eq!(parse_rgb("255,0,0"), Ok([255, 0, 0]));
        assert_eq!(parse_rgb(" 1, 2 ,3"), Ok([1, 2, 3]));
        assert!(parse_rgb("1,2").is_err());
        assert!(parse_rgb("256,0,0").is_err());
    }

    #[test]
    fn resolution_parsing() {
        assert_eq!(parse_resolution("64x48"), Ok((64, 48)));
        assert_eq!(parse_resolution("16X16"), Ok((16, 16)));
        assert!(parse_resolution("64").is_err());
        assert!(parse_resolution("0x8").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(Error::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(Error::Data("x".into())).exit_code(), 3);
        assert_eq!(CliError::Core(Error::Numeric("x".into())).exit_code(), 4);
        assert_eq!(CliError::Core(Error::Checkpoint("x".into())).exit_code(), 5);
    }
}
