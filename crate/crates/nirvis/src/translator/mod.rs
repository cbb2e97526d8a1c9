//! Conditional-GAN spectrum translator.
//!
//! A U-Net generator learns the mapping from one capture spectrum to the
//! other on pixel-aligned pairs, adversarially against a PatchGAN
//! discriminator that judges (condition, candidate) patch pairs, plus an
//! L1 term that anchors the translation to the aligned target. Images
//! travel as `[0, 1]` [`SpectralImage`]s at the boundary and as `[-1, 1]`
//! tensors inside (matching the tanh output head).
//!
//! Checkpoints pair the binary tensor container with a plain-text
//! `key=value` sidecar of the [`TranslatorConfig`], so a saved model is
//! reconstructable without any out-of-band knowledge.

mod discriminator;
mod generator;
mod losses;
mod train;

pub use discriminator::{
    build_discriminator, patch_map_size, receptive_field, Discriminator, PATCHGAN_STACK,
};
pub use generator::{build_generator, Generator};
pub use losses::{
    discriminator_loss, generator_loss, DiscriminatorLoss, GeneratorLoss, LOG_CLAMP,
};
pub use train::{train_translator, EpochRecord, TrainedTranslator, TrainingLog};

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::descriptors::{SpectralImage, Spectrum};
use crate::error::{Error, Result};
use crate::tensor::io::{self, TensorEntry};
use crate::tensor::Tensor;

/// Translation direction; fixes which spectrum is the condition input and
/// which is the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Vis2Nir,
    Nir2Vis,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::Vis2Nir => "vis2nir",
            Direction::Nir2Vis => "nir2vis",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "vis2nir" => Ok(Direction::Vis2Nir),
            "nir2vis" => Ok(Direction::Nir2Vis),
            other => Err(Error::InvalidInput(format!(
                "unknown direction `{other}` (expected vis2nir or nir2vis)"
            ))),
        }
    }

    /// The real spectrum accepted as input.
    pub fn source(self) -> Spectrum {
        match self {
            Direction::Vis2Nir => Spectrum::Vis,
            Direction::Nir2Vis => Spectrum::Nir,
        }
    }

    /// The real spectrum used as the training target.
    pub fn target(self) -> Spectrum {
        match self {
            Direction::Vis2Nir => Spectrum::Nir,
            Direction::Nir2Vis => Spectrum::Vis,
        }
    }

    /// The tag stamped onto translated outputs.
    pub fn synthetic_output(self) -> Spectrum {
        match self {
            Direction::Vis2Nir => Spectrum::NirSynth,
            Direction::Nir2Vis => Spectrum::VisSynth,
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// All knobs of the translator. Every field participates in the checkpoint
/// sidecar, and the builder functions derive their RNG streams from `seed`,
/// so (config, dataset) fully determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorConfig {
    /// Square image side; a power of two (64 desk scale, 256 paper scale).
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel width of the first encoder level; doubled per level.
    pub base_channels: usize,
    /// Cap on channel widths deeper in the stack.
    pub max_channels: usize,
    /// Weight of the L1 term in the generator objective.
    pub lambda_l1: f64,
    /// Adam learning rate for both networks.
    pub lr: f64,
    /// Adam beta1 (GAN convention 0.5; beta2 stays 0.999).
    pub beta1: f64,
    /// Maximum training epochs (early stop can end sooner).
    pub epochs: usize,
    /// Epochs without held-out L1 improvement before stopping.
    pub patience: usize,
    /// Dropout probability in the innermost three decoder blocks.
    pub dropout: f64,
    /// Fraction of training pairs held out for the early-stop metric.
    pub holdout_fraction: f64,
    pub seed: u64,
    pub direction: Direction,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            image_size: 64,
            in_channels: 1,
            out_channels: 1,
            base_channels: 8,
            max_channels: 64,
            lambda_l1: 100.0,
            lr: 0.001,
            beta1: 0.5,
            epochs: 30,
            patience: 5,
            dropout: 0.5,
            holdout_fraction: 0.1,
            seed: 7,
            direction: Direction::Vis2Nir,
        }
    }
}

impl TranslatorConfig {
    /// Encoder depth: `log2(image_size)`.
    pub fn depth(&self) -> usize {
        self.image_size.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !self.image_size.is_power_of_two() || self.image_size < 16 {
            return fail(format!(
                "image_size must be a power of two >= 16, got {}",
                self.image_size
            ));
        }
        for (name, c) in [("in_channels", self.in_channels), ("out_channels", self.out_channels)]
        {
            if c != 1 && c != 3 {
                return fail(format!("{name} must be 1 or 3, got {c}"));
            }
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return fail(format!(
                "need 1 <= base_channels <= max_channels, got {} and {}",
                self.base_channels, self.max_channels
            ));
        }
        if !self.lambda_l1.is_finite() || self.lambda_l1 < 0.0 {
            return fail(format!("lambda_l1 must be finite and >= 0, got {}", self.lambda_l1));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return fail(format!("lr must be finite and positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return fail(format!("beta1 must be in [0, 1), got {}", self.beta1));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return fail(format!(
                "holdout_fraction must be in [0, 1), got {}",
                self.holdout_fraction
            ));
        }
        Ok(())
    }

    /// Serialize as `key=value` lines (the checkpoint sidecar format).
    pub fn to_sidecar(&self) -> String {
        format!(
            "image_size={}\nin_channels={}\nout_channels={}\nbase_channels={}\n\
             max_channels={}\nlambda_l1={}\nlr={}\nbeta1={}\nepochs={}\npatience={}\n\
             dropout={}\nholdout_fraction={}\nseed={}\ndirection={}\n",
            self.image_size,
            self.in_channels,
            self.out_channels,
            self.base_channels,
            self.max_channels,
            self.lambda_l1,
            self.lr,
            self.beta1,
            self.epochs,
            self.patience,
            self.dropout,
            self.holdout_fraction,
            self.seed,
            self.direction.tag()
        )
    }

    /// Parse the sidecar format. Every key must be present; unknown keys
    /// are rejected so corrupted or foreign files fail loudly.
    pub fn from_sidecar(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = TranslatorConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(path, format!("line {}: expected key=value", lineno + 1))
            })?;
            let bad = |what: &str| {
                Error::format(
                    path,
                    format!("line {}: {what} `{value}` for key `{key}`", lineno + 1),
                )
            };
            macro_rules! parse {
                ($field:expr) => {
                    $field = value.parse().map_err(|_| bad("unparsable value"))?
                };
            }
            match key {
                "image_size" => parse!(cfg.image_size),
                "in_channels" => parse!(cfg.in_channels),
                "out_channels" => parse!(cfg.out_channels),
                "base_channels" => parse!(cfg.base_channels),
                "max_channels" => parse!(cfg.max_channels),
                "lambda_l1" => parse!(cfg.lambda_l1),
                "lr" => parse!(cfg.lr),
                "beta1" => parse!(cfg.beta1),
                "epochs" => parse!(cfg.epochs),
                "patience" => parse!(cfg.patience),
                "dropout" => parse!(cfg.dropout),
                "holdout_fraction" => parse!(cfg.holdout_fraction),
                "seed" => parse!(cfg.seed),
                "direction" => cfg.direction = Direction::from_tag(value).map_err(|_| bad("unknown direction"))?,
                other => {
                    return Err(Error::format(path, format!("unknown config key `{other}`")))
                }
            }
            seen.insert(key.to_string());
        }
        const REQUIRED: [&str; 14] = [
            "image_size",
            "in_channels",
            "out_channels",
            "base_channels",
            "max_channels",
            "lambda_l1",
            "lr",
            "beta1",
            "epochs",
            "patience",
            "dropout",
            "holdout_fraction",
            "seed",
            "direction",
        ];
        for key in REQUIRED {
            if !seen.contains(key) {
                return Err(Error::format(path, format!("missing config key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sidecar file path for a checkpoint: the checkpoint path plus `.cfg`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.cfg", path.display()))
}

/// Write a tensor container plus config sidecar, both atomically.
fn save_model(path: &Path, entries: Vec<TensorEntry>, config: &TranslatorConfig) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = parent.join(format!(".{}.tmp", file_name.to_string_lossy()));
    io::save(&tmp, &entries)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    crate::write_atomic(&sidecar_path(path), config.to_sidecar().as_bytes())
}

/// Read a tensor container plus its config sidecar.
fn load_model(path: &Path) -> Result<(Vec<TensorEntry>, TranslatorConfig)> {
    let entries = io::load(path)?;
    let sc = sidecar_path(path);
    let text = fs::read_to_string(&sc).map_err(|e| Error::io(&sc, e))?;
    let config = TranslatorConfig::from_sidecar(&text, &sc)?;
    Ok((entries, config))
}

/// A trained generator bound to the config it was built with: the loadable,
/// runnable translation artifact.
pub struct Translator {
    pub generator: Generator<f32>,
    pub config: TranslatorConfig,
}

impl Translator {
    pub fn new(generator: Generator<f32>, config: TranslatorConfig) -> Result<Self> {
        if generator.image_size() != config.image_size
            || generator.in_channels() != config.in_channels
            || generator.out_channels() != config.out_channels
        {
            return Err(Error::InvalidInput(format!(
                "generator ({}px, {}->{}ch) does not match config ({}px, {}->{}ch)",
                generator.image_size(),
                generator.in_channels(),
                generator.out_channels(),
                config.image_size,
                config.in_channels,
                config.out_channels
            )));
        }
        Ok(Translator { generator, config })
    }

    /// Translate one image to the other spectrum. The output keeps the
    /// identity metadata and is tagged with the synthetic spectrum of the
    /// training direction. Dropout is the generator's only noise source
    /// and stays active, so a fixed `dropout_seed` makes translation
    /// deterministic.
    pub fn translate(&self, image: &SpectralImage, dropout_seed: u64) -> Result<SpectralImage> {
        let direction = self.config.direction;
        if image.spectrum != direction.source() {
            return Err(Error::InvalidInput(format!(
                "a {} translator expects {} input, got {}",
                direction.tag(),
                direction.source().tag(),
                image.spectrum.tag()
            )));
        }
        let s = self.config.image_size;
        if image.height != s || image.width != s || image.channels != self.config.in_channels {
            return Err(Error::InvalidInput(format!(
                "image is {}x{}x{}, translator expects {s}x{s}x{}",
                image.height,
                image.width,
                image.channels,
                self.config.in_channels
            )));
        }

        let x = image_to_tensor(image);
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let y = self.generator.forward(&x, true, &mut rng);
        let pixels: Vec<f32> = y.with_data(|d| {
            d.iter().map(|t| ((t + 1.0) * 0.5).clamp(0.0, 1.0)).collect()
        });
        SpectralImage::new(
            pixels,
            s,
            s,
            self.config.out_channels,
            direction.synthetic_output(),
            image.identity,
            image.eye,
            image.capture_index,
        )
    }

    /// Save generator weights plus the config sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(path, self.generator.export("gen"), &self.config)
    }

    /// Load a generator checkpoint written by [`Translator::save`].
    pub fn load(path: &Path) -> Result<Translator> {
        let (entries, config) = load_model(path)?;
        let generator = build_generator::<f32>(&config)?;
        let map = crate::tensor::io::entry_map(entries, path)?;
        generator
            .import("gen", &map)
            .map_err(|m| Error::format(path, m))?;
        Translator::new(generator, config)
    }
}

/// `[0, 1]` image pixels to a `[1, C, H, W]` tensor in `[-1, 1]`.
///
/// [`SpectralImage`] stores pixels interleaved (HWC); tensors are planar
/// (CHW), so multi-channel images are transposed here.
pub(crate) fn image_to_tensor(image: &SpectralImage) -> Tensor<f32> {
    let (h, w, c) = (image.height, image.width, image.channels);
    let mut data = vec![0f32; c * h * w];
    let px = image.pixels();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = 2.0 * px[(y * w + x) * c + ch] - 1.0;
            }
        }
    }
    Tensor::new(data, &[1, c, h, w])
}
