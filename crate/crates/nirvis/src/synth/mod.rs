//! Deterministic synthetic paired-spectrum dataset.
//!
//! Stands in for a captive NIR/VIS periocular database: every identity is
//! a handful of seed-derived shape and albedo parameters, every capture a
//! pixel-aligned VIS/NIR pair rendered from the same geometry, perturbed
//! by small capture nuisances (rigid translation shared by both spectra;
//! gain and sensor noise drawn per spectrum). The whole dataset is a pure
//! function of one seed: regenerating it produces byte-identical files.
//!
//! The spectra are crafted so cross-spectral comparison is genuinely
//! harder than same-spectrum comparison (iris albedo inverts with the
//! melanin proxy, skin texture decorrelates, gradients flip sign at the
//! sclera boundary) while remaining learnable by a translator, since the
//! map from VIS to NIR is deterministic given local context.

mod noise;
mod render;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::descriptors::{Eye, SpectralImage, Spectrum};
use crate::error::{Error, Result};
use crate::eval::{DatasetSplit, ImageRecord, Role};

use render::CaptureGeometry;
pub use render::SpectralTransfer;

/// Amplitudes of the per-capture perturbations. All default values stay
/// small enough that captures of one identity remain close in pixel space.
#[derive(Debug, Clone, Copy)]
pub struct NuisanceConfig {
    /// Max rigid translation in base-scale pixels (uniform in +/- this).
    pub translation_px: f64,
    /// Max relative illumination gain (uniform in 1 +/- this).
    pub gain: f64,
    /// Std of additive Gaussian sensor noise, drawn per spectrum.
    pub noise_sigma: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            translation_px: 2.0,
            gain: 0.10,
            noise_sigma: 0.008,
        }
    }
}

impl NuisanceConfig {
    /// All perturbations off; captures of an identity differ only by
    /// pupil dilation and glint drift.
    pub fn none() -> Self {
        NuisanceConfig {
            translation_px: 0.0,
            gain: 0.0,
            noise_sigma: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.translation_px) {
            return Err(Error::Config(format!(
                "translation must lie in [0, 2] px, got {}",
                self.translation_px
            )));
        }
        if !(0.0..=0.10).contains(&self.gain) {
            return Err(Error::Config(format!(
                "gain amplitude must lie in [0, 0.10], got {}",
                self.gain
            )));
        }
        if !(0.0..=0.02).contains(&self.noise_sigma) {
            return Err(Error::Config(format!(
                "noise sigma must lie in [0, 0.02], got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Full dataset recipe. `Default` matches the desk-scale protocol:
/// 40 classes x 15 captures (10 train / 5 test) at 64x64.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub identities: usize,
    /// Captures per identity (train + test).
    pub captures: usize,
    /// How many of the captures are training captures (the rest are test).
    pub train_captures: usize,
    /// Square image side in pixels.
    pub size: usize,
    pub seed: u64,
    pub nuisance: NuisanceConfig,
    pub transfer: SpectralTransfer,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 40,
            captures: 15,
            train_captures: 10,
            size: 64,
            seed: 7,
            nuisance: NuisanceConfig::default(),
            transfer: SpectralTransfer::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 {
            return Err(Error::Config("need at least one identity".into()));
        }
        if self.captures == 0 {
            return Err(Error::Config("need at least one capture".into()));
        }
        if self.train_captures > self.captures {
            return Err(Error::Config(format!(
                "train captures ({}) exceed total captures ({})",
                self.train_captures, self.captures
            )));
        }
        if self.size < 16 {
            return Err(Error::Config(format!(
                "image size must be at least 16, got {}",
                self.size
            )));
        }
        self.nuisance.validate()
    }
}

/// Seed-derived morphology of one periocular class. Geometry fields are
/// in 64-pixel base units; the renderer scales them to the target size.
#[derive(Debug, Clone)]
pub struct IdentityParams {
    pub index: usize,
    pub eye: Eye,
    /// Eye center offset from the canonical position, [-3, 3] px.
    pub center_dx: f64,
    pub center_dy: f64,
    /// Iris radius, [11, 15] px.
    pub iris_radius: f64,
    /// Vertical/horizontal iris axis ratio, [0.92, 1.08].
    pub iris_ellipticity: f64,
    /// Pupil radius as a fraction of the iris radius, [0.34, 0.50]
    /// (clamped at render time so the pupil clears the lids).
    pub pupil_frac: f64,
    /// Melanin proxy, [0.30, 0.90]: darkens the VIS iris, brightens NIR.
    pub melanin: f64,
    /// Upper/lower palpebral aperture half-heights, [7.5, 10.5] / [7.0, 9.0] px.
    pub aperture_upper: f64,
    pub aperture_lower: f64,
    /// Half-width of the eye opening, [22, 27] px.
    pub eye_halfwidth: f64,
    /// Brow center height above the eye center, [13, 18] px.
    pub brow_offset: f64,
    /// Brow half-thickness, [2.5, 4.5] px.
    pub brow_thickness: f64,
    /// VIS skin albedo, [0.55, 0.78].
    pub skin_tone: f64,
    /// Seed of the skin/sclera/iris texture fields.
    pub texture_seed: u64,
}

impl IdentityParams {
    /// The continuous parameters as one vector (for distinctness checks).
    pub fn as_vector(&self) -> [f64; 12] {
        [
            self.center_dx,
            self.center_dy,
            self.iris_radius,
            self.iris_ellipticity,
            self.pupil_frac,
            self.melanin,
            self.aperture_upper,
            self.aperture_lower,
            self.eye_halfwidth,
            self.brow_offset,
            self.brow_thickness,
            self.skin_tone,
        ]
    }

    /// Class label used in file names and manifests, e.g. `id017_L`.
    pub fn class_label(&self) -> String {
        format!("id{:03}_{}", self.index, self.eye.tag())
    }
}

/// FNV-1a over a domain tag and integers; used to derive independent
/// RNG streams so identity draws never shift capture draws.
fn stream(seed: u64, tag: &[u8], a: u64, b: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in seed
        .to_le_bytes()
        .iter()
        .chain(tag)
        .chain(a.to_le_bytes().iter())
        .chain(b.to_le_bytes().iter())
    {
        h ^= *byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Draw the parameters of identity `index`. Pure in `(seed, index)`:
/// the same pair always yields the same identity, independent of how
/// many identities the dataset contains.
pub fn gen_identity(seed: u64, index: usize) -> IdentityParams {
    let mut rng = stream(seed, b"identity", index as u64, 0);
    IdentityParams {
        index,
        eye: if index % 2 == 0 { Eye::Left } else { Eye::Right },
        center_dx: rng.random_range(-3.0..=3.0),
        center_dy: rng.random_range(-3.0..=3.0),
        iris_radius: rng.random_range(11.0..=15.0),
        iris_ellipticity: rng.random_range(0.92..=1.08),
        pupil_frac: rng.random_range(0.34..=0.50),
        melanin: rng.random_range(0.30..=0.90),
        aperture_upper: rng.random_range(7.5..=10.5),
        aperture_lower: rng.random_range(7.0..=9.0),
        eye_halfwidth: rng.random_range(22.0..=27.0),
        brow_offset: rng.random_range(13.0..=18.0),
        brow_thickness: rng.random_range(2.5..=4.5),
        skin_tone: rng.random_range(0.55..=0.78),
        texture_seed: rng.random(),
    }
}

/// One pixel-aligned capture: the same scene in both spectra.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub vis: SpectralImage,
    pub nir: SpectralImage,
}

/// Render capture `capture_index` of an identity under the dataset
/// config. Geometry (translation, pupil dilation, glint position) is
/// drawn once and shared by both spectra; gain and noise are drawn per
/// spectrum from independent streams.
pub fn render_pair(
    id: &IdentityParams,
    capture_index: usize,
    cfg: &SynthConfig,
) -> Result<PairedSample> {
    cfg.validate()?;
    let mut geo_rng = stream(cfg.seed, b"capture-geometry", id.index as u64, capture_index as u64);
    let t = cfg.nuisance.translation_px;
    let cap = CaptureGeometry {
        dx: geo_rng.random_range(-t..=t),
        dy: geo_rng.random_range(-t..=t),
        pupil_scale: geo_rng.random_range(0.92..=1.08),
        highlight_shift: geo_rng.random_range(-0.8..=0.8),
    };
    let (mut vis_px, mut nir_px) = render::render_faces(id, &cap, &cfg.transfer, cfg.size);

    for (tag, px) in [(&b"photometric-vis"[..], &mut vis_px), (&b"photometric-nir"[..], &mut nir_px)]
    {
        let mut rng = stream(cfg.seed, tag, id.index as u64, capture_index as u64);
        let gain = rng.random_range(1.0 - cfg.nuisance.gain..=1.0 + cfg.nuisance.gain);
        if cfg.nuisance.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, cfg.nuisance.noise_sigma)
                .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;
            for v in px.iter_mut() {
                *v = (*v as f64 * gain + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        } else if gain != 1.0 {
            for v in px.iter_mut() {
                *v = (*v as f64 * gain).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let vis = SpectralImage::new(
        vis_px,
        cfg.size,
        cfg.size,
        1,
        Spectrum::Vis,
        id.index as u32,
        id.eye,
        capture_index as u32,
    )?;
    let nir = SpectralImage::new(
        nir_px,
        cfg.size,
        cfg.size,
        1,
        Spectrum::Nir,
        id.index as u32,
        id.eye,
        capture_index as u32,
    )?;
    Ok(PairedSample { vis, nir })
}

/// File name of one image, e.g. `id017_L_nir_c05.png`.
pub fn image_file_name(id: &IdentityParams, spectrum: Spectrum, capture_index: usize) -> String {
    format!("{}_{}_c{:02}.png", id.class_label(), spectrum.tag(), capture_index)
}

/// Generate the full dataset under `out_dir`: one PNG per (identity,
/// spectrum, capture) plus a `manifest.txt` in the dataset manifest
/// format, image paths relative to the manifest. Captures
/// `0..train_captures` are training captures, the rest are test.
///
/// Deterministic: the same config always produces byte-identical files.
pub fn gen_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetSplit> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(&format!("creating {}", out_dir.display()), e))?;

    let mut records = Vec::with_capacity(cfg.identities * cfg.captures * 2);
    for index in 0..cfg.identities {
        let id = gen_identity(cfg.seed, index);
        for capture in 0..cfg.captures {
            let pair = render_pair(&id, capture, cfg)?;
            let role = if capture < cfg.train_captures {
                Role::Train
            } else {
                Role::Test
            };
            for (spectrum, image) in [(Spectrum::Nir, &pair.nir), (Spectrum::Vis, &pair.vis)] {
                let name = image_file_name(&id, spectrum, capture);
                image.save_png(&out_dir.join(&name))?;
                records.push(ImageRecord {
                    class_id: id.class_label(),
                    spectrum,
                    path: name,
                    role,
                    capture_index: capture,
                });
            }
        }
    }

    let split = DatasetSplit { records };
    split.validate()?;
    split.save(&out_dir.join("manifest.txt"))?;
    Ok(split)
}
