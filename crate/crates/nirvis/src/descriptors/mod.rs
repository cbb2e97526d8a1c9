//! Periocular image type and hand-crafted descriptors (HOG, LBP, SIFT).
//!
//! Images carry their spectrum tag and identity metadata through the whole
//! pipeline; descriptor vectors carry a parameter hash so that vectors
//! computed under different settings can never be compared silently.

mod hog;
mod lbp;
mod sift;

pub use hog::{hog, HogParams};
pub use lbp::{lbp, LbpParams};
pub use sift::{sift, Keypoint, KeypointSet, SiftParams};

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Capture spectrum. The `*Synth` variants are produced only by the spectrum
/// translator, never by dataset generation or image loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Spectrum {
    Nir,
    Vis,
    NirSynth,
    VisSynth,
}

impl Spectrum {
    pub fn tag(self) -> &'static str {
        match self {
            Spectrum::Nir => "nir",
            Spectrum::Vis => "vis",
            Spectrum::NirSynth => "nir_synth",
            Spectrum::VisSynth => "vis_synth",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "nir" => Ok(Spectrum::Nir),
            "vis" => Ok(Spectrum::Vis),
            "nir_synth" => Ok(Spectrum::NirSynth),
            "vis_synth" => Ok(Spectrum::VisSynth),
            other => Err(Error::InvalidInput(format!(
                "unknown spectrum tag `{other}` (expected nir, vis, nir_synth or vis_synth)"
            ))),
        }
    }

    /// True for translator outputs.
    pub fn is_synthetic(self) -> bool {
        matches!(self, Spectrum::NirSynth | Spectrum::VisSynth)
    }

    /// The real spectrum this one imitates: synthetic NIR folds onto NIR,
    /// synthetic VIS onto VIS. Used to route images to the model branch
    /// trained for the matching spectrum.
    pub fn canonical_real(self) -> Spectrum {
        match self {
            Spectrum::Nir | Spectrum::NirSynth => Spectrum::Nir,
            Spectrum::Vis | Spectrum::VisSynth => Spectrum::Vis,
        }
    }
}

impl fmt::Display for Spectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which eye the crop comes from. Identity and eye together form the class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Eye {
    Left,
    Right,
}

impl Eye {
    pub fn tag(self) -> &'static str {
        match self {
            Eye::Left => "L",
            Eye::Right => "R",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "L" => Ok(Eye::Left),
            "R" => Ok(Eye::Right),
            other => Err(Error::InvalidInput(format!(
                "unknown eye tag `{other}` (expected L or R)"
            ))),
        }
    }
}

/// A periocular crop: interleaved row-major pixels in [0, 1], 1 or 3
/// channels, plus capture metadata.
#[derive(Debug, Clone)]
pub struct SpectralImage {
    pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub spectrum: Spectrum,
    pub identity: u32,
    pub eye: Eye,
    pub capture_index: u32,
}

impl SpectralImage {
    /// Build from raw pixels, validating the value range and buffer size.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pixels: Vec<f32>,
        height: usize,
        width: usize,
        channels: usize,
        spectrum: Spectrum,
        identity: u32,
        eye: Eye,
        capture_index: u32,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::InvalidInput(format!(
                "pixel buffer has {} values, expected {}x{}x{} = {}",
                pixels.len(),
                height,
                width,
                channels,
                height * width * channels
            )));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidInput(
                "pixel values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(SpectralImage {
            pixels,
            height,
            width,
            channels,
            spectrum,
            identity,
            eye,
            capture_index,
        })
    }

    /// Raw interleaved pixels.
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Value of channel `c` at row `y`, column `x`.
    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Class key combining identity and eye, e.g. "017L".
    pub fn class_key(&self) -> String {
        format!("{:03}{}", self.identity, self.eye.tag())
    }

    /// Stable per-image key: class, spectrum and capture index.
    pub fn image_key(&self) -> String {
        format!(
            "id{:03}_{}_{}_c{:02}",
            self.identity,
            self.eye.tag(),
            self.spectrum.tag(),
            self.capture_index
        )
    }

    /// Rec.601 luma conversion; grayscale images are returned unchanged
    /// (cloned) so callers can rely on `channels == 1`.
    pub fn to_grayscale(&self) -> SpectralImage {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = Vec::with_capacity(self.height * self.width);
        for px in self.pixels.chunks_exact(3) {
            let y = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            out.push(y.clamp(0.0, 1.0));
        }
        SpectralImage {
            pixels: out,
            height: self.height,
            width: self.width,
            channels: 1,
            spectrum: self.spectrum,
            identity: self.identity,
            eye: self.eye,
            capture_index: self.capture_index,
        }
    }

    /// Separable bicubic resample (Keys kernel, a = -0.5) with clamped
    /// borders. Same-size resampling is an exact copy; results are clamped
    /// back into [0, 1].
    pub fn resize_bicubic(&self, new_height: usize, new_width: usize) -> Result<SpectralImage> {
        if new_height == 0 || new_width == 0 {
            return Err(Error::InvalidInput(
                "resize target must have positive dimensions".into(),
            ));
        }
        let c = self.channels;
        // Horizontal pass: [h, w, c] -> [h, new_w, c]
        let mid = resample_axis(
            &self.pixels,
            self.width,
            new_width,
            self.height,
            c,
            true,
        );
        // Vertical pass: [h, new_w, c] -> [new_h, new_w, c]
        let mut out = resample_axis(&mid, self.height, new_height, new_width, c, false);
        for v in out.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(SpectralImage {
            pixels: out,
            height: new_height,
            width: new_width,
            channels: c,
            spectrum: self.spectrum,
            identity: self.identity,
            eye: self.eye,
            capture_index: self.capture_index,
        })
    }

    /// Load a PNG or PGM file (by extension), attaching the given metadata.
    #[allow(clippy::too_many_arguments)]
    pub fn load(
        path: &Path,
        spectrum: Spectrum,
        identity: u32,
        eye: Eye,
        capture_index: u32,
    ) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        match ext.as_str() {
            "png" => Self::load_png(path, spectrum, identity, eye, capture_index),
            "pgm" => Self::load_pgm(path, spectrum, identity, eye, capture_index),
            other => Err(Error::InvalidInput(format!(
                "unsupported image extension `.{other}` for {} (png and pgm are supported)",
                path.display()
            ))),
        }
    }

    /// Load a PNG; 8-bit gray stays single-channel, everything else becomes
    /// RGB.
    pub fn load_png(
        path: &Path,
        spectrum: Spectrum,
        identity: u32,
        eye: Eye,
        capture_index: u32,
    ) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let (pixels, h, w, c) = match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                let px = g.into_raw().iter().map(|v| *v as f32 / 255.0).collect();
                (px, h, w, 1)
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let px = rgb.into_raw().iter().map(|v| *v as f32 / 255.0).collect();
                (px, h, w, 3)
            }
        };
        SpectralImage::new(pixels, h, w, c, spectrum, identity, eye, capture_index)
    }

    /// Save to PNG; single-channel images become 8-bit gray, three-channel
    /// images RGB. Quantization rounds to the nearest of 256 levels.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let res = if self.channels == 1 {
            let buf: Vec<u8> = self.pixels.iter().map(|v| to_u8(*v)).collect();
            image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
                .expect("buffer size checked at construction")
                .save(path)
        } else {
            let buf: Vec<u8> = self.pixels.iter().map(|v| to_u8(*v)).collect();
            image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
                .expect("buffer size checked at construction")
                .save(path)
        };
        res.map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Load a binary PGM (P5, maxval <= 255).
    pub fn load_pgm(
        path: &Path,
        spectrum: Spectrum,
        identity: u32,
        eye: Eye,
        capture_index: u32,
    ) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, h, data) = parse_pgm(&bytes).map_err(|m| Error::format(path, m))?;
        let pixels = data.iter().map(|v| *v as f32 / 255.0).collect();
        SpectralImage::new(pixels, h, w, 1, spectrum, identity, eye, capture_index)
    }

    /// Save as binary PGM (P5); color images are converted to grayscale.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let gray = self.to_grayscale();
        let mut out = format!("P5\n{} {}\n255\n", gray.width, gray.height).into_bytes();
        out.extend(
            gray.pixels
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Resample one axis with the bicubic kernel. `along_x` selects whether the
/// inner coordinate being resampled is the x axis (`lines` = rows) or the y
/// axis (`lines` = columns).
fn resample_axis(
    src: &[f32],
    src_len: usize,
    dst_len: usize,
    lines: usize,
    channels: usize,
    along_x: bool,
) -> Vec<f32> {
    let scale = src_len as f64 / dst_len as f64;
    let idx = |line: usize, pos: usize, c: usize| -> usize {
        if along_x {
            (line * src_len + pos) * channels + c
        } else {
            (pos * lines + line) * channels + c
        }
    };
    let out_idx = |line: usize, pos: usize, c: usize| -> usize {
        if along_x {
            (line * dst_len + pos) * channels + c
        } else {
            (pos * lines + line) * channels + c
        }
    };
    let mut out = vec![0f32; lines * dst_len * channels];
    // Precompute taps per destination position; identical for every line.
    let mut taps = Vec::with_capacity(dst_len);
    for d in 0..dst_len {
        let sx = (d as f64 + 0.5) * scale - 0.5;
        let x0 = sx.floor() as isize;
        let t = sx - x0 as f64;
        let weights = [
            cubic_keys(t + 1.0),
            cubic_keys(t),
            cubic_keys(1.0 - t),
            cubic_keys(2.0 - t),
        ];
        let positions = [
            (x0 - 1).clamp(0, src_len as isize - 1) as usize,
            x0.clamp(0, src_len as isize - 1) as usize,
            (x0 + 1).clamp(0, src_len as isize - 1) as usize,
            (x0 + 2).clamp(0, src_len as isize - 1) as usize,
        ];
        taps.push((positions, weights));
    }
    for line in 0..lines {
        for (d, (positions, weights)) in taps.iter().enumerate() {
            for c in 0..channels {
                let mut acc = 0.0f64;
                for (p, w) in positions.iter().zip(weights) {
                    acc += *w * src[idx(line, *p, c)] as f64;
                }
                out[out_idx(line, d, c)] = acc as f32;
            }
        }
    }
    out
}

/// Keys cubic convolution kernel with a = -0.5.
fn cubic_keys(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    // Tokenize the header: magic, width, height, maxval; '#' starts a
    // comment running to end of line. Pixel data begins after the single
    // whitespace byte that terminates the maxval token.
    let mut pos = 0usize;
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(format!("unsupported PGM magic `{}` (only binary P5)", tokens[0]));
    }
    let w: usize = tokens[1].parse().map_err(|_| "bad width".to_string())?;
    let h: usize = tokens[2].parse().map_err(|_| "bad height".to_string())?;
    let maxval: usize = tokens[3].parse().map_err(|_| "bad maxval".to_string())?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} out of supported range (1..=255)"));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h;
    if bytes.len() < pos + need {
        return Err(format!(
            "pixel data truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    let mut data = bytes[pos..pos + need].to_vec();
    if maxval != 255 {
        for v in data.iter_mut() {
            *v = ((*v as usize * 255) / maxval) as u8;
        }
    }
    Ok((w, h, data))
}

/// Descriptor families. `Embed` covers learned embedding vectors produced
/// outside this module (e.g. frozen identification backbones), so they flow
/// through the same comparison and scoring machinery as HOG/LBP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DescriptorKind {
    Hog,
    Lbp,
    Embed,
}

impl DescriptorKind {
    pub fn tag(self) -> &'static str {
        match self {
            DescriptorKind::Hog => "hog",
            DescriptorKind::Lbp => "lbp",
            DescriptorKind::Embed => "embed",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "hog" => Ok(DescriptorKind::Hog),
            "lbp" => Ok(DescriptorKind::Lbp),
            "embed" => Ok(DescriptorKind::Embed),
            other => Err(Error::InvalidInput(format!(
                "unknown descriptor kind {other:?} (expected hog|lbp|embed)"
            ))),
        }
    }
}

/// A fixed-length descriptor vector plus the hash of everything that
/// determined its layout (kind, image size, parameters). Distances refuse
/// to compare vectors with different hashes.
#[derive(Debug, Clone)]
pub struct Descriptor {
    pub kind: DescriptorKind,
    pub values: Vec<f32>,
    pub params_hash: u64,
}

const DESC_MAGIC: &[u8; 4] = b"NVD1";

impl Descriptor {
    /// Serialize: magic, kind tag, params_hash, then length-prefixed
    /// little-endian f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let tag = self.kind.tag().as_bytes();
        let mut out = Vec::with_capacity(4 + 1 + tag.len() + 8 + 4 + 4 * self.values.len());
        out.extend_from_slice(DESC_MAGIC);
        out.push(tag.len() as u8);
        out.extend_from_slice(tag);
        out.extend_from_slice(&self.params_hash.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Descriptor> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<Descriptor, String> {
        let take = |pos: &mut usize, n: usize| -> std::result::Result<&[u8], String> {
            if *pos + n > bytes.len() {
                return Err(format!("truncated at byte {}", *pos));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let mut pos = 0usize;
        if take(&mut pos, 4)? != DESC_MAGIC {
            return Err("not a descriptor file (bad magic)".into());
        }
        let tag_len = take(&mut pos, 1)?[0] as usize;
        let tag = std::str::from_utf8(take(&mut pos, tag_len)?)
            .map_err(|_| "descriptor kind tag is not UTF-8".to_string())?
            .to_string();
        let kind = DescriptorKind::from_tag(&tag).map_err(|e| e.to_string())?;
        let params_hash = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let raw = take(&mut pos, 4 * len)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - pos));
        }
        Ok(Descriptor {
            kind,
            values,
            params_hash,
        })
    }
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
