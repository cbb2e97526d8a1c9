//! Histogram of oriented gradients with block-wise L2-hys normalization.

use super::{fnv1a64, Descriptor, DescriptorKind, SpectralImage};
use crate::error::{Error, Result};

/// HOG parameters. Defaults follow the common periocular configuration:
/// 8x8-pixel cells, 2x2-cell blocks sliding one cell at a time, 9 unsigned
/// orientation bins, clipping at 0.2.
#[derive(Debug, Clone, PartialEq)]
pub struct HogParams {
    pub cell_size: usize,
    pub block_cells: usize,
    pub block_stride_cells: usize,
    pub bins: usize,
    pub clip: f32,
}

impl Default for HogParams {
    fn default() -> Self {
        HogParams {
            cell_size: 8,
            block_cells: 2,
            block_stride_cells: 1,
            bins: 9,
            clip: 0.2,
        }
    }
}

impl HogParams {
    /// Descriptor length for an image of the given size: blocks_y * blocks_x
    /// * block_cells^2 * bins, with cells_y = H / cell_size (floor).
    pub fn descriptor_len(&self, height: usize, width: usize) -> usize {
        let cy = height / self.cell_size;
        let cx = width / self.cell_size;
        if cy < self.block_cells || cx < self.block_cells {
            return 0;
        }
        let by = (cy - self.block_cells) / self.block_stride_cells + 1;
        let bx = (cx - self.block_cells) / self.block_stride_cells + 1;
        by * bx * self.block_cells * self.block_cells * self.bins
    }

    fn hash(&self, height: usize, width: usize) -> u64 {
        let canon = format!(
            "hog|h={height}|w={width}|cell={}|block={}|stride={}|bins={}|clip={}",
            self.cell_size, self.block_cells, self.block_stride_cells, self.bins, self.clip
        );
        fnv1a64(canon.as_bytes())
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.cell_size == 0 || self.block_cells == 0 || self.block_stride_cells == 0 {
            return Err(Error::Config(
                "hog: cell_size, block_cells and block_stride_cells must be positive".into(),
            ));
        }
        if self.bins == 0 {
            return Err(Error::Config("hog: bins must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.clip) {
            return Err(Error::Config(format!(
                "hog: clip must lie in [0, 1], got {}",
                self.clip
            )));
        }
        if self.descriptor_len(height, width) == 0 {
            return Err(Error::InvalidInput(format!(
                "hog: image {height}x{width} too small for {}x{}-cell blocks of {}px cells",
                self.block_cells, self.block_cells, self.cell_size
            )));
        }
        Ok(())
    }
}

/// Compute the HOG descriptor of an image (converted to grayscale first).
///
/// Gradients are central differences with clamped borders; orientations are
/// unsigned (mod 180 degrees) with bin centers at `i * 180/bins` degrees and
/// magnitude votes split linearly between the two nearest bins. Blocks are
/// L2-normalized, clipped at `clip`, then renormalized (L2-hys).
pub fn hog(image: &SpectralImage, params: &HogParams) -> Result<Descriptor> {
    params.validate(image.height, image.width)?;
    let gray = image.to_grayscale();
    let (h, w) = (gray.height, gray.width);
    let cell = params.cell_size;
    let bins = params.bins;
    let (cy, cx) = (h / cell, w / cell);
    let bin_width = 180.0 / bins as f32;

    // Per-cell orientation histograms.
    let mut cells = vec![0f32; cy * cx * bins];
    for y in 0..cy * cell {
        for x in 0..cx * cell {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            let gx = gray.at(y, xp, 0) - gray.at(y, xm, 0);
            let gy = gray.at(yp, x, 0) - gray.at(ym, x, 0);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut deg = gy.atan2(gx).to_degrees();
            if deg < 0.0 {
                deg += 180.0;
            }
            if deg >= 180.0 {
                deg -= 180.0;
            }
            let pos = deg / bin_width;
            let i0 = pos.floor() as usize % bins;
            let frac = pos - pos.floor();
            let i1 = (i0 + 1) % bins;
            let c = (y / cell) * cx + x / cell;
            cells[c * bins + i0] += mag * (1.0 - frac);
            cells[c * bins + i1] += mag * frac;
        }
    }

    // Block normalization.
    let bc = params.block_cells;
    let stride = params.block_stride_cells;
    let by = (cy - bc) / stride + 1;
    let bx = (cx - bc) / stride + 1;
    let block_len = bc * bc * bins;
    let mut out = Vec::with_capacity(by * bx * block_len);
    let mut block = vec![0f32; block_len];
    for byi in 0..by {
        for bxi in 0..bx {
            let mut k = 0;
            for dy in 0..bc {
                for dx in 0..bc {
                    let c = (byi * stride + dy) * cx + (bxi * stride + dx);
                    block[k..k + bins].copy_from_slice(&cells[c * bins..(c + 1) * bins]);
                    k += bins;
                }
            }
            l2_hys(&mut block, params.clip);
            out.extend_from_slice(&block);
        }
    }

    Ok(Descriptor {
        kind: DescriptorKind::Hog,
        values: out,
        params_hash: params.hash(h, w),
    })
}

/// L2 normalize, clip every component at `clip`, renormalize. All-zero
/// blocks stay zero.
fn l2_hys(v: &mut [f32], clip: f32) {
    const EPS: f32 = 1e-10;
    let norm = (v.iter().map(|x| x * x).sum::<f32>() + EPS).sqrt();
    for x in v.iter_mut() {
        *x /= norm;
        if *x > clip {
            *x = clip;
        }
    }
    let norm2 = (v.iter().map(|x| x * x).sum::<f32>() + EPS).sqrt();
    for x in v.iter_mut() {
        *x /= norm2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::{Eye, Spectrum};

    fn image_from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> SpectralImage {
        let mut px = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                px.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        SpectralImage::new(px, h, w, 1, Spectrum::Vis, 0, Eye::Left, 0).unwrap()
    }

    #[test]
    fn length_64x64_default_is_1764() {
        let p = HogParams::default();
        assert_eq!(p.descriptor_len(64, 64), 1764);
        let img = image_from_fn(64, 64, |y, x| ((y * 7 + x * 13) % 64) as f32 / 64.0);
        let d = hog(&img, &p).unwrap();
        assert_eq!(d.values.len(), 1764);
    }

    #[test]
    fn constant_image_gives_zero_descriptor() {
        let img = image_from_fn(64, 64, |_, _| 0.5);
        let d = hog(&img, &HogParams::default()).unwrap();
        assert!(d.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vertical_step_edge_concentrates_in_bin_zero() {
        // Dark left half, bright right half: gradients point along +x,
        // unsigned angle 0 -> every vote lands in bin 0.
        let img = image_from_fn(64, 64, |_, x| if x < 32 { 0.1 } else { 0.9 });
        let d = hog(&img, &HogParams::default()).unwrap();
        let bins = 9;
        let mut per_bin = vec![0f64; bins];
        for (i, v) in d.values.iter().enumerate() {
            per_bin[i % bins] += (*v as f64) * (*v as f64);
        }
        let total: f64 = per_bin.iter().sum();
        assert!(total > 0.0);
        assert!(
            per_bin[0] / total >= 0.9,
            "bin 0 carries {:.3} of the energy",
            per_bin[0] / total
        );
    }

    #[test]
    fn horizontal_edge_concentrates_in_quarter_turn_bin() {
        // Dark top, bright bottom: gradient along +y, angle 90 degrees.
        // With bin centers at i*20 degrees that is bin 4 (80..100 window
        // centered at 90 -> splits between 4 and 5; center hit exactly at
        // 90/20 = 4.5 ... so energy splits between bins 4 and 5 evenly).
        let img = image_from_fn(64, 64, |y, _| if y < 32 { 0.1 } else { 0.9 });
        let d = hog(&img, &HogParams::default()).unwrap();
        let bins = 9;
        let mut per_bin = vec![0f64; bins];
        for (i, v) in d.values.iter().enumerate() {
            per_bin[i % bins] += (*v as f64) * (*v as f64);
        }
        let total: f64 = per_bin.iter().sum();
        assert!((per_bin[4] + per_bin[5]) / total >= 0.9);
    }

    #[test]
    fn blocks_are_unit_norm_after_l2_hys_without_clipping() {
        // A gentle ramp never hits the 0.2 clip, so each block should be
        // exactly unit L2 norm (up to the epsilon).
        let img = image_from_fn(64, 64, |y, x| ((x + y) % 61) as f32 / 61.0);
        let d = hog(&img, &HogParams::default()).unwrap();
        let block_len = 2 * 2 * 9;
        for block in d.values.chunks_exact(block_len) {
            let n = block.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-3, "block norm {n}");
        }
    }

    #[test]
    fn params_hash_separates_image_sizes_and_settings() {
        let p = HogParams::default();
        let a = hog(&image_from_fn(64, 64, |y, x| ((y + x) % 7) as f32 / 7.0), &p).unwrap();
        let b = hog(&image_from_fn(32, 32, |y, x| ((y + x) % 7) as f32 / 7.0), &p).unwrap();
        assert_ne!(a.params_hash, b.params_hash);
        let mut p2 = HogParams::default();
        p2.bins = 12;
        let c = hog(&image_from_fn(64, 64, |y, x| ((y + x) % 7) as f32 / 7.0), &p2).unwrap();
        assert_ne!(a.params_hash, c.params_hash);
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = image_from_fn(8, 8, |_, _| 0.3);
        assert!(hog(&img, &HogParams::default()).is_err());
    }
}
