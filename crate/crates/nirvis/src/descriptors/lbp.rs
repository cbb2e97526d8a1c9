//! Local binary patterns with regional histograms.

use super::{fnv1a64, Descriptor, DescriptorKind, SpectralImage};
use crate::error::{Error, Result};

/// LBP parameters. The default operator is the basic 8-neighbor code at
/// radius 1 (the 8-connected ring), pooled over an 8x8 grid of regions.
#[derive(Debug, Clone, PartialEq)]
pub struct LbpParams {
    pub radius: usize,
    pub neighbors: usize,
    pub grid: (usize, usize),
}

impl Default for LbpParams {
    fn default() -> Self {
        LbpParams {
            radius: 1,
            neighbors: 8,
            grid: (8, 8),
        }
    }
}

impl LbpParams {
    /// Histogram bins per region.
    pub fn bins(&self) -> usize {
        1usize << self.neighbors
    }

    /// Total descriptor length: grid_y * grid_x * 2^neighbors.
    pub fn descriptor_len(&self) -> usize {
        self.grid.0 * self.grid.1 * self.bins()
    }

    fn hash(&self, height: usize, width: usize) -> u64 {
        let canon = format!(
            "lbp|h={height}|w={width}|r={}|p={}|grid={}x{}",
            self.radius, self.neighbors, self.grid.0, self.grid.1
        );
        fnv1a64(canon.as_bytes())
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.radius == 0 {
            return Err(Error::Config("lbp: radius must be positive".into()));
        }
        if self.neighbors == 0 || self.neighbors > 16 {
            return Err(Error::Config(format!(
                "lbp: neighbors must lie in 1..=16, got {}",
                self.neighbors
            )));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::Config("lbp: grid dimensions must be positive".into()));
        }
        if height <= 2 * self.radius || width <= 2 * self.radius {
            return Err(Error::InvalidInput(format!(
                "lbp: image {height}x{width} too small for radius {}",
                self.radius
            )));
        }
        Ok(())
    }
}

/// Neighbor offsets (dy, dx) in clockwise order starting at the top-left.
/// Radius 1 with 8 neighbors uses the exact 8-connected ring; other
/// configurations sample a circle (starting straight up, clockwise) with
/// bilinear interpolation.
fn neighbor_offsets(params: &LbpParams) -> Vec<(f64, f64)> {
    if params.radius == 1 && params.neighbors == 8 {
        return vec![
            (-1.0, -1.0),
            (-1.0, 0.0),
            (-1.0, 1.0),
            (0.0, 1.0),
            (1.0, 1.0),
            (1.0, 0.0),
            (1.0, -1.0),
            (0.0, -1.0),
        ];
    }
    let r = params.radius as f64;
    let p = params.neighbors as f64;
    (0..params.neighbors)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / p;
            // Straight up at k = 0, clockwise in image coordinates.
            (-r * angle.cos(), r * angle.sin())
        })
        .collect()
}

/// Bilinear sample with the image's own coordinates (no bounds overrun:
/// callers keep the ring inside the valid margin).
fn sample(gray: &SpectralImage, y: f64, x: f64) -> f32 {
    let y0 = y.floor();
    let x0 = x.floor();
    let ty = (y - y0) as f32;
    let tx = (x - x0) as f32;
    let (y0, x0) = (y0 as usize, x0 as usize);
    let y1 = (y0 + 1).min(gray.height - 1);
    let x1 = (x0 + 1).min(gray.width - 1);
    let v00 = gray.at(y0, x0, 0);
    let v01 = gray.at(y0, x1, 0);
    let v10 = gray.at(y1, x0, 0);
    let v11 = gray.at(y1, x1, 0);
    v00 * (1.0 - ty) * (1.0 - tx) + v01 * (1.0 - ty) * tx + v10 * ty * (1.0 - tx) + v11 * ty * tx
}

/// Compute the LBP code image (valid interior only) and pool region
/// histograms over a fixed grid. Each region histogram is L1-normalized to
/// sum 1; regions with no pixels stay all-zero.
pub fn lbp(image: &SpectralImage, params: &LbpParams) -> Result<Descriptor> {
    params.validate(image.height, image.width)?;
    let gray = image.to_grayscale();
    let r = params.radius;
    let (h, w) = (gray.height, gray.width);
    let (ch, cw) = (h - 2 * r, w - 2 * r); // code image size
    let offsets = neighbor_offsets(params);
    let integer_ring = params.radius == 1 && params.neighbors == 8;

    let mut codes = vec![0u16; ch * cw];
    for cy in 0..ch {
        let y = cy + r;
        for cx in 0..cw {
            let x = cx + r;
            let center = gray.at(y, x, 0);
            let mut code: u16 = 0;
            for (k, (dy, dx)) in offsets.iter().enumerate() {
                let v = if integer_ring {
                    gray.at(
                        (y as isize + *dy as isize) as usize,
                        (x as isize + *dx as isize) as usize,
                        0,
                    )
                } else {
                    sample(&gray, y as f64 + dy, x as f64 + dx)
                };
                if v >= center {
                    code |= 1 << k;
                }
            }
            codes[cy * cw + cx] = code;
        }
    }

    // Regional histograms over the code image.
    let bins = params.bins();
    let (gy, gx) = params.grid;
    let mut out = vec![0f32; gy * gx * bins];
    for ry in 0..gy {
        let y0 = ry * ch / gy;
        let y1 = (ry + 1) * ch / gy;
        for rx in 0..gx {
            let x0 = rx * cw / gx;
            let x1 = (rx + 1) * cw / gx;
            let base = (ry * gx + rx) * bins;
            let mut count = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    out[base + codes[y * cw + x] as usize] += 1.0;
                    count += 1;
                }
            }
            if count > 0 {
                let inv = 1.0 / count as f32;
                for v in out[base..base + bins].iter_mut() {
                    *v *= inv;
                }
            }
        }
    }

    Ok(Descriptor {
        kind: DescriptorKind::Lbp,
        values: out,
        params_hash: params.hash(h, w),
    })
}
