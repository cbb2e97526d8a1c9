//! Scale-invariant feature transform: DoG keypoints with 4x4x8 gradient
//! descriptors.
//!
//! The base image is doubled (the usual "-1 octave") before pyramid
//! construction so that small periocular crops still yield a useful number
//! of keypoints; reported coordinates and scales are mapped back to the
//! input image's frame.

use super::{fnv1a64, SpectralImage};
use crate::error::{Error, Result};

/// SIFT parameters (Lowe's defaults).
#[derive(Debug, Clone, PartialEq)]
pub struct SiftParams {
    /// Number of octaves (capped automatically so the top octave keeps a
    /// minimum side of 16 pixels).
    pub octaves: usize,
    /// Scales sampled per octave (s); each octave holds s+3 Gaussian levels.
    pub scales_per_octave: usize,
    /// Base blur of the first level of the first octave.
    pub sigma0: f64,
    /// DoG contrast threshold (per-layer, image values in [0, 1]).
    pub contrast_threshold: f64,
    /// Principal-curvature ratio limit for edge rejection.
    pub edge_ratio: f64,
    /// Descriptor component clamp before renormalization.
    pub descriptor_clamp: f32,
}

impl Default for SiftParams {
    fn default() -> Self {
        SiftParams {
            octaves: 4,
            scales_per_octave: 3,
            sigma0: 1.6,
            contrast_threshold: 0.03,
            edge_ratio: 10.0,
            descriptor_clamp: 0.2,
        }
    }
}

impl SiftParams {
    fn hash(&self) -> u64 {
        let canon = format!(
            "sift|o={}|s={}|sigma={}|contrast={}|edge={}|clamp={}",
            self.octaves,
            self.scales_per_octave,
            self.sigma0,
            self.contrast_threshold,
            self.edge_ratio,
            self.descriptor_clamp
        );
        fnv1a64(canon.as_bytes())
    }

    fn validate(&self) -> Result<()> {
        if self.octaves == 0 || self.scales_per_octave == 0 {
            return Err(Error::Config(
                "sift: octaves and scales_per_octave must be positive".into(),
            ));
        }
        if self.sigma0 <= 0.0 || self.contrast_threshold <= 0.0 || self.edge_ratio < 1.0 {
            return Err(Error::Config(
                "sift: sigma0 and contrast_threshold must be positive, edge_ratio >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One detected keypoint in input-image coordinates.
#[derive(Debug, Clone)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub scale: f32,
    /// Dominant gradient orientation in radians, [0, 2*pi).
    pub orientation: f32,
    /// 128-component descriptor, L2-normalized with clamping.
    pub descriptor: Vec<f32>,
}

/// All keypoints of one image plus the parameter hash that shaped them.
#[derive(Debug, Clone)]
pub struct KeypointSet {
    pub keypoints: Vec<Keypoint>,
    pub params_hash: u64,
}

impl KeypointSet {
    /// Serialize as record-per-line text: `x y scale orientation d0..d127`
    /// after a params_hash header comment.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "# nirvis keypoints params_hash={:016x}", self.params_hash);
        for kp in &self.keypoints {
            let _ = write!(out, "{} {} {} {}", kp.x, kp.y, kp.scale, kp.orientation);
            for d in &kp.descriptor {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<KeypointSet> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|msg| Error::format(path, msg))
    }

    fn parse(text: &str) -> std::result::Result<KeypointSet, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty keypoint file")?;
        let hash_hex = header
            .strip_prefix("# nirvis keypoints params_hash=")
            .ok_or("missing keypoint header")?;
        let params_hash =
            u64::from_str_radix(hash_hex, 16).map_err(|e| format!("bad params_hash: {e}"))?;
        let mut keypoints = Vec::new();
        for (idx, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: std::result::Result<Vec<f32>, _> =
                line.split(' ').map(str::parse::<f32>).collect();
            let fields = fields.map_err(|e| format!("line {}: {e}", idx + 2))?;
            if fields.len() != 4 + 128 {
                return Err(format!(
                    "line {}: expected 132 fields (x y scale orientation d0..d127), got {}",
                    idx + 2,
                    fields.len()
                ));
            }
            keypoints.push(Keypoint {
                x: fields[0],
                y: fields[1],
                scale: fields[2],
                orientation: fields[3],
                descriptor: fields[4..].to_vec(),
            });
        }
        Ok(KeypointSet {
            keypoints,
            params_hash,
        })
    }
}

const IMG_BORDER: isize = 5;
const MAX_REFINE_STEPS: usize = 5;
const ORI_BINS: usize = 36;
const DESC_D: usize = 4;
const DESC_BINS: usize = 8;

struct Level {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Level {
    #[inline]
    fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }
}

struct Octave {
    gauss: Vec<Level>,
    dog: Vec<Level>,
}

/// Detect keypoints and compute their descriptors.
pub fn sift(image: &SpectralImage, params: &SiftParams) -> Result<KeypointSet> {
    params.validate()?;
    if image.height.min(image.width) < 32 {
        return Err(Error::InvalidInput(format!(
            "sift: image {}x{} smaller than the 32px minimum side",
            image.height, image.width
        )));
    }
    let gray = image.to_grayscale();

    // Doubled base image, pre-blurred to sigma0 (assumed capture blur 0.5
    // becomes 1.0 after doubling).
    let doubled = gray
        .resize_bicubic(gray.height * 2, gray.width * 2)
        .expect("doubling a valid image cannot fail");
    let base_blur = (params.sigma0 * params.sigma0 - 1.0).max(0.01).sqrt();
    let mut base = Level {
        w: doubled.width,
        h: doubled.height,
        data: doubled.pixels().to_vec(),
    };
    base = gaussian_blur(&base, base_blur);

    // Cap octaves so the smallest level keeps a 16px side.
    let mut max_octaves = 1usize;
    let mut side = base.w.min(base.h);
    while side / 2 >= 16 && max_octaves < params.octaves {
        side /= 2;
        max_octaves += 1;
    }
    let n_octaves = max_octaves;
    let s = params.scales_per_octave;

    // Incremental blur amounts between consecutive levels.
    let k = 2f64.powf(1.0 / s as f64);
    let mut sig_inc = Vec::with_capacity(s + 3);
    for i in 1..s + 3 {
        let prev = params.sigma0 * k.powi(i as i32 - 1);
        let total = prev * k;
        sig_inc.push((total * total - prev * prev).sqrt());
    }

    let mut octaves = Vec::with_capacity(n_octaves);
    let mut current = base;
    for _ in 0..n_octaves {
        let mut gauss = Vec::with_capacity(s + 3);
        gauss.push(current);
        for inc in &sig_inc {
            let next = gaussian_blur(gauss.last().unwrap(), *inc);
            gauss.push(next);
        }
        let mut dog = Vec::with_capacity(s + 2);
        for i in 0..s + 2 {
            let a = &gauss[i];
            let b = &gauss[i + 1];
            let data: Vec<f32> = b.data.iter().zip(&a.data).map(|(x, y)| x - y).collect();
            dog.push(Level {
                w: a.w,
                h: a.h,
                data,
            });
        }
        // Next octave starts from the level with blur 2*sigma0.
        current = downsample2(&gauss[s]);
        octaves.push(Octave { gauss, dog });
    }

    let mut keypoints = Vec::new();
    let peak_thresh = 0.5 * params.contrast_threshold / s as f64;
    for (oct_idx, oct) in octaves.iter().enumerate() {
        let (w, h) = (oct.dog[0].w, oct.dog[0].h);
        for lvl in 1..=s {
            for y in IMG_BORDER..h as isize - IMG_BORDER {
                for x in IMG_BORDER..w as isize - IMG_BORDER {
                    let v = oct.dog[lvl].at(y as usize, x as usize);
                    if (v.abs() as f64) <= peak_thresh {
                        continue;
                    }
                    if !is_extremum(&oct.dog, lvl, y as usize, x as usize) {
                        continue;
                    }
                    if let Some(rk) = refine(&oct.dog, lvl, y, x, s, params) {
                        emit_keypoints(oct, oct_idx, &rk, params, &mut keypoints);
                    }
                }
            }
        }
    }

    Ok(KeypointSet {
        keypoints,
        params_hash: params.hash(),
    })
}

/// Separable Gaussian blur with replicated borders; kernel radius 4*sigma.
fn gaussian_blur(src: &Level, sigma: f64) -> Level {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / denom).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= ksum;
    }
    let (w, h) = (src.w, src.h);
    // Horizontal pass.
    let mut mid = vec![0f32; w * h];
    for y in 0..h {
        let row = &src.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0f64;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += *kv * row[sx] as f64;
            }
            mid[y * w + x] = acc as f32;
        }
    }
    // Vertical pass.
    let mut out = vec![0f32; w * h];
    for x in 0..w {
        for y in 0..h {
            let mut acc = 0f64;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += *kv * mid[sy * w + x] as f64;
            }
            out[y * w + x] = acc as f32;
        }
    }
    Level { w, h, data: out }
}

/// Decimate by 2 (every other pixel).
fn downsample2(src: &Level) -> Level {
    let (w, h) = (src.w / 2, src.h / 2);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(src.at(y * 2, x * 2));
        }
    }
    Level { w, h, data }
}

/// Strict 26-neighbor extremum test in the DoG stack.
fn is_extremum(dog: &[Level], lvl: usize, y: usize, x: usize) -> bool {
    let v = dog[lvl].at(y, x);
    let mut is_max = true;
    let mut is_min = true;
    for dl in -1isize..=1 {
        let level = &dog[(lvl as isize + dl) as usize];
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if dl == 0 && dy == 0 && dx == 0 {
                    continue;
                }
                let n = level.at((y as isize + dy) as usize, (x as isize + dx) as usize);
                if v <= n {
                    is_max = false;
                }
                if v >= n {
                    is_min = false;
                }
                if !is_max && !is_min {
                    return false;
                }
            }
        }
    }
    is_max || is_min
}

/// A refined keypoint in octave coordinates.
struct RefinedKp {
    x: f64,
    y: f64,
    level: f64, // fractional DoG level
}

/// Newton refinement of the extremum on the 3-d quadratic fit, with contrast
/// and edge-response rejection.
fn refine(
    dog: &[Level],
    mut lvl: usize,
    mut y: isize,
    mut x: isize,
    s: usize,
    params: &SiftParams,
) -> Option<RefinedKp> {
    let (w, h) = (dog[0].w as isize, dog[0].h as isize);
    let mut offset = [0f64; 3]; // (x, y, level)
    let mut converged = false;
    for _ in 0..MAX_REFINE_STEPS {
        let d = |l: usize, yy: isize, xx: isize| dog[l].at(yy as usize, xx as usize) as f64;
        let (l, yy, xx) = (lvl, y, x);

        let gx = (d(l, yy, xx + 1) - d(l, yy, xx - 1)) / 2.0;
        let gy = (d(l, yy + 1, xx) - d(l, yy - 1, xx)) / 2.0;
        let gs = (d(l + 1, yy, xx) - d(l - 1, yy, xx)) / 2.0;

        let dxx = d(l, yy, xx + 1) + d(l, yy, xx - 1) - 2.0 * d(l, yy, xx);
        let dyy = d(l, yy + 1, xx) + d(l, yy - 1, xx) - 2.0 * d(l, yy, xx);
        let dss = d(l + 1, yy, xx) + d(l - 1, yy, xx) - 2.0 * d(l, yy, xx);
        let dxy = (d(l, yy + 1, xx + 1) - d(l, yy + 1, xx - 1) - d(l, yy - 1, xx + 1)
            + d(l, yy - 1, xx - 1))
            / 4.0;
        let dxs = (d(l + 1, yy, xx + 1) - d(l + 1, yy, xx - 1) - d(l - 1, yy, xx + 1)
            + d(l - 1, yy, xx - 1))
            / 4.0;
        let dys = (d(l + 1, yy + 1, xx) - d(l + 1, yy - 1, xx) - d(l - 1, yy + 1, xx)
            + d(l - 1, yy - 1, xx))
            / 4.0;

        // Solve H * off = -g by Cramer's rule.
        let det = dxx * (dyy * dss - dys * dys) - dxy * (dxy * dss - dys * dxs)
            + dxs * (dxy * dys - dyy * dxs);
        if det.abs() < 1e-12 {
            return None;
        }
        let inv = 1.0 / det;
        let (b0, b1, b2) = (-gx, -gy, -gs);
        let ox = inv
            * (b0 * (dyy * dss - dys * dys) - dxy * (b1 * dss - dys * b2)
                + dxs * (b1 * dys - dyy * b2));
        let oy = inv
            * (dxx * (b1 * dss - dys * b2) - b0 * (dxy * dss - dys * dxs)
                + dxs * (dxy * b2 - b1 * dxs));
        let os = inv
            * (dxx * (dyy * b2 - b1 * dys) - dxy * (dxy * b2 - b1 * dxs)
                + b0 * (dxy * dys - dyy * dxs));
        offset = [ox, oy, os];

        if ox.abs() < 0.5 && oy.abs() < 0.5 && os.abs() < 0.5 {
            converged = true;
            break;
        }
        x += ox.round() as isize;
        y += oy.round() as isize;
        let nl = lvl as isize + os.round() as isize;
        if nl < 1
            || nl as usize > s
            || x < IMG_BORDER
            || x >= w - IMG_BORDER
            || y < IMG_BORDER
            || y >= h - IMG_BORDER
        {
            return None;
        }
        lvl = nl as usize;
    }
    if !converged {
        return None;
    }

    let d = |l: usize, yy: isize, xx: isize| dog[l].at(yy as usize, xx as usize) as f64;
    let gx = (d(lvl, y, x + 1) - d(lvl, y, x - 1)) / 2.0;
    let gy = (d(lvl, y + 1, x) - d(lvl, y - 1, x)) / 2.0;
    let gs = (d(lvl + 1, y, x) - d(lvl - 1, y, x)) / 2.0;
    let contrast =
        d(lvl, y, x) + 0.5 * (gx * offset[0] + gy * offset[1] + gs * offset[2]);
    if contrast.abs() * (s as f64) < params.contrast_threshold {
        return None;
    }

    // Edge response on the 2x2 spatial Hessian.
    let dxx = d(lvl, y, x + 1) + d(lvl, y, x - 1) - 2.0 * d(lvl, y, x);
    let dyy = d(lvl, y + 1, x) + d(lvl, y - 1, x) - 2.0 * d(lvl, y, x);
    let dxy = (d(lvl, y + 1, x + 1) - d(lvl, y + 1, x - 1) - d(lvl, y - 1, x + 1)
        + d(lvl, y - 1, x - 1))
        / 4.0;
    let tr = dxx + dyy;
    let det2 = dxx * dyy - dxy * dxy;
    let r = params.edge_ratio;
    if det2 <= 0.0 || tr * tr * r >= det2 * (r + 1.0) * (r + 1.0) {
        return None;
    }

    Some(RefinedKp {
        x: x as f64 + offset[0],
        y: y as f64 + offset[1],
        level: lvl as f64 + offset[2],
    })
}

/// Assign orientations and emit one descriptor per dominant peak.
fn emit_keypoints(
    oct: &Octave,
    oct_idx: usize,
    rk: &RefinedKp,
    params: &SiftParams,
    out: &mut Vec<Keypoint>,
) {
    let s = params.scales_per_octave;
    // Blur of the keypoint relative to this octave.
    let sigma_rel = params.sigma0 * 2f64.powf(rk.level / s as f64);
    let gauss_lvl = (rk.level.round() as isize).clamp(0, s as isize + 2) as usize;
    let img = &oct.gauss[gauss_lvl];

    // Orientation histogram.
    let sigma_ori = 1.5 * sigma_rel;
    let radius = (3.0 * sigma_ori).round() as isize;
    let (cx, cy) = (rk.x.round() as isize, rk.y.round() as isize);
    let mut hist = [0f64; ORI_BINS];
    let denom = 2.0 * sigma_ori * sigma_ori;
    for dy in -radius..=radius {
        let yy = cy + dy;
        if yy < 1 || yy >= img.h as isize - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let xx = cx + dx;
            if xx < 1 || xx >= img.w as isize - 1 {
                continue;
            }
            let gx = (img.at(yy as usize, xx as usize + 1)
                - img.at(yy as usize, xx as usize - 1)) as f64;
            let gy = (img.at(yy as usize + 1, xx as usize)
                - img.at(yy as usize - 1, xx as usize)) as f64;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let weight = (-((dx * dx + dy * dy) as f64) / denom).exp();
            let mut angle = gy.atan2(gx);
            if angle < 0.0 {
                angle += 2.0 * std::f64::consts::PI;
            }
            let bin =
                ((angle / (2.0 * std::f64::consts::PI) * ORI_BINS as f64).floor() as usize)
                    % ORI_BINS;
            hist[bin] += weight * mag;
        }
    }
    // Circular [1,4,6,4,1]/16 smoothing.
    let smoothed: Vec<f64> = (0..ORI_BINS)
        .map(|i| {
            let g = |o: isize| hist[((i as isize + o).rem_euclid(ORI_BINS as isize)) as usize];
            (g(-2) + g(2) + 4.0 * (g(-1) + g(1)) + 6.0 * g(0)) / 16.0
        })
        .collect();
    let max = smoothed.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return;
    }

    for i in 0..ORI_BINS {
        let left = smoothed[(i + ORI_BINS - 1) % ORI_BINS];
        let right = smoothed[(i + 1) % ORI_BINS];
        let v = smoothed[i];
        if v <= left || v <= right || v < 0.8 * max {
            continue;
        }
        // Parabolic peak interpolation.
        let delta = 0.5 * (left - right) / (left - 2.0 * v + right);
        let angle = (i as f64 + 0.5 + delta) * (2.0 * std::f64::consts::PI / ORI_BINS as f64);
        let angle = angle.rem_euclid(2.0 * std::f64::consts::PI);

        if let Some(desc) = describe(img, rk, sigma_rel, angle, params) {
            // Map back to input-image coordinates: octave upscaling minus
            // the initial doubling.
            let scale_map = 2f64.powi(oct_idx as i32) / 2.0;
            out.push(Keypoint {
                x: (rk.x * scale_map) as f32,
                y: (rk.y * scale_map) as f32,
                scale: (sigma_rel * scale_map) as f32,
                orientation: angle as f32,
                descriptor: desc,
            });
        }
    }
}

/// 4x4 spatial grid x 8 orientation bins with trilinear interpolation and
/// Gaussian windowing, normalized with clamping.
fn describe(
    img: &Level,
    rk: &RefinedKp,
    sigma_rel: f64,
    orientation: f64,
    params: &SiftParams,
) -> Option<Vec<f32>> {
    let d = DESC_D;
    let n = DESC_BINS;
    let hist_width = 3.0 * sigma_rel;
    let radius = (hist_width * std::f64::consts::SQRT_2 * (d as f64 + 1.0) * 0.5).round() as isize;
    let (cx, cy) = (rk.x.round() as isize, rk.y.round() as isize);
    let cos_t = orientation.cos() / hist_width;
    let sin_t = orientation.sin() / hist_width;
    let bins_per_rad = n as f64 / (2.0 * std::f64::consts::PI);
    let weight_denom = 0.5 * (d * d) as f64;

    let mut hist = vec![0f64; d * d * n];
    let mut any = false;
    for dy in -radius..=radius {
        let yy = cy + dy;
        if yy < 1 || yy >= img.h as isize - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let xx = cx + dx;
            if xx < 1 || xx >= img.w as isize - 1 {
                continue;
            }
            let c_rot = (dx as f64) * cos_t + (dy as f64) * sin_t;
            let r_rot = -(dx as f64) * sin_t + (dy as f64) * cos_t;
            let rbin = r_rot + d as f64 / 2.0 - 0.5;
            let cbin = c_rot + d as f64 / 2.0 - 0.5;
            if rbin <= -1.0 || rbin >= d as f64 || cbin <= -1.0 || cbin >= d as f64 {
                continue;
            }
            let gx = (img.at(yy as usize, xx as usize + 1)
                - img.at(yy as usize, xx as usize - 1)) as f64;
            let gy = (img.at(yy as usize + 1, xx as usize)
                - img.at(yy as usize - 1, xx as usize)) as f64;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut angle = gy.atan2(gx) - orientation;
            angle = angle.rem_euclid(2.0 * std::f64::consts::PI);
            let obin = angle * bins_per_rad;
            let weight = (-(c_rot * c_rot + r_rot * r_rot) / weight_denom).exp();
            trilinear_vote(&mut hist, d, n, rbin, cbin, obin, weight * mag);
            any = true;
        }
    }
    if !any {
        return None;
    }

    let mut desc: Vec<f32> = hist.iter().map(|v| *v as f32).collect();
    let norm = desc.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm <= 0.0 {
        return None;
    }
    for v in desc.iter_mut() {
        *v /= norm;
        if *v > params.descriptor_clamp {
            *v = params.descriptor_clamp;
        }
    }
    let norm2 = desc.iter().map(|v| v * v).sum::<f32>().sqrt();
    for v in desc.iter_mut() {
        *v /= norm2;
    }
    Some(desc)
}

/// Distribute one weighted vote over the 8 surrounding (row, col,
/// orientation) bins; spatial bins outside the 4x4 grid are dropped, the
/// orientation axis wraps.
fn trilinear_vote(hist: &mut [f64], d: usize, n: usize, rbin: f64, cbin: f64, obin: f64, w: f64) {
    let r0 = rbin.floor();
    let c0 = cbin.floor();
    let o0 = obin.floor();
    let dr = rbin - r0;
    let dc = cbin - c0;
    let dob = obin - o0;
    let r0 = r0 as isize;
    let c0 = c0 as isize;
    let o0 = o0 as isize;
    for (ri, rw) in [(r0, 1.0 - dr), (r0 + 1, dr)] {
        if ri < 0 || ri >= d as isize {
            continue;
        }
        for (ci, cw) in [(c0, 1.0 - dc), (c0 + 1, dc)] {
            if ci < 0 || ci >= d as isize {
                continue;
            }
            for (oi, ow) in [(o0, 1.0 - dob), (o0 + 1, dob)] {
                let oi = oi.rem_euclid(n as isize) as usize;
                hist[(ri as usize * d + ci as usize) * n + oi] += w * rw * cw * ow;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::{Eye, Spectrum};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth random blob field: plenty of scale-space structure.
    fn blob_image(h: usize, w: usize, seed: u64) -> SpectralImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut px = vec![0.5f32; h * w];
        for _ in 0..18 {
            let cx = rng.random::<f64>() * w as f64;
            let cy = rng.random::<f64>() * h as f64;
            let sigma = 2.0 + rng.random::<f64>() * 6.0;
            let amp = (rng.random::<f64>() - 0.5) * 0.8;
            for y in 0..h {
                for x in 0..w {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    px[y * w + x] += (amp * (-d2 / (2.0 * sigma * sigma)).exp()) as f32;
                }
            }
        }
        for v in px.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        SpectralImage::new(px, h, w, 1, Spectrum::Vis, 0, Eye::Left, 0).unwrap()
    }

    /// Exact 90-degree rotation (pure index permutation, no resampling).
    fn rot90(img: &SpectralImage) -> SpectralImage {
        let (h, w) = (img.height, img.width);
        let mut px = vec![0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                // output(y', x') = input(h-1-x', y')
                px[x * h + (h - 1 - y)] = img.at(y, x, 0);
            }
        }
        SpectralImage::new(px, w, h, 1, img.spectrum, img.identity, img.eye, img.capture_index)
            .unwrap()
    }

    #[test]
    fn textured_image_yields_keypoints_with_valid_descriptors() {
        let img = blob_image(96, 96, 7);
        let ks = sift(&img, &SiftParams::default()).unwrap();
        assert!(
            ks.keypoints.len() >= 10,
            "expected a healthy keypoint count, got {}",
            ks.keypoints.len()
        );
        for kp in &ks.keypoints {
            assert_eq!(kp.descriptor.len(), 128);
            let norm = kp.descriptor.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-3, "descriptor norm {norm}");
            assert!(kp.x >= 0.0 && kp.x < 96.0 && kp.y >= 0.0 && kp.y < 96.0);
            assert!(kp.scale > 0.0);
        }
    }

    #[test]
    fn flat_image_yields_no_keypoints() {
        let img = SpectralImage::new(
            vec![0.5; 64 * 64],
            64,
            64,
            1,
            Spectrum::Vis,
            0,
            Eye::Left,
            0,
        )
        .unwrap();
        let ks = sift(&img, &SiftParams::default()).unwrap();
        assert!(ks.keypoints.is_empty());
    }

    #[test]
    fn detection_is_deterministic() {
        let img = blob_image(64, 64, 3);
        let a = sift(&img, &SiftParams::default()).unwrap();
        let b = sift(&img, &SiftParams::default()).unwrap();
        assert_eq!(a.keypoints.len(), b.keypoints.len());
        for (ka, kb) in a.keypoints.iter().zip(&b.keypoints) {
            assert_eq!(ka.x, kb.x);
            assert_eq!(ka.y, kb.y);
            assert_eq!(ka.descriptor, kb.descriptor);
        }
    }

    #[test]
    fn rotating_ninety_degrees_repeats_keypoint_locations() {
        let img = blob_image(96, 96, 11);
        let rot = rot90(&img);
        let a = sift(&img, &SiftParams::default()).unwrap();
        let b = sift(&rot, &SiftParams::default()).unwrap();
        assert!(!a.keypoints.is_empty() && !b.keypoints.is_empty());

        let h = img.height as f32;
        let mut repeated = 0usize;
        for ka in &a.keypoints {
            // Through rot90: (x, y) -> (h-1-y, x).
            let (px, py) = (h - 1.0 - ka.y, ka.x);
            let hit = b.keypoints.iter().any(|kb| {
                let d2 = (kb.x - px).powi(2) + (kb.y - py).powi(2);
                d2 <= 4.0 && (kb.scale / ka.scale).ln().abs() < 0.7
            });
            if hit {
                repeated += 1;
            }
        }
        let rate = repeated as f64 / a.keypoints.len() as f64;
        assert!(
            rate >= 0.7,
            "repeatability {rate:.2} below 0.7 ({repeated}/{})",
            a.keypoints.len()
        );
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = blob_image(24, 24, 1);
        assert!(sift(&img, &SiftParams::default()).is_err());
    }

    #[test]
    fn keypoint_file_roundtrip_is_exact() {
        let img = blob_image(64, 64, 5);
        let ks = sift(&img, &SiftParams::default()).unwrap();
        assert!(!ks.keypoints.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kps.txt");
        ks.save(&path).unwrap();
        let back = KeypointSet::load(&path).unwrap();
        assert_eq!(back.params_hash, ks.params_hash);
        assert_eq!(back.keypoints.len(), ks.keypoints.len());
        for (a, b) in ks.keypoints.iter().zip(&back.keypoints) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.y, b.y);
            assert_eq!(a.scale, b.scale);
            assert_eq!(a.orientation, b.orientation);
            assert_eq!(a.descriptor, b.descriptor);
        }
    }
}
