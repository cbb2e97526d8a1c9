//! Layered periocular renderer.
//!
//! A capture is composed back-to-front from soft-edged analytic shapes:
//! skin with a band-limited texture field, brow band, palpebral opening
//! (two parabolic lid curves), sclera, iris disk with radial streaks,
//! pupil, lid strokes and a corneal glint. The VIS and NIR members of a
//! pair are composited from the *same* geometry evaluated at the same
//! face coordinates, so they are pixel-aligned by construction; only
//! albedos and texture transfer differ between spectra. Every region
//! boundary is a single soft transition with solid contrast in *both*
//! spectra (even when the contrast flips sign, as it does at the
//! iris/sclera border), so edge maps extracted from either spectrum
//! trace the same pixel loci.
//!
//! The NIR channel is not an affine function of the VIS channel:
//!  * iris albedo rises with the melanin proxy while VIS albedo falls,
//!  * skin texture enters through an even function (2t^2 - 1) at reduced
//!    contrast, which breaks per-pixel monotonicity and with it the local
//!    ordering that binary-pattern descriptors rely on,
//!  * a global gamma shift bends mid-tones.
//! A spectrum translator therefore has to learn a region-conditional,
//! genuinely nonlinear map rather than a lookup table.

use crate::descriptors::Eye;

use super::noise::{fbm2, radial_streaks};
use super::IdentityParams;

/// Fixed VIS -> NIR channel map applied during composition.
///
/// The transfer operates on render layers (region masks and texture
/// fields), not on the flat VIS raster: a per-pixel map could not
/// attenuate texture contrast without also flattening region boundaries.
#[derive(Debug, Clone, Copy)]
pub struct SpectralTransfer {
    /// NIR iris albedo at melanin 0.
    pub iris_base: f64,
    /// NIR iris albedo gained per unit melanin (brightening with melanin,
    /// opposite sign to the VIS channel).
    pub iris_melanin_gain: f64,
    /// Multiplier on skin texture contrast (less visible in NIR).
    pub skin_attenuation: f64,
    /// Base sclera albedo in NIR (darker than VIS).
    pub sclera_albedo: f64,
    /// Global gamma applied to NIR layer values. Applied per layer
    /// rather than to the finished raster so that boundary anti-aliasing
    /// stays linear in coverage: the blend of two gamma-shifted albedos
    /// crosses their midpoint exactly where the VIS blend does, keeping
    /// isophote-based segmentations of the two spectra pixel-identical.
    pub gamma: f64,
}

impl Default for SpectralTransfer {
    fn default() -> Self {
        SpectralTransfer {
            iris_base: 0.78,
            iris_melanin_gain: 0.12,
            skin_attenuation: 0.55,
            sclera_albedo: 0.52,
            gamma: 0.90,
        }
    }
}

/// Per-capture geometric variation, shared verbatim by both spectra.
#[derive(Debug, Clone, Copy)]
pub(super) struct CaptureGeometry {
    /// Rigid translation of the whole face, in base-scale pixels.
    pub dx: f64,
    pub dy: f64,
    /// Physiological pupil dilation factor.
    pub pupil_scale: f64,
    /// Horizontal glint drift, in base-scale pixels.
    pub highlight_shift: f64,
}

/// Smoothstep of a signed distance: 0 below -aa/2, 1 above +aa/2.
fn sstep(x: f64, aa: f64) -> f64 {
    let t = (x / aa + 0.5).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Render the VIS and NIR members of one capture in a single pass.
///
/// Identity geometry is expressed in 64-pixel base units and scaled, so
/// the same identity renders consistently at any resolution. Returns
/// `(vis, nir)` rasters in [0, 1], row-major, one channel.
pub(super) fn render_faces(
    id: &IdentityParams,
    cap: &CaptureGeometry,
    transfer: &SpectralTransfer,
    size: usize,
) -> (Vec<f32>, Vec<f32>) {
    let s = size as f64 / 64.0;
    let aa = s.max(1.0);
    let cx = (32.0 + id.center_dx) * s;
    let cy = (34.0 + id.center_dy) * s;
    let w_e = id.eye_halfwidth * s;
    let h_up = id.aperture_upper * s;
    let h_lo = id.aperture_lower * s;
    let r_ix = id.iris_radius * s;
    let r_iy = r_ix * id.iris_ellipticity;
    // Clamp the dilated pupil clear of the lash stroke bands (not just the
    // lid curves): a pupil reaching into a stroke's shadow would merge with
    // it in dark-region segmentations.
    let lid_clearance = (h_up.min(h_lo) - 2.8 * s).max(1.5 * s);
    let rho_p = (id.pupil_frac * cap.pupil_scale).min(lid_clearance / r_iy);
    // The glint sits on the iris, clear of both the pupil and the limbus,
    // so it never perturbs a region boundary.
    let glint_x = cx - 0.50 * r_ix + cap.highlight_shift * s;
    let glint_y = cy + 0.45 * r_iy;
    let glint_sigma = 0.8 * s;

    let nir_skin_base = 0.66;
    let vis_iris_base = 0.62 - 0.30 * id.melanin;
    let nir_iris_base = transfer.iris_base + transfer.iris_melanin_gain * id.melanin;

    let mut vis_px = vec![0.0f32; size * size];
    let mut nir_px = vec![0.0f32; size * size];

    for py in 0..size {
        for px in 0..size {
            // Face coordinates: the rigid capture translation moves the
            // whole face (shapes and texture together); right eyes mirror
            // the left-eye geometry horizontally.
            let mut fx = px as f64 - cap.dx * s;
            let fy = py as f64 - cap.dy * s;
            if id.eye == Eye::Right {
                fx = (size as f64 - 1.0) - fx;
            }
            // Base-unit coordinates keep textures resolution-independent.
            let (ux, uy) = (fx / s, fy / s);

            // Skin with texture and a mild vertical shade. NIR sees the
            // texture through a folded (even, non-monotone) function at
            // reduced contrast: ridges where the visible texture crosses
            // its midline, as subsurface scattering flattens pigment but
            // not relief.
            let t_skin = fbm2(id.texture_seed, ux, uy, 5.0);
            let shade = -0.05 * ((fy - cy) / size as f64);
            let gamma = |v: f64| v.max(0.0).powf(transfer.gamma);
            let mut vis = id.skin_tone + 0.07 * t_skin + shade;
            let mut nir = gamma(
                nir_skin_base
                    + 0.07 * transfer.skin_attenuation * (2.0 * t_skin.abs() - 1.0)
                    + 0.5 * shade,
            );

            // Brow: a soft parabolic band above the eye, lower-contrast
            // against skin in NIR than in VIS.
            let xh = (fx - cx) / w_e;
            let brow_y = cy - id.brow_offset * s - 2.0 * s * (1.0 - xh * xh);
            let brow_half = id.brow_thickness * s * (1.0 - 0.25 * xh.abs().min(1.4));
            let a_brow =
                sstep(brow_half - (fy - brow_y).abs(), aa) * sstep(1.3 - xh.abs(), 0.3);
            vis = vis * (1.0 - a_brow) + id.skin_tone * 0.40 * a_brow;
            nir = nir * (1.0 - a_brow) + gamma(nir_skin_base * 0.52) * a_brow;

            // Palpebral opening between two parabolic lid curves.
            let y_up = cy - h_up * (1.0 - xh * xh);
            let y_lo = cy + h_lo * (1.0 - xh * xh);
            let a_open = sstep(fy - y_up, aa) * sstep(y_lo - fy, aa);

            if a_open > 0.0 {
                let d_c = (((fx - cx) / w_e).powi(2)
                    + ((fy - cy) / h_up.max(h_lo)).powi(2))
                .sqrt();
                let t_scl = fbm2(id.texture_seed ^ 0xa5a5, ux, uy, 5.0);
                let scl_vis = 0.88 - 0.05 * d_c + 0.02 * t_scl;
                let scl_nir = gamma(transfer.sclera_albedo - 0.04 * d_c + 0.02 * t_scl);

                // Iris: same streak field in both spectra (the structure
                // survives the spectrum change; its base albedo does not).
                let ex = (fx - cx) / r_ix;
                let ey = (fy - cy) / r_iy;
                let rho = (ex * ex + ey * ey).sqrt();
                let a_iris = sstep(1.0 - rho, aa / r_ix);
                let mut eye_vis = scl_vis;
                let mut eye_nir = scl_nir;
                if a_iris > 0.0 {
                    let theta = ey.atan2(ex);
                    // Streaks fade out near the pupil and the limbus,
                    // keeping both boundaries clean single transitions.
                    let streak = radial_streaks(id.texture_seed ^ 0x33, theta, rho, 24)
                        * (0.35 + 0.65 * rho.min(1.0))
                        * sstep(rho - rho_p - 0.18, 0.12)
                        * sstep(0.92 - rho, 0.12);
                    let iris_vis = vis_iris_base + 0.06 * streak;
                    let iris_nir = gamma(nir_iris_base + 0.06 * streak);
                    eye_vis = eye_vis * (1.0 - a_iris) + iris_vis * a_iris;
                    eye_nir = eye_nir * (1.0 - a_iris) + iris_nir * a_iris;
                    let a_pup = sstep(rho_p - rho, aa / r_ix);
                    eye_vis = eye_vis * (1.0 - a_pup) + 0.05 * a_pup;
                    eye_nir = eye_nir * (1.0 - a_pup) + gamma(0.05) * a_pup;
                }
                vis = vis * (1.0 - a_open) + eye_vis * a_open;
                nir = nir * (1.0 - a_open) + eye_nir * a_open;

                // Corneal glint, same position in both spectra.
                let d2 = ((fx - glint_x).powi(2) + (fy - glint_y).powi(2))
                    / (glint_sigma * glint_sigma);
                let glint = (-0.5 * d2).exp() * a_open;
                vis += 0.55 * glint;
                nir += 0.52 * glint;
            }

            // Lid strokes and crease, drawn identically in both spectra so
            // every structural edge exists in both.
            let lash_u = sstep(1.4 * s - (fy - y_up).abs(), aa) * sstep(1.05 - xh.abs(), 0.15);
            let lash_l = sstep(1.1 * s - (fy - y_lo).abs(), aa) * sstep(1.02 - xh.abs(), 0.15);
            let crease = sstep(0.9 * s - (fy - (y_up - 3.5 * s)).abs(), aa)
                * sstep(0.95 - xh.abs(), 0.2);
            let dark = (1.0 - 0.55 * lash_u) * (1.0 - 0.45 * lash_l) * (1.0 - 0.35 * crease);
            vis *= dark;
            nir *= dark;

            let vis = vis.clamp(0.002, 0.998);
            let nir = nir.clamp(0.002, 0.998);
            let idx = py * size + px;
            vis_px[idx] = vis as f32;
            nir_px[idx] = nir as f32;
        }
    }

    (vis_px, nir_px)
}
