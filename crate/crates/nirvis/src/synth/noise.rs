//! Deterministic band-limited noise fields.
//!
//! All noise is a pure function of (seed, coordinates): lattice values come
//! from hashing the integer cell coordinates, so any sample can be evaluated
//! at any point without storing a grid. That keeps captures translatable
//! (the texture moves rigidly with the face) and the whole dataset
//! reproducible from one integer.

/// FNV-1a over the seed and lattice coordinates.
fn hash2(seed: u64, x: i64, y: i64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed
        .to_le_bytes()
        .into_iter()
        .chain(x.to_le_bytes())
        .chain(y.to_le_bytes())
    {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Map a hash to [0, 1).
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in [-1, 1] with the given cell size.
pub fn value_noise(seed: u64, x: f64, y: f64, period: f64) -> f64 {
    let (gx, gy) = (x / period, y / period);
    let (x0, y0) = (gx.floor(), gy.floor());
    let (tx, ty) = (smooth(gx - x0), smooth(gy - y0));
    let (x0, y0) = (x0 as i64, y0 as i64);
    let v = |dx: i64, dy: i64| 2.0 * unit(hash2(seed, x0 + dx, y0 + dy)) - 1.0;
    let top = v(0, 0) * (1.0 - tx) + v(1, 0) * tx;
    let bot = v(0, 1) * (1.0 - tx) + v(1, 1) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Two-octave value noise in [-1, 1] (periods `base` and `base/2`).
pub fn fbm2(seed: u64, x: f64, y: f64, base: f64) -> f64 {
    (value_noise(seed, x, y, base) + 0.5 * value_noise(seed ^ 0x9e37_79b9, x, y, base * 0.5))
        / 1.5
}

/// Smooth periodic angular noise in [-1, 1]: `sectors` lattice values
/// around the circle, wrap-interpolated, an extra radial octave mixed in.
pub fn radial_streaks(seed: u64, theta: f64, rho: f64, sectors: usize) -> f64 {
    let s = sectors as f64;
    let a = (theta / (2.0 * std::f64::consts::PI)).rem_euclid(1.0) * s;
    let a0 = a.floor();
    let t = smooth(a - a0);
    let i0 = a0 as i64 % sectors as i64;
    let i1 = (i0 + 1) % sectors as i64;
    let coarse = (2.0 * unit(hash2(seed, i0, 0)) - 1.0) * (1.0 - t)
        + (2.0 * unit(hash2(seed, i1, 0)) - 1.0) * t;
    // The fine octave samples on a circle embedded in the plane, which
    // keeps it seamless across the theta = 0 wrap.
    let fine = value_noise(
        seed ^ 0x51ed_270b,
        theta.cos() * 2.5 + 7.3,
        theta.sin() * 2.5 + rho * 6.0,
        1.0,
    );
    (coarse + 0.4 * fine) / 1.4
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_deterministic_and_bounded() {
        for i in 0..200 {
            let (x, y) = (i as f64 * 0.37, i as f64 * 0.71);
            let a = fbm2(42, x, y, 8.0);
            let b = fbm2(42, x, y, 8.0);
            assert_eq!(a, b);
            assert!((-1.0..=1.0).contains(&a), "{a}");
            let r = radial_streaks(7, x, y.fract(), 24);
            assert!((-1.0..=1.0).contains(&r), "{r}");
        }
    }

    #[test]
    fn different_seeds_decorrelate() {
        let mut same = 0;
        for i in 0..100 {
            let (x, y) = (i as f64 * 0.31, i as f64 * 0.53);
            if (fbm2(1, x, y, 8.0) - fbm2(2, x, y, 8.0)).abs() < 1e-3 {
                same += 1;
            }
        }
        assert!(same < 5, "seeds should produce distinct fields ({same} collisions)");
    }

    #[test]
    fn noise_is_continuous_across_cells() {
        // Sample tightly across a lattice boundary: no jumps.
        for k in 0..50 {
            let x = 7.999 + k as f64 * 0.0001;
            let a = value_noise(9, x, 3.3, 2.0);
            let b = value_noise(9, x + 0.0001, 3.3, 2.0);
            assert!((a - b).abs() < 0.01, "jump at {x}: {a} vs {b}");
        }
    }

    #[test]
    fn angular_noise_wraps_seamlessly() {
        let tau = 2.0 * std::f64::consts::PI;
        let a = radial_streaks(5, tau - 1e-6, 0.5, 24);
        let b = radial_streaks(5, 1e-6, 0.5, 24);
        assert!((a - b).abs() < 0.01, "wrap discontinuity: {a} vs {b}");
    }
}
