//! DET curve construction and the EER / GAR@FAR readouts.
//!
//! Scores must already be on the canonical similarity axis (higher = more
//! genuine). The curve is exact, not binned: one operating point per
//! distinct score value plus ±infinity sentinels, so every achievable
//! (FAR, FRR) trade-off appears and metric readouts have no quantization
//! error beyond the score granularity itself.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::matching::TrialLabel;

/// Threshold-indexed (FAR, FRR) table. At threshold t, acceptance means
/// score ≥ t: FAR(t) is the fraction of impostor scores ≥ t, FRR(t) the
/// fraction of genuine scores < t.
#[derive(Debug, Clone)]
pub struct DetCurve {
    pub thresholds: Vec<f64>,
    pub far: Vec<f64>,
    pub frr: Vec<f64>,
}

/// Build the DET curve from labeled canonical-similarity scores.
pub fn compute_det(labeled: &[(TrialLabel, f64)]) -> Result<DetCurve> {
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (label, value) in labeled {
        if !value.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite score {value} cannot enter a DET curve"
            )));
        }
        match label {
            TrialLabel::Genuine => genuine.push(*value),
            TrialLabel::Impostor => impostor.push(*value),
        }
    }
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::InvalidInput(format!(
            "DET curve needs both classes: {} genuine, {} impostor scores",
            genuine.len(),
            impostor.len()
        )));
    }
    genuine.sort_unstable_by(f64::total_cmp);
    impostor.sort_unstable_by(f64::total_cmp);

    let mut thresholds: Vec<f64> = genuine.iter().chain(&impostor).copied().collect();
    thresholds.sort_unstable_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);

    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
    let mut far = Vec::with_capacity(thresholds.len());
    let mut frr = Vec::with_capacity(thresholds.len());
    for t in &thresholds {
        // Sorted ascending: impostors ≥ t form the tail, genuines < t the head.
        let imp_ge = impostor.len() - impostor.partition_point(|v| v < t);
        let gen_lt = genuine.partition_point(|v| v < t);
        far.push(imp_ge as f64 / ni);
        frr.push(gen_lt as f64 / ng);
    }
    Ok(DetCurve {
        thresholds,
        far,
        frr,
    })
}

impl DetCurve {
    /// CSV rendering, `threshold,far,frr` with a header row. The sentinel
    /// rows print as `-inf` / `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,far,frr\n");
        for i in 0..self.thresholds.len() {
            let _ = writeln!(out, "{},{},{}", self.thresholds[i], self.far[i], self.frr[i]);
        }
        out
    }
}

/// Equal error rate: linear interpolation between the adjacent operating
/// points where FAR−FRR changes sign. Ties break toward the lower
/// threshold (the first point where the difference reaches zero).
pub fn eer(curve: &DetCurve) -> f64 {
    let d: Vec<f64> = curve
        .far
        .iter()
        .zip(&curve.frr)
        .map(|(a, b)| a - b)
        .collect();
    // d starts at +1 (sentinel) and ends at −1; it is non-increasing, so
    // the first index with d[i+1] ≤ 0 exists and has d[i] > 0.
    for i in 0..d.len() - 1 {
        if d[i + 1] <= 0.0 {
            let lambda = d[i] / (d[i] - d[i + 1]);
            return curve.far[i] + lambda * (curve.far[i + 1] - curve.far[i]);
        }
    }
    // Unreachable for well-formed curves; the final point has FAR=0, FRR=1.
    0.5
}

/// Genuine acceptance rate at a FAR ceiling: GAR = 1 − FRR at the first
/// (lowest) threshold whose FAR does not exceed `far_target`. Returns
/// (GAR, achieved FAR) so discretization on small impostor sets stays
/// visible.
pub fn gar_at_far(curve: &DetCurve, far_target: f64) -> Result<(f64, f64)> {
    if !(far_target > 0.0 && far_target < 1.0) {
        return Err(Error::Config(format!(
            "FAR target must lie in (0, 1), got {far_target}"
        )));
    }
    for i in 0..curve.thresholds.len() {
        if curve.far[i] <= far_target {
            return Ok((1.0 - curve.frr[i], curve.far[i]));
        }
    }
    // Unreachable: the +infinity sentinel has FAR = 0.
    Ok((0.0, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn labeled(genuine: &[f64], impostor: &[f64]) -> Vec<(TrialLabel, f64)> {
        genuine
            .iter()
            .map(|v| (TrialLabel::Genuine, *v))
            .chain(impostor.iter().map(|v| (TrialLabel::Impostor, *v)))
            .collect()
    }

    /// Exhaustive counting oracle: recompute FAR/FRR per threshold by
    /// direct comparison loops, and EER by the same crossing interpolation
    /// on the oracle table.
    fn oracle(genuine: &[f64], impostor: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
        let mut thresholds: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
        thresholds.sort_unstable_by(f64::total_cmp);
        thresholds.dedup();
        thresholds.insert(0, f64::NEG_INFINITY);
        thresholds.push(f64::INFINITY);
        let mut far = Vec::new();
        let mut frr = Vec::new();
        for t in &thresholds {
            far.push(impostor.iter().filter(|v| **v >= *t).count() as f64 / impostor.len() as f64);
            frr.push(genuine.iter().filter(|v| **v < *t).count() as f64 / genuine.len() as f64);
        }
        let mut e = 0.5;
        for i in 0..thresholds.len() - 1 {
            let d0 = far[i] - frr[i];
            let d1 = far[i + 1] - frr[i + 1];
            if d1 <= 0.0 {
                let lambda = d0 / (d0 - d1);
                e = far[i] + lambda * (far[i + 1] - far[i]);
                break;
            }
        }
        (thresholds, far, frr, e)
    }

    #[test]
    fn perfectly_separated_scores() {
        let l = labeled(&[0.9, 0.8], &[0.1, 0.2]);
        let curve = compute_det(&l).unwrap();
        assert_eq!(eer(&curve), 0.0);
        for target in [0.5, 0.01, 0.001] {
            let (gar, achieved) = gar_at_far(&curve, target).unwrap();
            assert_eq!(gar, 1.0);
            assert!(achieved <= target);
        }
    }

    #[test]
    fn identical_distributions_sit_on_the_diagonal() {
        let scores: Vec<f64> = (0..200).map(|i| (i % 100) as f64 / 100.0).collect();
        let l = labeled(&scores, &scores);
        let curve = compute_det(&l).unwrap();
        assert!((eer(&curve) - 0.5).abs() < 1e-12);
        let (gar, achieved) = gar_at_far(&curve, 0.01).unwrap();
        assert!((gar - achieved).abs() < 1e-12, "diagonal: GAR == FAR");
        assert!(gar <= 0.011 && gar > 0.0);
    }

    #[test]
    fn endpoints_are_the_det_sentinels() {
        let l = labeled(&[0.3, 0.6], &[0.2, 0.5]);
        let c = compute_det(&l).unwrap();
        assert_eq!((c.far[0], c.frr[0]), (1.0, 0.0));
        let last = c.thresholds.len() - 1;
        assert_eq!((c.far[last], c.frr[last]), (0.0, 1.0));
    }

    #[test]
    fn monotone_far_frr_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            // Integer grid scores force heavy ties.
            let genuine: Vec<f64> = (0..150).map(|_| rng.random_range(0..8) as f64).collect();
            let impostor: Vec<f64> = (0..150).map(|_| rng.random_range(0..8) as f64).collect();
            let c = compute_det(&labeled(&genuine, &impostor)).unwrap();
            for i in 1..c.thresholds.len() {
                assert!(c.far[i] <= c.far[i - 1], "FAR must be non-increasing");
                assert!(c.frr[i] >= c.frr[i - 1], "FRR must be non-decreasing");
            }
        }
    }

    #[test]
    fn matches_exhaustive_oracle_on_random_sets_including_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for round in 0..50 {
            let n = 40 + (round % 7) * 23;
            // Mix continuous scores and a tie-heavy lattice.
            let genuine: Vec<f64> = (0..n)
                .map(|i| {
                    if i % 3 == 0 {
                        rng.random_range(0..10) as f64 * 0.1
                    } else {
                        rng.random::<f64>() + 0.3
                    }
                })
                .collect();
            let impostor: Vec<f64> = (0..n + 30)
                .map(|i| {
                    if i % 4 == 0 {
                        rng.random_range(0..10) as f64 * 0.1
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect();
            let c = compute_det(&labeled(&genuine, &impostor)).unwrap();
            let (ot, ofar, ofrr, oe) = oracle(&genuine, &impostor);
            assert_eq!(c.thresholds, ot);
            for i in 0..ot.len() {
                assert!((c.far[i] - ofar[i]).abs() <= 1e-12);
                assert!((c.frr[i] - ofrr[i]).abs() <= 1e-12);
            }
            assert!((eer(&c) - oe).abs() <= 1e-12, "round {round}");
            for target in [0.01, 0.001, 0.25] {
                let (gar, achieved) = gar_at_far(&c, target).unwrap();
                // Oracle: best GAR over operating points with FAR ≤ target.
                let mut best = (0.0f64, 0.0f64);
                for i in 0..ot.len() {
                    if ofar[i] <= target {
                        best = (1.0 - ofrr[i], ofar[i]);
                        break;
                    }
                }
                assert!((gar - best.0).abs() <= 1e-12);
                assert!((achieved - best.1).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn two_gaussian_case_matches_oracle_to_1e12() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let gen_dist = Normal::new(1.0, 0.5).unwrap();
        let imp_dist = Normal::new(0.0, 0.5).unwrap();
        let genuine: Vec<f64> = (0..500).map(|_| gen_dist.sample(&mut rng)).collect();
        let impostor: Vec<f64> = (0..500).map(|_| imp_dist.sample(&mut rng)).collect();
        let c = compute_det(&labeled(&genuine, &impostor)).unwrap();
        let (_, _, _, oe) = oracle(&genuine, &impostor);
        assert!((eer(&c) - oe).abs() <= 1e-12);
        // d' = 2 puts the EER near Phi(-1) ~= 15.9%.
        assert!((eer(&c) - 0.1587).abs() < 0.05);
    }

    #[test]
    fn rejects_single_class_and_non_finite_scores() {
        assert!(compute_det(&labeled(&[0.5], &[])).is_err());
        assert!(compute_det(&labeled(&[], &[0.5])).is_err());
        assert!(compute_det(&labeled(&[f64::NAN], &[0.5])).is_err());
        assert!(compute_det(&labeled(&[0.5], &[f64::INFINITY])).is_err());
    }

    #[test]
    fn gar_target_domain_is_checked() {
        let c = compute_det(&labeled(&[0.9], &[0.1])).unwrap();
        assert!(gar_at_far(&c, 0.0).is_err());
        assert!(gar_at_far(&c, 1.0).is_err());
        assert!(gar_at_far(&c, -0.5).is_err());
        assert!(gar_at_far(&c, 0.5).is_ok());
    }

    #[test]
    fn csv_has_header_and_sentinel_rows() {
        let c = compute_det(&labeled(&[0.9], &[0.1])).unwrap();
        let csv = c.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "threshold,far,frr");
        assert!(lines[1].starts_with("-inf,"));
        assert!(lines.last().unwrap().starts_with("inf,"));
    }
}
