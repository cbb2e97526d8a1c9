//! Comparators and score bookkeeping.
//!
//! Histogram descriptors are compared with chi-squared, Euclidean, or cosine
//! distance, keypoint sets with mutual nearest-neighbor ratio matching.
//! Every score carries a polarity; distances are canonicalized by negation
//! onto one "higher means more genuine" axis before any evaluation, so DET
//! arithmetic never needs to guess which way a comparator points.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::descriptors::{Descriptor, KeypointSet};
use crate::error::{Error, Result};

/// Direction of a score axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    /// Higher values indicate a more likely genuine pair.
    Similarity,
    /// Lower values indicate a more likely genuine pair.
    Distance,
}

impl Polarity {
    pub fn tag(self) -> &'static str {
        match self {
            Polarity::Similarity => "similarity",
            Polarity::Distance => "distance",
        }
    }
}

/// One comparator output with its orientation.
#[derive(Debug, Clone)]
pub struct Score {
    pub value: f64,
    pub polarity: Polarity,
    pub comparator_id: &'static str,
}

impl Score {
    /// Value on the canonical similarity axis (distances negate).
    pub fn canonical(&self) -> f64 {
        match self.polarity {
            Polarity::Similarity => self.value,
            Polarity::Distance => -self.value,
        }
    }
}

fn check_comparable(a: &Descriptor, b: &Descriptor) -> Result<()> {
    if a.kind != b.kind {
        return Err(Error::DescriptorMismatch(format!(
            "cannot compare {} against {}",
            a.kind.tag(),
            b.kind.tag()
        )));
    }
    if a.params_hash != b.params_hash {
        return Err(Error::DescriptorMismatch(format!(
            "{} descriptors built under different parameters (hash {:016x} vs {:016x})",
            a.kind.tag(),
            a.params_hash,
            b.params_hash
        )));
    }
    if a.values.len() != b.values.len() {
        return Err(Error::DescriptorMismatch(format!(
            "{} descriptor lengths differ: {} vs {}",
            a.kind.tag(),
            a.values.len(),
            b.values.len()
        )));
    }
    Ok(())
}

/// Euclidean (L2) distance.
pub fn euclidean_distance(a: &Descriptor, b: &Descriptor) -> Result<Score> {
    check_comparable(a, b)?;
    let mut acc = 0f64;
    for (x, y) in a.values.iter().zip(&b.values) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    Ok(Score {
        value: acc.sqrt(),
        polarity: Polarity::Distance,
        comparator_id: "euclidean",
    })
}

/// Epsilon guarding empty histogram bins in the chi-squared denominator.
pub const CHI2_EPS: f64 = 1e-10;

/// Chi-squared histogram distance, `sum (x-y)^2 / (x+y+eps)`.
///
/// Inputs must be nonnegative (histograms or rectified activations).
pub fn chi2_distance(a: &Descriptor, b: &Descriptor) -> Result<Score> {
    check_comparable(a, b)?;
    let mut acc = 0f64;
    for (x, y) in a.values.iter().zip(&b.values) {
        if *x < 0.0 || *y < 0.0 {
            return Err(Error::InvalidInput(format!(
                "chi-squared distance needs nonnegative entries, got {} / {}",
                x, y
            )));
        }
        let (x, y) = (*x as f64, *y as f64);
        let d = x - y;
        acc += d * d / (x + y + CHI2_EPS);
    }
    Ok(Score {
        value: acc,
        polarity: Polarity::Distance,
        comparator_id: "chi2",
    })
}

/// Cosine distance, `1 - (a.b) / (|a||b|)`; zero vectors are rejected.
pub fn cosine_distance(a: &Descriptor, b: &Descriptor) -> Result<Score> {
    check_comparable(a, b)?;
    let mut dot = 0f64;
    let mut na = 0f64;
    let mut nb = 0f64;
    for (x, y) in a.values.iter().zip(&b.values) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput(
            "cosine distance is undefined for zero vectors".into(),
        ));
    }
    Ok(Score {
        value: 1.0 - dot / (na.sqrt() * nb.sqrt()),
        polarity: Polarity::Distance,
        comparator_id: "cosine",
    })
}

/// Default Lowe ratio for nearest/second-nearest keypoint matching.
pub const DEFAULT_MATCH_RATIO: f64 = 0.75;

/// Mutual nearest-neighbor keypoint matching normalized by the mean keypoint
/// count: `|pairs| / ((|A|+|B|)/2)`, in [0, 1].
///
/// A pair (i, j) counts when i's nearest gallery descriptor is j, j's
/// nearest probe descriptor is i, and both directions pass the Lowe ratio
/// test (nearest closer than `ratio` times the second nearest; exact
/// duplicates at distance zero always pass). Mutuality pairs each keypoint
/// at most once, which is what bounds the score by 1. Either set empty is a
/// defined zero score.
pub fn sift_match_score(a: &KeypointSet, b: &KeypointSet, ratio: f64) -> Result<Score> {
    if a.params_hash != b.params_hash {
        return Err(Error::DescriptorMismatch(format!(
            "keypoint sets built under different parameters (hash {:016x} vs {:016x})",
            a.params_hash, b.params_hash
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "match ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let (na, nb) = (a.keypoints.len(), b.keypoints.len());
    if na == 0 || nb == 0 {
        return Ok(Score {
            value: 0.0,
            polarity: Polarity::Similarity,
            comparator_id: "sift-match",
        });
    }

    // Squared descriptor distances, probe rows x gallery columns.
    let mut d2 = vec![0f64; na * nb];
    for (i, ka) in a.keypoints.iter().enumerate() {
        for (j, kb) in b.keypoints.iter().enumerate() {
            let mut acc = 0f64;
            for (x, y) in ka.descriptor.iter().zip(&kb.descriptor) {
                let d = (*x - *y) as f64;
                acc += d * d;
            }
            d2[i * nb + j] = acc;
        }
    }

    // Nearest and second-nearest along each axis; first index wins ties.
    let row_best = nearest_per_row(&d2, na, nb);
    let col_best = nearest_per_col(&d2, na, nb);
    let r2 = ratio * ratio;
    let passes = |d1: f64, d2nd: f64| d1 == 0.0 || d1 < r2 * d2nd;

    let mut matched = 0usize;
    for (i, &(j, d1, d2nd)) in row_best.iter().enumerate() {
        let (back, bd1, bd2) = col_best[j];
        if back == i && passes(d1, d2nd) && passes(bd1, bd2) {
            matched += 1;
        }
    }
    Ok(Score {
        value: matched as f64 / ((na + nb) as f64 / 2.0),
        polarity: Polarity::Similarity,
        comparator_id: "sift-match",
    })
}

fn nearest_per_row(d2: &[f64], rows: usize, cols: usize) -> Vec<(usize, f64, f64)> {
    (0..rows)
        .map(|i| {
            let mut best = (0usize, f64::INFINITY, f64::INFINITY);
            for j in 0..cols {
                let d = d2[i * cols + j];
                if d < best.1 {
                    best = (j, d, best.1);
                } else if d < best.2 {
                    best.2 = d;
                }
            }
            best
        })
        .collect()
}

fn nearest_per_col(d2: &[f64], rows: usize, cols: usize) -> Vec<(usize, f64, f64)> {
    (0..cols)
        .map(|j| {
            let mut best = (0usize, f64::INFINITY, f64::INFINITY);
            for i in 0..rows {
                let d = d2[i * cols + j];
                if d < best.1 {
                    best = (i, d, best.1);
                } else if d < best.2 {
                    best.2 = d;
                }
            }
            best
        })
        .collect()
}

/// Ground-truth label of one verification trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Genuine,
    Impostor,
}

impl TrialLabel {
    pub fn tag(self) -> &'static str {
        match self {
            TrialLabel::Genuine => "genuine",
            TrialLabel::Impostor => "impostor",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "genuine" => Ok(TrialLabel::Genuine),
            "impostor" => Ok(TrialLabel::Impostor),
            other => Err(Error::InvalidInput(format!(
                "unknown trial label {other:?} (expected genuine|impostor)"
            ))),
        }
    }
}

/// One scored verification trial, value on the canonical similarity axis.
#[derive(Debug, Clone)]
pub struct TrialScore {
    pub probe: String,
    pub gallery: String,
    pub label: TrialLabel,
    pub value: f64,
}

/// A full comparator run over a trial list. Values are always canonical
/// similarity; raw distances must be negated before entering a set.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub comparator: String,
    pub scores: Vec<TrialScore>,
}

impl ScoreSet {
    /// Serialize to the score file format: one record per line,
    /// `probe gallery comparator label score`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# probe gallery comparator label score (similarity polarity)\n");
        for t in &self.scores {
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                t.probe,
                t.gallery,
                self.comparator,
                t.label.tag(),
                t.value
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<ScoreSet> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|msg| Error::format(path, msg))
    }

    fn parse(text: &str) -> std::result::Result<ScoreSet, String> {
        let mut comparator: Option<String> = None;
        let mut scores = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            let [probe, gallery, comp, label, value] = fields.as_slice() else {
                return Err(format!(
                    "line {}: expected 5 fields `probe gallery comparator label score`, got {}",
                    idx + 1,
                    fields.len()
                ));
            };
            match &comparator {
                None => comparator = Some(comp.to_string()),
                Some(c) if c == comp => {}
                Some(c) => {
                    return Err(format!(
                        "line {}: mixed comparators in one score file ({c} vs {comp})",
                        idx + 1
                    ))
                }
            }
            scores.push(TrialScore {
                probe: probe.to_string(),
                gallery: gallery.to_string(),
                label: TrialLabel::from_tag(label).map_err(|e| e.to_string())?,
                value: value
                    .parse::<f64>()
                    .map_err(|e| format!("line {}: bad score {value:?}: {e}", idx + 1))?,
            });
        }
        let comparator = comparator.ok_or("score file holds no records")?;
        Ok(ScoreSet { comparator, scores })
    }

    /// Labeled canonical-similarity values in record order.
    pub fn labeled(&self) -> Vec<(TrialLabel, f64)> {
        self.scores.iter().map(|t| (t.label, t.value)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::{Descriptor, DescriptorKind, Keypoint};

    fn desc(values: Vec<f32>) -> Descriptor {
        Descriptor {
            kind: DescriptorKind::Lbp,
            values,
            params_hash: 42,
        }
    }

    #[test]
    fn chi2_matches_hand_computation() {
        // Orthogonal unit histograms: (1-0)^2/1 + (0-1)^2/1 = 2 up to eps.
        let a = desc(vec![1.0, 0.0]);
        let b = desc(vec![0.0, 1.0]);
        let d = chi2_distance(&a, &b).unwrap();
        assert_eq!(d.polarity, Polarity::Distance);
        assert!((d.value - 2.0).abs() < 1e-9, "{}", d.value);
        assert_eq!(chi2_distance(&a, &a).unwrap().value, 0.0);
    }

    #[test]
    fn chi2_rejects_negative_entries_and_is_symmetric() {
        let a = desc(vec![0.0, 0.3, 0.7, 0.0]);
        let b = desc(vec![0.0, 0.5, 0.5, 0.0]);
        let ab = chi2_distance(&a, &b).unwrap().value;
        let ba = chi2_distance(&b, &a).unwrap().value;
        assert_eq!(ab, ba);
        assert!(ab.is_finite() && ab > 0.0);
        let neg = desc(vec![0.1, -0.2, 0.3, 0.0]);
        assert!(chi2_distance(&a, &neg).is_err());
    }

    #[test]
    fn chi2_is_degree_one_homogeneous() {
        let a = desc((0..32).map(|i| 0.1 + (i as f32 * 7.0 + 1.0) % 5.0).collect());
        let b = desc((0..32).map(|i| 0.1 + (i as f32 * 3.0 + 2.0) % 4.0).collect());
        let base = chi2_distance(&a, &b).unwrap().value;
        let a2 = desc(a.values.iter().map(|v| v * 2.0).collect());
        let b2 = desc(b.values.iter().map(|v| v * 2.0).collect());
        let scaled = chi2_distance(&a2, &b2).unwrap().value;
        let rel = (scaled - 2.0 * base).abs() / (2.0 * base);
        assert!(rel < 1e-9, "relative deviation {rel}");
    }

    #[test]
    fn euclidean_and_cosine_basics() {
        let a = desc(vec![1.0, 0.0]);
        let b = desc(vec![0.0, 1.0]);
        let e = euclidean_distance(&a, &b).unwrap();
        assert!((e.value - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert_eq!(e.polarity, Polarity::Distance);
        assert!((cosine_distance(&a, &b).unwrap().value - 1.0).abs() < 1e-12);
        assert!(cosine_distance(&a, &a).unwrap().value.abs() < 1e-12);
        let m = desc(vec![-1.0, 0.0]);
        assert!((cosine_distance(&a, &m).unwrap().value - 2.0).abs() < 1e-12);
        let z = desc(vec![0.0, 0.0]);
        assert!(cosine_distance(&a, &z).is_err());
    }

    #[test]
    fn distances_are_symmetric_on_random_vectors() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = desc((0..64).map(|_| rng.random::<f32>()).collect());
            let b = desc((0..64).map(|_| rng.random::<f32>()).collect());
            assert_eq!(
                euclidean_distance(&a, &b).unwrap().value,
                euclidean_distance(&b, &a).unwrap().value
            );
            assert_eq!(
                chi2_distance(&a, &b).unwrap().value,
                chi2_distance(&b, &a).unwrap().value
            );
            assert_eq!(
                cosine_distance(&a, &b).unwrap().value,
                cosine_distance(&b, &a).unwrap().value
            );
        }
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let a = desc(vec![1.0, 2.0]);
        let mut b = desc(vec![1.0, 2.0]);
        b.params_hash = 43;
        assert!(chi2_distance(&a, &b).is_err());
        let mut c = desc(vec![1.0, 2.0, 3.0]);
        c.params_hash = 42;
        assert!(euclidean_distance(&a, &c).is_err());
        let mut h = desc(vec![1.0, 2.0]);
        h.kind = DescriptorKind::Hog;
        assert!(cosine_distance(&a, &h).is_err());
    }

    fn kp(descriptor: Vec<f32>) -> Keypoint {
        Keypoint {
            x: 0.0,
            y: 0.0,
            scale: 1.0,
            orientation: 0.0,
            descriptor,
        }
    }

    /// A unit vector along one of 128 axes: easy exact-distance control.
    fn axis(i: usize) -> Vec<f32> {
        let mut v = vec![0f32; 128];
        v[i] = 1.0;
        v
    }

    #[test]
    fn self_match_scores_one() {
        let set = KeypointSet {
            keypoints: (0..7).map(|i| kp(axis(i))).collect(),
            params_hash: 9,
        };
        let s = sift_match_score(&set, &set, DEFAULT_MATCH_RATIO).unwrap();
        assert_eq!(s.value, 1.0);
        assert_eq!(s.polarity, Polarity::Similarity);
    }

    #[test]
    fn match_score_normalizes_by_mean_count() {
        // 20 probe keypoints along axes 0..20; gallery holds exact twins of
        // the first 10 plus 20 fillers equidistant from everything else, so
        // exactly 10 mutual pairs survive: 10 / ((20+30)/2) = 0.4.
        let a = KeypointSet {
            keypoints: (0..20).map(|i| kp(axis(i))).collect(),
            params_hash: 9,
        };
        let mut gallery: Vec<Keypoint> = (0..10).map(|i| kp(axis(i))).collect();
        for i in 0..20 {
            gallery.push(kp(axis(40 + i)));
        }
        let b = KeypointSet {
            keypoints: gallery,
            params_hash: 9,
        };
        let score = sift_match_score(&a, &b, DEFAULT_MATCH_RATIO).unwrap().value;
        assert!((score - 0.4).abs() < 1e-12, "score {score}");
    }

    #[test]
    fn match_score_stays_in_unit_interval_under_duplicates() {
        // Many duplicate descriptors: mutuality still pairs each keypoint at
        // most once, so the score cannot exceed 1.
        let a = KeypointSet {
            keypoints: (0..12).map(|i| kp(axis(i % 3))).collect(),
            params_hash: 9,
        };
        let b = KeypointSet {
            keypoints: (0..4).map(|i| kp(axis(i % 3))).collect(),
            params_hash: 9,
        };
        let s = sift_match_score(&a, &b, DEFAULT_MATCH_RATIO).unwrap().value;
        assert!((0.0..=1.0).contains(&s), "score {s}");
    }

    #[test]
    fn empty_sets_score_zero_and_hash_mismatch_errors() {
        let empty = KeypointSet {
            keypoints: vec![],
            params_hash: 9,
        };
        let one = KeypointSet {
            keypoints: vec![kp(axis(0))],
            params_hash: 9,
        };
        assert_eq!(sift_match_score(&empty, &one, 0.75).unwrap().value, 0.0);
        assert_eq!(sift_match_score(&one, &empty, 0.75).unwrap().value, 0.0);
        let other = KeypointSet {
            keypoints: vec![kp(axis(0))],
            params_hash: 10,
        };
        assert!(sift_match_score(&one, &other, 0.75).is_err());
    }

    #[test]
    fn canonicalization_negates_distances_only() {
        let d = Score {
            value: 3.0,
            polarity: Polarity::Distance,
            comparator_id: "chi2",
        };
        let s = Score {
            value: 3.0,
            polarity: Polarity::Similarity,
            comparator_id: "sift-match",
        };
        assert_eq!(d.canonical(), -3.0);
        assert_eq!(s.canonical(), 3.0);
    }

    #[test]
    fn score_file_roundtrip() {
        let set = ScoreSet {
            comparator: "lbp-chi2".into(),
            scores: vec![
                TrialScore {
                    probe: "id001_L_nir_c10".into(),
                    gallery: "id001_L_vis_c11".into(),
                    label: TrialLabel::Genuine,
                    value: -0.125,
                },
                TrialScore {
                    probe: "id001_L_nir_c10".into(),
                    gallery: "id002_L_vis_c11".into(),
                    label: TrialLabel::Impostor,
                    value: -0.7251348345,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.txt");
        set.save(&path).unwrap();
        let back = ScoreSet::load(&path).unwrap();
        assert_eq!(back.comparator, set.comparator);
        assert_eq!(back.scores.len(), 2);
        assert_eq!(back.scores[0].label, TrialLabel::Genuine);
        assert_eq!(back.scores[0].value, -0.125);
        assert_eq!(back.scores[1].value, -0.7251348345);
        assert_eq!(back.scores[1].gallery, "id002_L_vis_c11");
    }

    #[test]
    fn malformed_score_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for (name, text) in [
            ("empty", "# just a comment\n"),
            ("fields", "a b lbp-chi2 genuine\n"),
            ("label", "a b lbp-chi2 sideways 0.5\n"),
            ("value", "a b lbp-chi2 genuine xyz\n"),
            ("mixed", "a b one genuine 0.5\na c two impostor 0.2\n"),
        ] {
            let path = dir.path().join(name);
            std::fs::write(&path, text).unwrap();
            assert!(ScoreSet::load(&path).is_err(), "{name} should fail");
        }
    }
}
