//! Linear logistic regression over comparator scores.
//!
//! Scores arrive on the canonical similarity axis, get z-scored with
//! statistics frozen from the training set, and a class-balanced
//! regularized log-likelihood is maximized by deterministic gradient ascent
//! (zero initialization, backtracking line search). The fused score is an
//! affine function of the inputs, so it is itself a similarity score.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matching::TrialLabel;

/// Default L2 regularization strength on the weights (bias excluded).
pub const DEFAULT_FUSION_REG: f64 = 1e-4;

const GRAD_TOL: f64 = 1e-8;
const MAX_ITERS: usize = 10_000;

/// A trained fusion rule: `fused = w0 + Σ wᵢ·(sᵢ − meanᵢ)/stdᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    /// Comparator names in column order (informational; filled by callers
    /// that track them).
    pub comparators: Vec<String>,
    pub w0: f64,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub reg: f64,
    /// Gradient-ascent iterations actually run.
    pub iterations: usize,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Solve `A x = b` for a small symmetric positive-definite matrix by
/// Gaussian elimination with partial pivoting. `a` is consumed.
fn solve_spd(a: &mut [f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|i, j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            x.swap(col, pivot);
        }
        let p = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            x[row] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = x[col];
        for j in col + 1..n {
            acc -= a[col * n + j] * x[j];
        }
        x[col] = acc / a[col * n + col];
    }
    x
}

/// Fit the fusion model on trials × k canonical-similarity scores.
///
/// The likelihood is class-balanced: each class contributes with weight
/// 1/(2·class count), so the wildly unequal genuine/impostor counts of the
/// verification protocol do not swamp the genuine term.
pub fn train_fusion(
    scores: &[Vec<f64>],
    labels: &[TrialLabel],
    reg: f64,
) -> Result<FusionModel> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "scores ({}) and labels ({}) differ in length",
            scores.len(),
            labels.len()
        )));
    }
    let k = scores.first().map(Vec::len).unwrap_or(0);
    if k == 0 {
        return Err(Error::InvalidInput(
            "fusion needs at least one comparator column".into(),
        ));
    }
    if let Some(bad) = scores.iter().position(|row| row.len() != k) {
        return Err(Error::InvalidInput(format!(
            "trial {bad} has {} scores, expected {k}",
            scores[bad].len()
        )));
    }
    let ng = labels.iter().filter(|l| **l == TrialLabel::Genuine).count();
    let ni = labels.len() - ng;
    if ng == 0 || ni == 0 {
        return Err(Error::InvalidInput(format!(
            "fusion training needs both classes: {ng} genuine, {ni} impostor"
        )));
    }
    if reg < 0.0 {
        return Err(Error::Config(format!("regularization must be ≥ 0, got {reg}")));
    }

    // Standardization statistics from the training set.
    let n = scores.len() as f64;
    let mut means = vec![0f64; k];
    for row in scores {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in means.iter_mut() {
        *m /= n;
    }
    let mut stds = vec![0f64; k];
    for row in scores {
        for j in 0..k {
            let d = row[j] - means[j];
            stds[j] += d * d;
        }
    }
    for s in stds.iter_mut() {
        *s = (*s / n).sqrt();
        if *s == 0.0 {
            *s = 1.0; // constant column carries no information; z = 0
        }
    }
    let z: Vec<Vec<f64>> = scores
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - means[j]) / stds[j])
                .collect()
        })
        .collect();

    // Per-trial likelihood weight: balanced classes.
    let weight_of = |l: TrialLabel| match l {
        TrialLabel::Genuine => 0.5 / ng as f64,
        TrialLabel::Impostor => 0.5 / ni as f64,
    };

    let objective = |w0: f64, w: &[f64]| -> f64 {
        let mut j_val = 0f64;
        for (row, label) in z.iter().zip(labels) {
            let s: f64 = w0 + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            let ll = match label {
                TrialLabel::Genuine => -softplus(-s),
                TrialLabel::Impostor => -softplus(s),
            };
            j_val += weight_of(*label) * ll;
        }
        j_val - 0.5 * reg * w.iter().map(|v| v * v).sum::<f64>()
    };

    // Damped Newton ascent. The regularized objective is strictly concave,
    // so the optimum is unique and a first-order method would reach the
    // same point — but far too slowly once the sigmoids saturate, so the
    // ascent direction is preconditioned with the exact (k+1)×(k+1)
    // Hessian. Zero initialization and a deterministic line search keep the
    // fit reproducible.
    let dim = k + 1; // bias first, then weights
    let mut w0 = 0f64;
    let mut w = vec![0f64; k];
    let mut iterations = 0usize;
    while iterations < MAX_ITERS {
        // Gradient and negated Hessian of the balanced likelihood.
        let mut g = vec![0f64; dim];
        let mut h = vec![0f64; dim * dim];
        for (row, label) in z.iter().zip(labels) {
            let s: f64 = w0 + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let p = sigmoid(s);
            let wt = weight_of(*label);
            let coeff = wt
                * match label {
                    TrialLabel::Genuine => 1.0 - p,
                    TrialLabel::Impostor => -p,
                };
            g[0] += coeff;
            for (j, zj) in row.iter().enumerate() {
                g[j + 1] += coeff * zj;
            }
            let curv = wt * p * (1.0 - p);
            h[0] += curv;
            for (j, zj) in row.iter().enumerate() {
                h[j + 1] += curv * zj;
                h[(j + 1) * dim] += curv * zj;
                for (l, zl) in row.iter().enumerate() {
                    h[(j + 1) * dim + l + 1] += curv * zj * zl;
                }
            }
        }
        for j in 0..k {
            g[j + 1] -= reg * w[j];
            h[(j + 1) * dim + j + 1] += reg;
        }
        // Floor the diagonal so fully saturated data stays solvable.
        for j in 0..dim {
            h[j * dim + j] += 1e-12;
        }
        let gnorm2: f64 = g.iter().map(|v| v * v).sum();
        if gnorm2.sqrt() < GRAD_TOL {
            break;
        }

        let dir = solve_spd(&mut h, &g, dim);
        let slope: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        debug_assert!(slope > 0.0, "Newton direction must be an ascent direction");

        let j_here = objective(w0, &w);
        let mut step = 1.0f64;
        let mut accepted = false;
        for _ in 0..60 {
            let cand0 = w0 + step * dir[0];
            let cand: Vec<f64> = w
                .iter()
                .zip(&dir[1..])
                .map(|(wj, dj)| wj + step * dj)
                .collect();
            if objective(cand0, &cand) >= j_here + 1e-4 * step * slope {
                w0 = cand0;
                w = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break; // numerical floor: no ascent step improves the objective
        }
    }

    Ok(FusionModel {
        comparators: Vec::new(),
        w0,
        weights: w,
        means,
        stds,
        reg,
        iterations,
    })
}

impl FusionModel {
    /// Fuse one trial's comparator scores.
    pub fn fuse(&self, scores: &[f64]) -> Result<f64> {
        if scores.len() != self.weights.len() {
            return Err(Error::InvalidInput(format!(
                "fusion model expects {} scores, got {}",
                self.weights.len(),
                scores.len()
            )));
        }
        let mut acc = self.w0;
        for j in 0..scores.len() {
            acc += self.weights[j] * (scores[j] - self.means[j]) / self.stds[j];
        }
        Ok(acc)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::from("# nirvis fusion model v1\n");
        let _ = writeln!(out, "comparators {}", self.comparators.join(","));
        let _ = writeln!(out, "reg {}", self.reg);
        let _ = writeln!(out, "iterations {}", self.iterations);
        let _ = writeln!(out, "w0 {}", self.w0);
        let _ = writeln!(out, "weights {}", join(&self.weights));
        let _ = writeln!(out, "means {}", join(&self.means));
        let _ = writeln!(out, "stds {}", join(&self.stds));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<FusionModel> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|msg| Error::format(path, msg))
    }

    fn parse(text: &str) -> std::result::Result<FusionModel, String> {
        let mut fields: std::collections::HashMap<&str, &str> = std::collections::HashMap::new();
        for line in text.lines() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| format!("bad line {line:?}"))?;
            fields.insert(key, value);
        }
        let get = |k: &str| fields.get(k).copied().ok_or(format!("missing field {k}"));
        let floats = |s: &str| -> std::result::Result<Vec<f64>, String> {
            s.split(',')
                .map(|v| v.parse::<f64>().map_err(|e| format!("bad number {v:?}: {e}")))
                .collect()
        };
        let comparators: Vec<String> = match get("comparators")? {
            "" => Vec::new(),
            s => s.split(',').map(str::to_string).collect(),
        };
        let model = FusionModel {
            comparators,
            reg: get("reg")?.parse().map_err(|e| format!("bad reg: {e}"))?,
            iterations: get("iterations")?
                .parse()
                .map_err(|e| format!("bad iterations: {e}"))?,
            w0: get("w0")?.parse().map_err(|e| format!("bad w0: {e}"))?,
            weights: floats(get("weights")?)?,
            means: floats(get("means")?)?,
            stds: floats(get("stds")?)?,
        };
        if model.weights.len() != model.means.len() || model.means.len() != model.stds.len() {
            return Err("weights/means/stds lengths disagree".into());
        }
        Ok(model)
    }
}

/// Fuse a full score matrix (trials × k) into one similarity score per
/// trial.
pub fn apply_fusion(model: &FusionModel, scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    scores.iter().map(|row| model.fuse(row)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::det::{compute_det, eer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Two-class scores: genuine N(1, 0.5), impostor N(0, 0.5), k columns
    /// drawn independently.
    fn two_gaussian(
        n_per_class: usize,
        k: usize,
        seed: u64,
    ) -> (Vec<Vec<f64>>, Vec<TrialLabel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen_dist = Normal::new(1.0, 0.5).unwrap();
        let imp_dist = Normal::new(0.0, 0.5).unwrap();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n_per_class {
            scores.push((0..k).map(|_| gen_dist.sample(&mut rng)).collect());
            labels.push(TrialLabel::Genuine);
        }
        for _ in 0..n_per_class {
            scores.push((0..k).map(|_| imp_dist.sample(&mut rng)).collect());
            labels.push(TrialLabel::Impostor);
        }
        (scores, labels)
    }

    #[test]
    fn informative_comparator_gets_positive_weight() {
        let (scores, labels) = two_gaussian(300, 1, 3);
        let model = train_fusion(&scores, &labels, DEFAULT_FUSION_REG).unwrap();
        assert!(model.weights[0] > 0.0, "weight {}", model.weights[0]);
        assert!(model.iterations <= MAX_ITERS);
    }

    #[test]
    fn duplicated_comparators_share_weight() {
        let (single, labels) = two_gaussian(300, 1, 5);
        let scores: Vec<Vec<f64>> = single.iter().map(|r| vec![r[0], r[0]]).collect();
        let model = train_fusion(&scores, &labels, DEFAULT_FUSION_REG).unwrap();
        assert!(
            (model.weights[0] - model.weights[1]).abs() < 1e-6,
            "{:?}",
            model.weights
        );
    }

    #[test]
    fn fusing_independent_comparators_beats_each_alone() {
        let (train, train_labels) = two_gaussian(5000, 2, 11);
        let (held, held_labels) = two_gaussian(5000, 2, 12);
        let model = train_fusion(&train, &train_labels, DEFAULT_FUSION_REG).unwrap();

        let labeled_col = |col: usize| -> Vec<(TrialLabel, f64)> {
            held_labels
                .iter()
                .zip(&held)
                .map(|(l, row)| (*l, row[col]))
                .collect()
        };
        let eer0 = eer(&compute_det(&labeled_col(0)).unwrap());
        let eer1 = eer(&compute_det(&labeled_col(1)).unwrap());
        let fused = apply_fusion(&model, &held).unwrap();
        let fused_labeled: Vec<(TrialLabel, f64)> = held_labels
            .iter()
            .zip(&fused)
            .map(|(l, v)| (*l, *v))
            .collect();
        let eer_fused = eer(&compute_det(&fused_labeled).unwrap());
        assert!(
            eer_fused < eer0.min(eer1),
            "fused {eer_fused:.4} vs individual {eer0:.4}/{eer1:.4}"
        );
    }

    #[test]
    fn zero_weights_yield_constant_bias() {
        let model = FusionModel {
            comparators: vec![],
            w0: 0.75,
            weights: vec![0.0, 0.0],
            means: vec![1.0, -1.0],
            stds: vec![2.0, 3.0],
            reg: 0.0,
            iterations: 0,
        };
        let out = apply_fusion(&model, &[vec![5.0, 5.0], vec![-2.0, 0.1]]).unwrap();
        assert_eq!(out, vec![0.75, 0.75]);
    }

    #[test]
    fn identity_standardization_passes_scores_through() {
        let model = FusionModel {
            comparators: vec![],
            w0: 0.0,
            weights: vec![1.0],
            means: vec![0.0],
            stds: vec![1.0],
            reg: 0.0,
            iterations: 0,
        };
        let out = apply_fusion(&model, &[vec![0.25], vec![-3.5]]).unwrap();
        assert_eq!(out, vec![0.25, -3.5]);
    }

    #[test]
    fn single_weight_preserves_comparator_ranking() {
        let (scores, _) = two_gaussian(50, 2, 8);
        let model = FusionModel {
            comparators: vec![],
            w0: 0.3,
            weights: vec![1.0, 0.0],
            means: vec![0.2, 0.9],
            stds: vec![0.7, 1.3],
            reg: 0.0,
            iterations: 0,
        };
        let fused = apply_fusion(&model, &scores).unwrap();
        let mut by_fused: Vec<usize> = (0..scores.len()).collect();
        by_fused.sort_by(|a, b| fused[*a].total_cmp(&fused[*b]));
        let mut by_col: Vec<usize> = (0..scores.len()).collect();
        by_col.sort_by(|a, b| scores[*a][0].total_cmp(&scores[*b][0]));
        assert_eq!(by_fused, by_col);
    }

    #[test]
    fn ranking_is_invariant_under_affine_restandardization() {
        let (scores, labels) = two_gaussian(400, 2, 21);
        let transformed: Vec<Vec<f64>> = scores
            .iter()
            .map(|r| vec![3.0 * r[0] - 7.0, 0.25 * r[1] + 2.0])
            .collect();
        let m1 = train_fusion(&scores, &labels, DEFAULT_FUSION_REG).unwrap();
        let m2 = train_fusion(&transformed, &labels, DEFAULT_FUSION_REG).unwrap();
        let f1 = apply_fusion(&m1, &scores).unwrap();
        let f2 = apply_fusion(&m2, &transformed).unwrap();
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
            idx
        };
        assert_eq!(order(&f1), order(&f2));
    }

    #[test]
    fn separable_data_terminates_with_bounded_weights() {
        // Perfectly separable: unregularized LLR would diverge.
        let scores: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![if i < 20 { 1.0 } else { -1.0 }])
            .collect();
        let labels: Vec<TrialLabel> = (0..40)
            .map(|i| {
                if i < 20 {
                    TrialLabel::Genuine
                } else {
                    TrialLabel::Impostor
                }
            })
            .collect();
        let model = train_fusion(&scores, &labels, DEFAULT_FUSION_REG).unwrap();
        assert!(model.weights[0].is_finite());
        assert!(model.weights[0].abs() < 1e4);
        assert!(model.iterations <= MAX_ITERS);
    }

    #[test]
    fn input_validation() {
        let (scores, labels) = two_gaussian(10, 2, 1);
        assert!(train_fusion(&scores, &labels[..5], DEFAULT_FUSION_REG).is_err());
        assert!(train_fusion(&[], &[], DEFAULT_FUSION_REG).is_err());
        let all_genuine = vec![TrialLabel::Genuine; scores.len()];
        assert!(train_fusion(&scores, &all_genuine, DEFAULT_FUSION_REG).is_err());
        let mut ragged = scores.clone();
        ragged[3] = vec![0.0];
        assert!(train_fusion(&ragged, &labels, DEFAULT_FUSION_REG).is_err());

        let model = train_fusion(&scores, &labels, DEFAULT_FUSION_REG).unwrap();
        assert!(model.fuse(&[1.0]).is_err());
        assert!(model.fuse(&[1.0, 2.0]).is_ok());
    }

    #[test]
    fn model_file_roundtrip() {
        let (scores, labels) = two_gaussian(100, 3, 17);
        let mut model = train_fusion(&scores, &labels, DEFAULT_FUSION_REG).unwrap();
        model.comparators = vec!["lbp-chi2".into(), "hog-chi2".into(), "sift-match".into()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fusion.txt");
        model.save(&path).unwrap();
        let back = FusionModel::load(&path).unwrap();
        assert_eq!(back, model);
    }
}
