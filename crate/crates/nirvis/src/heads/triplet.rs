//! Triplet-loss projection head: a frozen identification backbone plus a
//! small trained MLP projecting embeddings onto the unit sphere, scored by
//! Euclidean distance. The objective augments the classic triplet hinge
//! with an absolute pull term that keeps genuine pairs inside a fixed
//! radius instead of only a relative gap.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fingerprint_of, kv_parse, load_checkpoint, save_checkpoint, EmbeddingModel};
use crate::descriptors::{Descriptor, DescriptorKind, SpectralImage, Spectrum};
use crate::error::{Error, Result};
use crate::matching::{Polarity, Score};
use crate::tensor::io::TensorEntry;
use crate::tensor::{Adam, Init, Linear, Scalar, Tensor};

const PROJECTION_INIT_TAG: u64 = 0x7472_7031; // "trp1"
const MINING_TAG: u64 = 0x7472_7032; // "trp2"

/// Stabilizer for the unit normalization of projections.
const NORM_EPS: f32 = 1e-12;

/// Triplet objective over row-aligned batches `[N, F]`:
///
/// ```text
/// mean_i [ max(0, d2(a_i, p_i) - d2(a_i, n_i) + alpha)
///          + beta * max(0, d2(a_i, p_i) - m) ]
/// ```
///
/// where `d2` is squared Euclidean distance. The first hinge enforces the
/// usual relative margin `alpha`; the second pulls every genuine pair
/// within an absolute squared radius `m`, weighted by `beta`.
pub fn improved_triplet_loss<T: Scalar>(
    anchor: &Tensor<T>,
    positive: &Tensor<T>,
    negative: &Tensor<T>,
    alpha: f64,
    margin_m: f64,
    beta: f64,
) -> Tensor<T> {
    let d2 = |x: &Tensor<T>, y: &Tensor<T>| {
        let diff = x.sub(y);
        diff.mul(&diff).sum_rows()
    };
    let d2_ap = d2(anchor, positive);
    let d2_an = d2(anchor, negative);
    let gap = d2_ap.sub(&d2_an).add_scalar(T::fl(alpha)).relu();
    let pull = d2_ap
        .add_scalar(T::fl(-margin_m))
        .relu()
        .mul_scalar(T::fl(beta));
    gap.add(&pull).mean_all()
}

fn squared_distance(x: &[f32], y: &[f32]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = (*a - *b) as f64;
            d * d
        })
        .sum()
}

/// Fraction of triplets whose margin holds: `d2(a,p) + alpha <= d2(a,n)`.
/// Vectors are row-aligned across the three slices. An empty input counts
/// as fully satisfied (no triplet violates).
pub fn margin_satisfaction(
    anchors: &[Vec<f32>],
    positives: &[Vec<f32>],
    negatives: &[Vec<f32>],
    alpha: f64,
) -> f64 {
    assert_eq!(anchors.len(), positives.len(), "row-aligned triplets");
    assert_eq!(anchors.len(), negatives.len(), "row-aligned triplets");
    if anchors.is_empty() {
        return 1.0;
    }
    let satisfied = anchors
        .iter()
        .zip(positives)
        .zip(negatives)
        .filter(|((a, p), n)| squared_distance(a, p) + alpha <= squared_distance(a, n))
        .count();
    satisfied as f64 / anchors.len() as f64
}

/// Projection architecture, loss margins and training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletConfig {
    /// Dimension of the unit-norm projection space.
    pub out_dim: usize,
    /// Width of the hidden projection layer.
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Random negatives examined per anchor; the closest one (in the
    /// current projection space) is kept.
    pub candidates: usize,
    /// Relative margin between genuine and impostor squared distances.
    pub alpha: f64,
    /// Absolute squared-distance radius for genuine pairs.
    pub margin_m: f64,
    /// Weight of the absolute pull term.
    pub beta: f64,
    pub seed: u64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            out_dim: 32,
            hidden: 64,
            epochs: 30,
            lr: 1e-3,
            batch_size: 16,
            candidates: 8,
            alpha: 0.2,
            margin_m: 0.1,
            beta: 0.02,
            seed: 7,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0
            || self.hidden == 0
            || self.epochs == 0
            || self.batch_size == 0
            || self.candidates == 0
        {
            return Err(Error::Config(
                "out_dim, hidden, epochs, batch_size and candidates must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.margin_m > 0.0) {
            return Err(Error::Config(format!(
                "margin_m must be positive, got {}",
                self.margin_m
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be nonnegative, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Per-epoch observations of a triplet training run.
#[derive(Debug, Clone, Default)]
pub struct TripletTrainingLog {
    /// Mean triplet loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Classes skipped as anchors for having fewer than two images.
    pub excluded_classes: Vec<usize>,
    /// Anchors mined in each epoch.
    pub triplets_per_epoch: usize,
}

impl TripletTrainingLog {
    pub fn to_text(&self) -> String {
        let mut out = String::from("epoch  loss\n");
        for (i, l) in self.epoch_loss.iter().enumerate() {
            out.push_str(&format!("{i:<5}  {l:.6}\n"));
        }
        out.push_str(&format!(
            "{} anchors per epoch, {} singleton classes excluded\n",
            self.triplets_per_epoch,
            self.excluded_classes.len()
        ));
        out
    }
}

/// A frozen backbone plus the trained unit-sphere projection head.
pub struct TripletHeadModel {
    pub backbone: EmbeddingModel,
    fc1: Linear<f32>,
    fc2: Linear<f32>,
    pub config: TripletConfig,
    fingerprint: u64,
}

impl TripletHeadModel {
    fn new_untrained(backbone: EmbeddingModel, config: &TripletConfig) -> Result<TripletHeadModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ PROJECTION_INIT_TAG);
        let fc1 = Linear::new(backbone.embedding_dim(), config.hidden, Init::Kaiming, &mut rng);
        let fc2 = Linear::new(config.hidden, config.out_dim, Init::Kaiming, &mut rng);
        Ok(TripletHeadModel {
            backbone,
            fc1,
            fc2,
            config: config.clone(),
            fingerprint: 0,
        })
    }

    /// Stable hash over backbone and head weights (descriptor
    /// `params_hash`): projections compare only within one frozen model.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Whether images of spectrum `s` route to this head (same rule as the
    /// underlying backbone).
    pub fn accepts(&self, s: Spectrum) -> bool {
        self.backbone.accepts(s)
    }

    fn check_route(&self, image: &SpectralImage) -> Result<()> {
        if !self.accepts(image.spectrum) {
            return Err(Error::InvalidInput(format!(
                "image {} has spectrum {}, this head projects {} images",
                image.image_key(),
                image.spectrum,
                self.backbone.spectrum
            )));
        }
        Ok(())
    }

    fn head_params(&self) -> Vec<Tensor<f32>> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }

    /// Head forward on raw embedding rows: fc1 -> ReLU -> fc2 -> unit norm.
    fn project_rows(&self, rows: &[Vec<f32>]) -> Tensor<f32> {
        let d = rows[0].len();
        let buf: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let x = Tensor::new(buf, &[rows.len(), d]);
        self.fc2
            .forward(&self.fc1.forward(&x).relu())
            .l2_normalize_rows(NORM_EPS)
    }

    fn project_embeddings(&self, embeddings: &[Vec<f32>]) -> Vec<Vec<f32>> {
        let out_dim = self.config.out_dim;
        let mut out = Vec::with_capacity(embeddings.len());
        for chunk in embeddings.chunks(256) {
            let proj = self.project_rows(chunk);
            proj.with_data(|d| {
                for row in d.chunks_exact(out_dim) {
                    out.push(row.to_vec());
                }
            });
        }
        out
    }

    /// Unit-norm projection vectors for a batch of images. Every image
    /// must route to this head's spectrum.
    pub fn project_images(&self, images: &[&SpectralImage]) -> Result<Vec<Vec<f32>>> {
        for img in images {
            self.check_route(img)?;
        }
        let embeddings = self.backbone.embed_images(images)?;
        Ok(self.project_embeddings(&embeddings))
    }

    /// Projection of one image as a descriptor (kind `Embed`), comparable
    /// only against projections from this very model.
    pub fn project(&self, image: &SpectralImage) -> Result<Descriptor> {
        let values = self.project_images(&[image])?.pop().expect("one row");
        Ok(Descriptor {
            kind: DescriptorKind::Embed,
            values,
            params_hash: self.fingerprint,
        })
    }

    /// Euclidean distance between the two projections.
    pub fn score_pair(&self, a: &SpectralImage, b: &SpectralImage) -> Result<Score> {
        let rows = self.project_images(&[a, b])?;
        Ok(Score {
            value: squared_distance(&rows[0], &rows[1]).sqrt(),
            polarity: Polarity::Distance,
            comparator_id: "triplet_head",
        })
    }

    fn export_entries(&self) -> Vec<TensorEntry> {
        let mut entries = self.backbone.export_entries("backbone");
        let mut head = Vec::new();
        self.fc1.export("head.fc1", &mut head);
        self.fc2.export("head.fc2", &mut head);
        entries.extend(head.into_iter().map(|(name, shape, data)| TensorEntry {
            name,
            shape,
            data,
        }));
        entries
    }

    fn refresh_fingerprint(&mut self) {
        self.fingerprint = fingerprint_of(&self.export_entries());
    }

    /// Save backbone and head as one bundle (container + text sidecar).
    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.config;
        let mut lines = vec![
            ("out_dim".to_string(), c.out_dim.to_string()),
            ("hidden".to_string(), c.hidden.to_string()),
            ("epochs".to_string(), c.epochs.to_string()),
            ("lr".to_string(), c.lr.to_string()),
            ("batch_size".to_string(), c.batch_size.to_string()),
            ("candidates".to_string(), c.candidates.to_string()),
            ("alpha".to_string(), c.alpha.to_string()),
            ("margin_m".to_string(), c.margin_m.to_string()),
            ("beta".to_string(), c.beta.to_string()),
            ("seed".to_string(), c.seed.to_string()),
        ];
        lines.extend(self.backbone.sidecar_lines("backbone."));
        save_checkpoint(path, "triplet_head", self.export_entries(), lines)
    }

    pub fn load(path: &Path) -> Result<TripletHeadModel> {
        let (kv, entries) = load_checkpoint(path, "triplet_head")?;
        let config = TripletConfig {
            out_dim: kv_parse(&kv, "out_dim", path)?,
            hidden: kv_parse(&kv, "hidden", path)?,
            epochs: kv_parse(&kv, "epochs", path)?,
            lr: kv_parse(&kv, "lr", path)?,
            batch_size: kv_parse(&kv, "batch_size", path)?,
            candidates: kv_parse(&kv, "candidates", path)?,
            alpha: kv_parse(&kv, "alpha", path)?,
            margin_m: kv_parse(&kv, "margin_m", path)?,
            beta: kv_parse(&kv, "beta", path)?,
            seed: kv_parse(&kv, "seed", path)?,
        };
        let backbone = EmbeddingModel::from_parts(&kv, "backbone.", &entries, "backbone", path)?;
        let mut model = TripletHeadModel::new_untrained(backbone, &config)?;
        model
            .fc1
            .import("head.fc1", &entries)
            .and_then(|()| model.fc2.import("head.fc2", &entries))
            .map_err(|m| Error::format(path, m))?;
        model.refresh_fingerprint();
        Ok(model)
    }
}

/// Train a triplet projection head on top of a frozen backbone.
///
/// `labels` are class indices (need not be dense). Classes with fewer than
/// two images cannot anchor a genuine pair; they are excluded from the
/// anchor pool (recorded in the log) but still serve as negatives. Mining
/// is hardest-of-`candidates`: for each anchor, a random same-class
/// positive plus the closest of `candidates` random other-class negatives,
/// measured in the projection space refreshed once per epoch.
pub fn train_triplet_head(
    backbone: EmbeddingModel,
    images: &[&SpectralImage],
    labels: &[usize],
    config: &TripletConfig,
) -> Result<(TripletHeadModel, TripletTrainingLog)> {
    if images.is_empty() {
        return Err(Error::InvalidInput("triplet training needs images".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut model = TripletHeadModel::new_untrained(backbone, config)?;
    for img in images {
        model.check_route(img)?;
    }

    let classes = labels.iter().max().unwrap() + 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let nonempty = members.iter().filter(|m| !m.is_empty()).count();
    if nonempty < 2 {
        return Err(Error::InvalidInput(
            "triplet mining needs at least 2 classes (negatives come from other classes)".into(),
        ));
    }
    let anchor_pool: Vec<usize> = (0..images.len())
        .filter(|&i| members[labels[i]].len() >= 2)
        .collect();
    if anchor_pool.is_empty() {
        return Err(Error::InvalidInput(
            "triplet mining needs a class with at least 2 images".into(),
        ));
    }

    // The backbone is frozen: embed everything once.
    let embeddings = model.backbone.embed_images(images)?;

    let mut opt = Adam::new(model.head_params(), config.lr as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ MINING_TAG);
    let mut order = anchor_pool.clone();
    let mut log = TripletTrainingLog {
        excluded_classes: (0..classes)
            .filter(|&c| members[c].len() == 1)
            .collect(),
        triplets_per_epoch: anchor_pool.len(),
        ..TripletTrainingLog::default()
    };

    for _epoch in 0..config.epochs {
        // Mining distances come from the current head, refreshed per epoch.
        let projections = model.project_embeddings(&embeddings);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut rows_a = Vec::with_capacity(batch.len());
            let mut rows_p = Vec::with_capacity(batch.len());
            let mut rows_n = Vec::with_capacity(batch.len());
            for &a in batch {
                let class = labels[a];
                let positive = loop {
                    let cand = members[class][rng.random_range(0..members[class].len())];
                    if cand != a {
                        break cand;
                    }
                };
                let mut negative = (f64::INFINITY, usize::MAX);
                for _ in 0..config.candidates {
                    let cand = loop {
                        let c = rng.random_range(0..images.len());
                        if labels[c] != class {
                            break c;
                        }
                    };
                    let d = squared_distance(&projections[a], &projections[cand]);
                    if d < negative.0 {
                        negative = (d, cand);
                    }
                }
                rows_a.push(embeddings[a].clone());
                rows_p.push(embeddings[positive].clone());
                rows_n.push(embeddings[negative.1].clone());
            }
            let loss = improved_triplet_loss(
                &model.project_rows(&rows_a),
                &model.project_rows(&rows_p),
                &model.project_rows(&rows_n),
                config.alpha,
                config.margin_m,
                config.beta,
            );
            opt.zero_grad();
            loss.backward();
            opt.step();
            loss_sum += loss.item() as f64 * batch.len() as f64;
        }
        log.epoch_loss.push(loss_sum / order.len() as f64);
    }

    model.refresh_fingerprint();
    Ok((model, log))
}
