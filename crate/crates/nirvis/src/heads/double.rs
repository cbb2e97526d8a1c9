//! Double-headed softmax verifier: two frozen embedding branches (one per
//! spectrum), concatenated embeddings, and a small fully connected head
//! ending in a 2-way softmax over {impostor, genuine}. Only the head
//! trains; the branches stay bit-identical.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{kv_parse, load_checkpoint, save_checkpoint, EmbeddingModel};
use crate::descriptors::{SpectralImage, Spectrum};
use crate::error::{Error, Result};
use crate::matching::{Polarity, Score, TrialLabel};
use crate::tensor::{Adam, Init, Linear, Tensor};

const HEAD_INIT_TAG: u64 = 0x6468_6431; // "dhd1"
const HEAD_SHUFFLE_TAG: u64 = 0x6468_6432; // "dhd2"

/// Head architecture and training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleHeadConfig {
    /// Width of the hidden fully connected layer.
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DoubleHeadConfig {
    fn default() -> Self {
        DoubleHeadConfig {
            hidden: 64,
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            seed: 7,
        }
    }
}

impl DoubleHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "hidden, epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Which branch an image routes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    A,
    B,
    Either,
}

/// Epoch-level observations of a head training run.
#[derive(Debug, Clone, Default)]
pub struct HeadTrainingLog {
    /// Mean class-weighted cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
    /// Unweighted training accuracy per epoch (measured online).
    pub epoch_accuracy: Vec<f64>,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
}

impl HeadTrainingLog {
    pub fn to_text(&self) -> String {
        let mut out = String::from("epoch  loss      accuracy\n");
        for (i, (l, a)) in self.epoch_loss.iter().zip(&self.epoch_accuracy).enumerate() {
            out.push_str(&format!("{i:<5}  {l:<8.5}  {a:.4}\n"));
        }
        out.push_str(&format!(
            "pairs: {} genuine / {} impostor\n",
            self.genuine_pairs, self.impostor_pairs
        ));
        out
    }
}

/// Two frozen branches plus the trained 2-way softmax head.
pub struct DoubleHeadModel {
    pub branch_a: EmbeddingModel,
    pub branch_b: EmbeddingModel,
    fc1: Linear<f32>,
    fc2: Linear<f32>,
    pub config: DoubleHeadConfig,
}

impl DoubleHeadModel {
    fn new_untrained(
        branch_a: EmbeddingModel,
        branch_b: EmbeddingModel,
        config: &DoubleHeadConfig,
    ) -> Result<DoubleHeadModel> {
        config.validate()?;
        let concat = branch_a.embedding_dim() + branch_b.embedding_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ HEAD_INIT_TAG);
        Ok(DoubleHeadModel {
            branch_a,
            branch_b,
            fc1: Linear::new(concat, config.hidden, Init::Kaiming, &mut rng),
            fc2: Linear::new(config.hidden, 2, Init::Kaiming, &mut rng),
            config: config.clone(),
        })
    }

    fn side_of(&self, s: Spectrum) -> Result<Side> {
        match (self.branch_a.accepts(s), self.branch_b.accepts(s)) {
            (true, true) => Ok(Side::Either),
            (true, false) => Ok(Side::A),
            (false, true) => Ok(Side::B),
            (false, false) => Err(Error::InvalidInput(format!(
                "no branch accepts spectrum {s} (branches: {}, {})",
                self.branch_a.spectrum, self.branch_b.spectrum
            ))),
        }
    }

    /// Decide which pair element feeds branch A. The order is fixed by the
    /// branches, not by the probe/gallery roles, so a pair scores the same
    /// regardless of orientation.
    fn resolve(&self, first: Spectrum, second: Spectrum) -> Result<bool> {
        let routes = (self.side_of(first)?, self.side_of(second)?);
        match routes {
            (Side::A, Side::B) | (Side::A, Side::Either) | (Side::Either, Side::B) => Ok(true),
            (Side::B, Side::A) | (Side::B, Side::Either) | (Side::Either, Side::A) => Ok(false),
            (Side::Either, Side::Either) => Ok(true),
            (Side::A, Side::A) | (Side::B, Side::B) => Err(Error::InvalidInput(format!(
                "pair of spectra {first}/{second} routes both images to one branch; \
                 this head pairs {} with {}",
                self.branch_a.spectrum, self.branch_b.spectrum
            ))),
        }
    }

    /// Concatenated-embedding rows for pairs, with per-image caching so a
    /// batch of trials embeds every distinct image once.
    fn embed_pairs(&self, pairs: &[(&SpectralImage, &SpectralImage)]) -> Result<Vec<Vec<f32>>> {
        // Unique images per branch, in first-seen order.
        fn slot_of<'p>(
            index: &mut HashMap<(bool, String), usize>,
            queue_a: &mut Vec<&'p SpectralImage>,
            queue_b: &mut Vec<&'p SpectralImage>,
            img: &'p SpectralImage,
            to_a: bool,
        ) -> (bool, usize) {
            let queue = if to_a { queue_a } else { queue_b };
            let next = queue.len();
            let at = *index.entry((to_a, img.image_key())).or_insert(next);
            if at == next {
                queue.push(img);
            }
            (to_a, at)
        }

        let mut index: HashMap<(bool, String), usize> = HashMap::new();
        let mut queue_a: Vec<&SpectralImage> = Vec::new();
        let mut queue_b: Vec<&SpectralImage> = Vec::new();
        let mut slots: Vec<((bool, usize), (bool, usize))> = Vec::with_capacity(pairs.len());
        for &(first, second) in pairs {
            let first_is_a = self.resolve(first.spectrum, second.spectrum)?;
            let sa = slot_of(&mut index, &mut queue_a, &mut queue_b, first, first_is_a);
            let sb = slot_of(&mut index, &mut queue_a, &mut queue_b, second, !first_is_a);
            slots.push((sa, sb));
        }
        let emb_a = self.branch_a.embed_images(&queue_a)?;
        let emb_b = self.branch_b.embed_images(&queue_b)?;
        let fetch = |(to_a, at): (bool, usize)| -> &[f32] {
            if to_a {
                &emb_a[at]
            } else {
                &emb_b[at]
            }
        };
        Ok(slots
            .iter()
            .map(|&(s1, s2)| {
                // Branch-A features first, regardless of pair orientation.
                let (ea, eb) = if s1.0 { (s1, s2) } else { (s2, s1) };
                let mut row = Vec::with_capacity(
                    self.branch_a.embedding_dim() + self.branch_b.embedding_dim(),
                );
                row.extend_from_slice(fetch(ea));
                row.extend_from_slice(fetch(eb));
                row
            })
            .collect())
    }

    fn forward_rows(&self, rows: &[Vec<f32>]) -> Tensor<f32> {
        let d = rows[0].len();
        let buf: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let x = Tensor::new(buf, &[rows.len(), d]);
        self.fc2.forward(&self.fc1.forward(&x).relu())
    }

    /// Genuine-class probabilities for a batch of pairs. Embeddings are
    /// cached per distinct image, so scoring a whole trial set is cheap.
    pub fn score_pairs(&self, pairs: &[(&SpectralImage, &SpectralImage)]) -> Result<Vec<Score>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let rows = self.embed_pairs(pairs)?;
        let mut scores = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(256) {
            let logits = self.forward_rows(chunk);
            logits.with_data(|d| {
                for row in d.chunks_exact(2) {
                    // Softmax over two logits: p(genuine) via stable logistic.
                    let p = 1.0 / (1.0 + ((row[0] - row[1]) as f64).exp());
                    scores.push(Score {
                        value: p,
                        polarity: Polarity::Similarity,
                        comparator_id: "double_head",
                    });
                }
            });
        }
        Ok(scores)
    }

    /// Genuine-class probability for one pair.
    pub fn score_pair(&self, a: &SpectralImage, b: &SpectralImage) -> Result<Score> {
        Ok(self.score_pairs(&[(a, b)])?.pop().expect("one score"))
    }

    /// Spectrum -> branch routing table (the serialized bundle records it).
    pub fn routing(&self) -> Vec<(Spectrum, char)> {
        [Spectrum::Nir, Spectrum::NirSynth, Spectrum::Vis, Spectrum::VisSynth]
            .into_iter()
            .filter_map(|s| match self.side_of(s) {
                Ok(Side::A | Side::Either) => Some((s, 'a')),
                Ok(Side::B) => Some((s, 'b')),
                Err(_) => None,
            })
            .collect()
    }

    fn head_params(&self) -> Vec<Tensor<f32>> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }

    /// Save branches and head as one bundle (container + sidecar with the
    /// routing table).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.branch_a.export_entries("backbone_a");
        entries.extend(self.branch_b.export_entries("backbone_b"));
        let mut head_entries = Vec::new();
        self.fc1.export("head.fc1", &mut head_entries);
        self.fc2.export("head.fc2", &mut head_entries);
        entries.extend(head_entries.into_iter().map(|(name, shape, data)| {
            crate::tensor::io::TensorEntry { name, shape, data }
        }));

        let mut lines = vec![
            ("hidden".to_string(), self.config.hidden.to_string()),
            ("epochs".to_string(), self.config.epochs.to_string()),
            ("lr".to_string(), self.config.lr.to_string()),
            ("batch_size".to_string(), self.config.batch_size.to_string()),
            ("seed".to_string(), self.config.seed.to_string()),
        ];
        lines.extend(self.branch_a.sidecar_lines("a."));
        lines.extend(self.branch_b.sidecar_lines("b."));
        for (s, side) in self.routing() {
            lines.push((format!("route.{}", s.tag()), side.to_string()));
        }
        save_checkpoint(path, "double_head", entries, lines)
    }

    pub fn load(path: &Path) -> Result<DoubleHeadModel> {
        let (kv, entries) = load_checkpoint(path, "double_head")?;
        let config = DoubleHeadConfig {
            hidden: kv_parse(&kv, "hidden", path)?,
            epochs: kv_parse(&kv, "epochs", path)?,
            lr: kv_parse(&kv, "lr", path)?,
            batch_size: kv_parse(&kv, "batch_size", path)?,
            seed: kv_parse(&kv, "seed", path)?,
        };
        let branch_a = EmbeddingModel::from_parts(&kv, "a.", &entries, "backbone_a", path)?;
        let branch_b = EmbeddingModel::from_parts(&kv, "b.", &entries, "backbone_b", path)?;
        let model = DoubleHeadModel::new_untrained(branch_a, branch_b, &config)?;
        model
            .fc1
            .import("head.fc1", &entries)
            .and_then(|()| model.fc2.import("head.fc2", &entries))
            .map_err(|m| Error::format(path, m))?;
        // The stored routing table must agree with the branches.
        for (s, side) in model.routing() {
            let key = format!("route.{}", s.tag());
            let stored = super::kv_get(&kv, &key, path)?;
            if stored != side.to_string() {
                return Err(Error::format(
                    path,
                    format!("routing table says {key}={stored}, branches imply {side}"),
                ));
            }
        }
        Ok(model)
    }
}

/// Train the double-headed softmax verifier on labeled image pairs.
///
/// Branches are frozen inputs: training only updates the fully connected
/// head, on embeddings computed once up front. Class imbalance is handled
/// by weighting each sample inversely to its class frequency.
pub fn train_double_head(
    branch_a: EmbeddingModel,
    branch_b: EmbeddingModel,
    pairs: &[(&SpectralImage, &SpectralImage, TrialLabel)],
    config: &DoubleHeadConfig,
) -> Result<(DoubleHeadModel, HeadTrainingLog)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("head training needs labeled pairs".into()));
    }
    let genuine = pairs.iter().filter(|p| p.2 == TrialLabel::Genuine).count();
    let impostor = pairs.len() - genuine;
    if genuine == 0 || impostor == 0 {
        return Err(Error::InvalidInput(format!(
            "head training needs both labels ({genuine} genuine, {impostor} impostor)"
        )));
    }

    let model = DoubleHeadModel::new_untrained(branch_a, branch_b, config)?;
    let bare: Vec<(&SpectralImage, &SpectralImage)> = pairs.iter().map(|p| (p.0, p.1)).collect();
    let rows = model.embed_pairs(&bare)?;

    // Inverse-frequency class weights: each class contributes half the mass.
    let n = pairs.len() as f32;
    let w_genuine = n / (2.0 * genuine as f32);
    let w_impostor = n / (2.0 * impostor as f32);
    let labels: Vec<usize> = pairs
        .iter()
        .map(|p| usize::from(p.2 == TrialLabel::Genuine))
        .collect();
    let weights: Vec<f32> = labels
        .iter()
        .map(|&l| if l == 1 { w_genuine } else { w_impostor })
        .collect();

    let mut opt = Adam::new(model.head_params(), config.lr as f32);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ HEAD_SHUFFLE_TAG);
    let mut log = HeadTrainingLog {
        genuine_pairs: genuine,
        impostor_pairs: impostor,
        ..HeadTrainingLog::default()
    };

    for _epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let batch_rows: Vec<Vec<f32>> = batch.iter().map(|&i| rows[i].clone()).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let batch_weights: Vec<f32> = batch.iter().map(|&i| weights[i]).collect();
            let logits = model.forward_rows(&batch_rows);
            correct += super::count_top1(&logits, &batch_labels);
            let loss = logits.softmax_cross_entropy(&batch_labels, Some(&batch_weights));
            opt.zero_grad();
            loss.backward();
            opt.step();
            loss_sum += loss.item() as f64 * batch.len() as f64;
        }
        log.epoch_loss.push(loss_sum / rows.len() as f64);
        log.epoch_accuracy.push(correct as f64 / rows.len() as f64);
    }

    Ok((model, log))
}
