//! Learned verification models: identification-pretrained embedding
//! backbones (frozen after training) and the two verification heads built
//! on top of them — a double-headed softmax verifier over concatenated
//! branch embeddings ([`DoubleHeadModel`]) and a triplet-loss projection
//! head scoring by Euclidean distance ([`TripletHeadModel`]).
//!
//! The backbone is a small conv/batch-norm/ReLU/max-pool stack with global
//! average pooling; the embedding is the activation vector adjacent to the
//! (detached) classifier. Every training entry point is a pure function of
//! (data, config): all randomness comes from ChaCha streams derived from
//! the config seed.

mod double;
mod triplet;

pub use double::{train_double_head, DoubleHeadConfig, DoubleHeadModel, HeadTrainingLog};
pub use triplet::{
    improved_triplet_loss, margin_satisfaction, train_triplet_head, TripletConfig,
    TripletHeadModel, TripletTrainingLog,
};

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::descriptors::{fnv1a64, Descriptor, DescriptorKind, SpectralImage, Spectrum};
use crate::error::{Error, Result};
use crate::tensor::io::TensorEntry;
use crate::tensor::{Adam, BatchNorm2d, Conv2d, Init, Linear, StateMap, Tensor};
use crate::write_atomic;

const BACKBONE_INIT_TAG: u64 = 0x6262_6f6e; // "bbon"
const CLASSIFIER_INIT_TAG: u64 = 0x636c_7366; // "clsf"
const ID_SHUFFLE_TAG: u64 = 0x6964_7368; // "idsh"

/// Number of conv/pool stages in the backbone; each halves the spatial
/// size and doubles the channel count.
pub const BACKBONE_BLOCKS: usize = 4;

/// Architecture and training settings for an identification backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Square input side; must be a multiple of 16 (four 2x2 pools).
    pub image_size: usize,
    pub in_channels: usize,
    /// First-stage width; the embedding length is 8x this value.
    pub base_channels: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop early once the epoch's training accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 64,
            in_channels: 1,
            base_channels: 16,
            epochs: 40,
            lr: 1e-3,
            batch_size: 16,
            seed: 7,
            target_accuracy: Some(0.995),
        }
    }
}

impl BackboneConfig {
    /// Length of the embedding vector this architecture produces.
    pub fn embedding_dim(&self) -> usize {
        self.base_channels << (BACKBONE_BLOCKS - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let reject = |msg: String| Err(Error::Config(msg));
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return reject(format!(
                "image_size must be a positive multiple of 16, got {}",
                self.image_size
            ));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return reject(format!("in_channels must be 1 or 3, got {}", self.in_channels));
        }
        if self.base_channels == 0 {
            return reject("base_channels must be at least 1".into());
        }
        if self.epochs == 0 {
            return reject("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0) {
            return reject(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return reject("batch_size must be at least 1".into());
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0 < t && t <= 1.0) {
                return reject(format!("target_accuracy must lie in (0, 1], got {t}"));
            }
        }
        Ok(())
    }
}

/// Convert interleaved-HWC `[0, 1]` images into one planar `[B, C, H, W]`
/// tensor on the `[-1, 1]` scale shared with the translator.
pub(crate) fn images_to_batch(images: &[&SpectralImage]) -> Tensor<f32> {
    let (h, w, c) = (images[0].height, images[0].width, images[0].channels);
    let mut buf = vec![0.0f32; images.len() * c * h * w];
    for (b, img) in images.iter().enumerate() {
        let base = b * c * h * w;
        let px = img.pixels();
        for ch in 0..c {
            let plane = base + ch * h * w;
            for i in 0..h * w {
                buf[plane + i] = 2.0 * px[i * c + ch] - 1.0;
            }
        }
    }
    Tensor::new(buf, &[images.len(), c, images[0].height, images[0].width])
}

/// The shared conv stack: `BACKBONE_BLOCKS` stages of conv(3x3, pad 1) +
/// batch norm + ReLU + 2x2 max pool, then global average pooling.
pub struct Backbone {
    blocks: Vec<(Conv2d<f32>, BatchNorm2d<f32>)>,
}

impl Backbone {
    fn build(config: &BackboneConfig) -> Backbone {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ BACKBONE_INIT_TAG);
        let mut blocks = Vec::with_capacity(BACKBONE_BLOCKS);
        let mut in_ch = config.in_channels;
        for i in 0..BACKBONE_BLOCKS {
            let out_ch = config.base_channels << i;
            // Bias is left to the batch-norm shift.
            let conv = Conv2d::new(in_ch, out_ch, 3, 1, 1, false, Init::Kaiming, &mut rng);
            blocks.push((conv, BatchNorm2d::new(out_ch)));
            in_ch = out_ch;
        }
        Backbone { blocks }
    }

    /// Embedding activations `[N, embedding_dim]`. Training mode uses batch
    /// statistics (and updates running estimates); inference mode uses the
    /// frozen running statistics, making the output batch-size invariant.
    fn features(&self, x: &Tensor<f32>, training: bool) -> Tensor<f32> {
        let mut h = x.clone();
        for (conv, bn) in &self.blocks {
            h = bn.forward(&conv.forward(&h), training).relu().max_pool2d();
        }
        h.global_avg_pool()
    }

    fn params(&self) -> Vec<Tensor<f32>> {
        self.blocks
            .iter()
            .flat_map(|(c, b)| c.params().into_iter().chain(b.params()))
            .collect()
    }

    fn export(&self, prefix: &str, out: &mut Vec<TensorEntry>) {
        let mut entries = Vec::new();
        for (i, (conv, bn)) in self.blocks.iter().enumerate() {
            conv.export(&format!("{prefix}.block{i}.conv"), &mut entries);
            bn.export(&format!("{prefix}.block{i}.bn"), &mut entries);
        }
        out.extend(entries.into_iter().map(|(name, shape, data)| TensorEntry {
            name,
            shape,
            data,
        }));
    }

    fn import(&self, prefix: &str, map: &StateMap, path: &Path) -> Result<()> {
        for (i, (conv, bn)) in self.blocks.iter().enumerate() {
            conv.import(&format!("{prefix}.block{i}.conv"), map)
                .map_err(|m| Error::format(path, m))?;
            bn.import(&format!("{prefix}.block{i}.bn"), map)
                .map_err(|m| Error::format(path, m))?;
        }
        Ok(())
    }
}

/// Hash of a model's exported tensors (names, shapes, exact f32 bits).
/// Serves as the descriptor `params_hash`: embeddings are only comparable
/// when they come from the very same frozen weights.
fn fingerprint_of(entries: &[TensorEntry]) -> u64 {
    let mut bytes = Vec::new();
    for e in entries {
        bytes.extend_from_slice(e.name.as_bytes());
        bytes.push(0xff);
        for d in &e.shape {
            bytes.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &e.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fnv1a64(&bytes)
}

/// A frozen identification-pretrained backbone with its classifier
/// detached. Produces fixed-length embedding descriptors.
pub struct EmbeddingModel {
    backbone: Backbone,
    /// Spectrum of the training images; `NirSynth`/`VisSynth` mark the
    /// synthetic-trained ('S') variants.
    pub spectrum: Spectrum,
    /// Number of identification classes the backbone was trained on.
    pub classes: usize,
    pub config: BackboneConfig,
    fingerprint: u64,
}

impl EmbeddingModel {
    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    /// 'R' for a model trained on real-spectrum images, 'S' for one
    /// trained on translator outputs.
    pub fn variant(&self) -> char {
        if self.spectrum.is_synthetic() {
            'S'
        } else {
            'R'
        }
    }

    /// Whether images of spectrum `s` route to this model: the branch
    /// trained for a spectrum also serves that spectrum's synthetic twin.
    pub fn accepts(&self, s: Spectrum) -> bool {
        s.canonical_real() == self.spectrum.canonical_real()
    }

    /// Stable hash of the frozen weights (descriptor `params_hash`).
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn check_geometry(&self, image: &SpectralImage) -> Result<()> {
        if image.height != self.config.image_size
            || image.width != self.config.image_size
            || image.channels != self.config.in_channels
        {
            return Err(Error::InvalidInput(format!(
                "image {} is {}x{}x{}, backbone expects {s}x{s}x{c}",
                image.image_key(),
                image.height,
                image.width,
                image.channels,
                s = self.config.image_size,
                c = self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Embedding vectors for a batch of images (frozen weights, running
    /// batch-norm statistics: identical results at any batch size).
    pub fn embed_images(&self, images: &[&SpectralImage]) -> Result<Vec<Vec<f32>>> {
        let dim = self.embedding_dim();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            for img in chunk {
                self.check_geometry(img)?;
            }
            let x = images_to_batch(chunk);
            let feats = self.backbone.features(&x, false);
            feats.with_data(|d| {
                for row in d.chunks_exact(dim) {
                    out.push(row.to_vec());
                }
            });
        }
        Ok(out)
    }

    /// Embedding of one image as a descriptor (kind `Embed`), comparable
    /// only against embeddings from the same frozen model.
    pub fn embed(&self, image: &SpectralImage) -> Result<Descriptor> {
        let values = self.embed_images(&[image])?.pop().expect("one row");
        Ok(Descriptor {
            kind: DescriptorKind::Embed,
            values,
            params_hash: self.fingerprint,
        })
    }

    fn export_entries(&self, prefix: &str) -> Vec<TensorEntry> {
        let mut entries = Vec::new();
        self.backbone.export(prefix, &mut entries);
        entries
    }

    /// Sidecar key/value lines describing this model under a key prefix.
    pub(crate) fn sidecar_lines(&self, prefix: &str) -> Vec<(String, String)> {
        let c = &self.config;
        let target = match c.target_accuracy {
            Some(t) => format!("{t}"),
            None => "none".into(),
        };
        vec![
            (format!("{prefix}spectrum"), self.spectrum.tag().into()),
            (format!("{prefix}classes"), self.classes.to_string()),
            (format!("{prefix}image_size"), c.image_size.to_string()),
            (format!("{prefix}in_channels"), c.in_channels.to_string()),
            (format!("{prefix}base_channels"), c.base_channels.to_string()),
            (format!("{prefix}epochs"), c.epochs.to_string()),
            (format!("{prefix}lr"), c.lr.to_string()),
            (format!("{prefix}batch_size"), c.batch_size.to_string()),
            (format!("{prefix}seed"), c.seed.to_string()),
            (format!("{prefix}target_accuracy"), target),
        ]
    }

    /// Rebuild a frozen model from sidecar keys under `key_prefix` and
    /// tensor entries under `entry_prefix`.
    pub(crate) fn from_parts(
        kv: &HashMap<String, String>,
        key_prefix: &str,
        entries: &StateMap,
        entry_prefix: &str,
        path: &Path,
    ) -> Result<EmbeddingModel> {
        let config = BackboneConfig {
            image_size: kv_parse(kv, &format!("{key_prefix}image_size"), path)?,
            in_channels: kv_parse(kv, &format!("{key_prefix}in_channels"), path)?,
            base_channels: kv_parse(kv, &format!("{key_prefix}base_channels"), path)?,
            epochs: kv_parse(kv, &format!("{key_prefix}epochs"), path)?,
            lr: kv_parse(kv, &format!("{key_prefix}lr"), path)?,
            batch_size: kv_parse(kv, &format!("{key_prefix}batch_size"), path)?,
            seed: kv_parse(kv, &format!("{key_prefix}seed"), path)?,
            target_accuracy: match kv_get(kv, &format!("{key_prefix}target_accuracy"), path)? {
                "none" => None,
                v => Some(v.parse().map_err(|_| {
                    Error::format(path, format!("bad target_accuracy value {v:?}"))
                })?),
            },
        };
        config.validate()?;
        let spectrum = Spectrum::from_tag(kv_get(kv, &format!("{key_prefix}spectrum"), path)?)?;
        let classes: usize = kv_parse(kv, &format!("{key_prefix}classes"), path)?;
        let backbone = Backbone::build(&config);
        backbone.import(entry_prefix, entries, path)?;
        let mut model = EmbeddingModel {
            backbone,
            spectrum,
            classes,
            config,
            fingerprint: 0,
        };
        model.fingerprint = fingerprint_of(&model.export_entries(entry_prefix));
        Ok(model)
    }

    /// Save as a standalone checkpoint (tensor container + text sidecar).
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            "embedding",
            self.export_entries("backbone"),
            self.sidecar_lines(""),
        )
    }

    pub fn load(path: &Path) -> Result<EmbeddingModel> {
        let (kv, entries) = load_checkpoint(path, "embedding")?;
        EmbeddingModel::from_parts(&kv, "", &entries, "backbone", path)
    }
}

/// Per-epoch observations of an identification training run.
#[derive(Debug, Clone, Default)]
pub struct IdTrainingLog {
    /// Mean cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
    /// Training top-1 accuracy measured online during each epoch.
    pub epoch_accuracy: Vec<f64>,
    /// Top-1 accuracy of the frozen model over the training set.
    pub final_accuracy: f64,
}

impl IdTrainingLog {
    pub fn to_text(&self) -> String {
        let mut out = String::from("epoch  loss      accuracy\n");
        for (i, (l, a)) in self.epoch_loss.iter().zip(&self.epoch_accuracy).enumerate() {
            out.push_str(&format!("{i:<5}  {l:<8.5}  {a:.4}\n"));
        }
        out.push_str(&format!("frozen-model training accuracy {:.4}\n", self.final_accuracy));
        out
    }
}

/// Train an identification backbone with softmax cross-entropy and Adam,
/// then detach the classifier and freeze the result.
///
/// `labels` must be dense class indices `0..K` with every class non-empty
/// and K >= 2; all images must share one spectrum (a model serves exactly
/// one spectrum — train separate models per spectrum) and match the
/// configured geometry.
pub fn train_identification(
    images: &[&SpectralImage],
    labels: &[usize],
    config: &BackboneConfig,
) -> Result<(EmbeddingModel, IdTrainingLog)> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidInput("identification training needs images".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let spectrum = images[0].spectrum;
    let classes = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; classes];
    for (img, &l) in images.iter().zip(labels) {
        if img.spectrum != spectrum {
            return Err(Error::InvalidInput(format!(
                "mixed spectra: {} next to {} (one model per spectrum)",
                img.spectrum, spectrum
            )));
        }
        if img.height != config.image_size
            || img.width != config.image_size
            || img.channels != config.in_channels
        {
            return Err(Error::InvalidInput(format!(
                "image {} is {}x{}x{}, config expects {s}x{s}x{c}",
                img.image_key(),
                img.height,
                img.width,
                img.channels,
                s = config.image_size,
                c = config.in_channels
            )));
        }
        counts[l] += 1;
    }
    if classes < 2 {
        return Err(Error::InvalidInput(
            "identification needs at least 2 classes".into(),
        ));
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidInput(format!(
            "labels must be dense 0..{classes}: class {empty} has no images"
        )));
    }

    let backbone = Backbone::build(config);
    let mut cls_rng = ChaCha8Rng::seed_from_u64(config.seed ^ CLASSIFIER_INIT_TAG);
    let classifier = Linear::new(config.embedding_dim(), classes, Init::Kaiming, &mut cls_rng);
    let mut params = backbone.params();
    params.extend(classifier.params());
    let mut opt = Adam::new(params, config.lr as f32);

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ ID_SHUFFLE_TAG);
    let mut log = IdTrainingLog::default();

    for _epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let imgs: Vec<&SpectralImage> = batch.iter().map(|&i| images[i]).collect();
            let lbls: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let x = images_to_batch(&imgs);
            let logits = classifier.forward(&backbone.features(&x, true));
            correct += count_top1(&logits, &lbls);
            let loss = logits.softmax_cross_entropy(&lbls, None);
            opt.zero_grad();
            loss.backward();
            opt.step();
            loss_sum += loss.item() as f64 * batch.len() as f64;
        }
        let accuracy = correct as f64 / images.len() as f64;
        log.epoch_loss.push(loss_sum / images.len() as f64);
        log.epoch_accuracy.push(accuracy);
        if config.target_accuracy.is_some_and(|t| accuracy >= t) {
            break;
        }
    }

    // Freeze, then measure the frozen model once in inference mode.
    let mut model = EmbeddingModel {
        backbone,
        spectrum,
        classes,
        config: config.clone(),
        fingerprint: 0,
    };
    model.fingerprint = fingerprint_of(&model.export_entries("backbone"));

    let mut correct = 0usize;
    for batch in (0..images.len()).collect::<Vec<_>>().chunks(config.batch_size) {
        let imgs: Vec<&SpectralImage> = batch.iter().map(|&i| images[i]).collect();
        let lbls: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let x = images_to_batch(&imgs);
        let logits = classifier.forward(&model.backbone.features(&x, false));
        correct += count_top1(&logits, &lbls);
    }
    log.final_accuracy = correct as f64 / images.len() as f64;

    Ok((model, log))
}

fn count_top1(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits.with_data(|d| {
        d.chunks_exact(k)
            .zip(labels)
            .filter(|(row, &l)| {
                let best = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap();
                best == l
            })
            .count()
    })
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing shared by the head models: one tensor container plus
// a text sidecar of key=value lines (first line fixes the checkpoint kind).

pub(crate) fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".cfg");
    std::path::PathBuf::from(os)
}

pub(crate) fn save_checkpoint(
    path: &Path,
    kind: &str,
    entries: Vec<TensorEntry>,
    lines: Vec<(String, String)>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    crate::tensor::io::save(&tmp, &entries)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    let mut text = format!("kind={kind}\n");
    for (k, v) in lines {
        text.push_str(&format!("{k}={v}\n"));
    }
    write_atomic(&sidecar_path(path), text.as_bytes())
}

pub(crate) fn load_checkpoint(
    path: &Path,
    expected_kind: &str,
) -> Result<(HashMap<String, String>, StateMap)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let kv = parse_kv(&text, &side)?;
    let kind = kv_get(&kv, "kind", &side)?;
    if kind != expected_kind {
        return Err(Error::format(
            &side,
            format!("checkpoint kind is {kind:?}, expected {expected_kind:?}"),
        ));
    }
    let entries = crate::tensor::io::load(path)?;
    let map = crate::tensor::io::entry_map(entries, path)?;
    Ok((kv, map))
}

pub(crate) fn parse_kv(text: &str, path: &Path) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format(path, format!("line {}: expected key=value, got {line:?}", ln + 1))
        })?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::format(path, format!("duplicate key {:?}", k.trim())));
        }
    }
    Ok(map)
}

pub(crate) fn kv_get<'a>(
    map: &'a HashMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<&'a str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::format(path, format!("missing key {key:?}")))
}

pub(crate) fn kv_parse<T: std::str::FromStr>(
    map: &HashMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<T> {
    let raw = kv_get(map, key, path)?;
    raw.parse().map_err(|_| {
        Error::format(path, format!("bad value {raw:?} for key {key:?}"))
    })
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::descriptors::SpectralImage;
    use crate::synth::{gen_identity, render_pair, NuisanceConfig, SynthConfig};

    /// Render `identities x captures` NIR/VIS pairs at `size` px and return
    /// them flattened with per-image class labels (= identity index).
    pub fn render_labeled(
        identities: usize,
        captures: usize,
        size: usize,
        seed: u64,
    ) -> (Vec<SpectralImage>, Vec<SpectralImage>, Vec<usize>) {
        let cfg = SynthConfig {
            identities,
            captures,
            train_captures: captures,
            size,
            seed,
            nuisance: NuisanceConfig {
                translation_px: 1.0,
                gain: 0.05,
                noise_sigma: 0.005,
            },
            ..SynthConfig::default()
        };
        let mut nir = Vec::new();
        let mut vis = Vec::new();
        let mut labels = Vec::new();
        for index in 0..identities {
            let id = gen_identity(seed, index);
            for capture in 0..captures {
                let pair = render_pair(&id, capture, &cfg).unwrap();
                nir.push(pair.nir);
                vis.push(pair.vis);
                labels.push(index);
            }
        }
        (nir, vis, labels)
    }
}
