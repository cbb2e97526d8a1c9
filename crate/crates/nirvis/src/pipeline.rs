//! End-to-end pipeline orchestration.
//!
//! Each stage reads artifacts from a working directory, writes its own
//! artifacts back, and fails with an error naming the command that produces
//! any missing input. Stages are idempotent: rerunning one with identical
//! inputs and seeds rewrites byte-identical outputs. Every artifact lands
//! via write-to-temp and atomic rename; multi-file stages (dataset
//! generation, translation) write their manifest last, so a directory
//! without a manifest is simply "stage not run".
//!
//! Layout under the working directory:
//!
//! ```text
//! dataset/               PNGs + manifest.txt          (synth-gen)
//! models/                translator weights + logs    (train-translator)
//! translated/<dir>/      PNGs + manifest.txt          (translate)
//! descriptors/<kind>/    one .nvd per image           (extract)
//! scores/                per scenario x comparator    (score, fuse)
//! fusion/                fusion weights per scenario  (fuse)
//! report/                summary, DET CSVs, SVG       (report)
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::descriptors::{
    fnv1a64, hog, lbp, Descriptor, DescriptorKind, Eye, HogParams, LbpParams, SpectralImage,
    Spectrum,
};
use crate::error::{Error, Result};
use crate::eval::{
    apply_fusion, build_training_trials, build_trials, compute_det, eer, gar_at_far, train_fusion,
    DatasetSplit, DetCurve, FusionModel, ImageRecord, Role, TrialSet, DEFAULT_FUSION_REG,
};
use crate::matching::{chi2_distance, cosine_distance, ScoreSet, TrialLabel, TrialScore};
use crate::synth::{gen_dataset, PairedSample, SynthConfig};
use crate::translator::{train_translator, Direction, TrainingLog, Translator, TranslatorConfig};

/// Name of the comparator column produced by score fusion.
pub const FUSED_COMPARATOR: &str = "fused";

/// One verification scenario: which spectrum (real or translated) each side
/// of a trial is drawn from. The five scenarios cover the four comparison
/// families: intra-spectral (both spectra), raw cross-spectral, and
/// cross-spectral after translating one side into the other's spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Probe NIR vs gallery NIR (intra-spectral baseline).
    NirNir,
    /// Probe VIS vs gallery VIS (intra-spectral baseline).
    VisVis,
    /// Probe NIR vs gallery VIS with no translation (the problem case).
    NirVis,
    /// Probe NIR vs gallery VIS translated into NIR.
    NirVisToNir,
    /// Probe VIS vs gallery NIR translated into VIS.
    VisNirToVis,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::NirNir,
        Scenario::VisVis,
        Scenario::NirVis,
        Scenario::NirVisToNir,
        Scenario::VisNirToVis,
    ];

    /// File-name tag.
    pub fn tag(self) -> &'static str {
        match self {
            Scenario::NirNir => "nir_nir",
            Scenario::VisVis => "vis_vis",
            Scenario::NirVis => "nir_vis",
            Scenario::NirVisToNir => "nir_vis2nir",
            Scenario::VisNirToVis => "vis_nir2vis",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|s| s.tag() == tag)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown scenario `{tag}` (expected one of nir_nir, vis_vis, nir_vis, \
                     nir_vis2nir, vis_nir2vis)"
                ))
            })
    }

    /// Human-readable label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Scenario::NirNir => "NIR-NIR (intra-spectral)",
            Scenario::VisVis => "VIS-VIS (intra-spectral)",
            Scenario::NirVis => "NIR-VIS (raw cross-spectral)",
            Scenario::NirVisToNir => "NIR-(VIS->NIR) (translated gallery)",
            Scenario::VisNirToVis => "VIS-(NIR->VIS) (translated gallery)",
        }
    }

    /// Spectrum the probe image is drawn from.
    pub fn probe_spectrum(self) -> Spectrum {
        match self {
            Scenario::NirNir | Scenario::NirVis | Scenario::NirVisToNir => Spectrum::Nir,
            Scenario::VisVis | Scenario::VisNirToVis => Spectrum::Vis,
        }
    }

    /// Spectrum the gallery image is drawn from (synthetic for translated
    /// scenarios).
    pub fn gallery_spectrum(self) -> Spectrum {
        match self {
            Scenario::NirNir => Spectrum::Nir,
            Scenario::VisVis | Scenario::NirVis => Spectrum::Vis,
            Scenario::NirVisToNir => Spectrum::NirSynth,
            Scenario::VisNirToVis => Spectrum::VisSynth,
        }
    }

    /// The translation direction this scenario depends on, if any.
    pub fn direction(self) -> Option<Direction> {
        match self {
            Scenario::NirVisToNir => Some(Direction::Vis2Nir),
            Scenario::VisNirToVis => Some(Direction::Nir2Vis),
            _ => None,
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Everything a full pipeline run depends on: working directory, dataset
/// shape, translator budget, comparator list, and the run seed from which
/// all stage-level randomness is derived.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Root of all artifact paths.
    pub workdir: PathBuf,
    /// Run seed; dataset, translator init, and dropout streams derive from it.
    pub seed: u64,
    /// Dataset: verification classes.
    pub identities: usize,
    /// Dataset: captures per class per spectrum.
    pub captures: usize,
    /// Dataset: captures 0..train_captures are the training role.
    pub train_captures: usize,
    /// Square image side (power of two; the translator depth follows it).
    pub image_size: usize,
    /// Translator training epochs (early stop can end sooner).
    pub translator_epochs: usize,
    /// Weight of the translator's L1 reconstruction term.
    pub lambda_l1: f64,
    /// Translator channel width at the first encoder level.
    pub base_channels: usize,
    /// Descriptor comparators to extract, score, and fuse.
    pub comparators: Vec<DescriptorKind>,
    /// L2 regularization for fusion training.
    pub fusion_reg: f64,
    /// Translation directions to train and evaluate. Each enables its
    /// translated scenario; an empty list evaluates raw scenarios only.
    pub directions: Vec<Direction>,
}

impl PipelineConfig {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            workdir: workdir.into(),
            seed: 7,
            identities: 40,
            captures: 15,
            train_captures: 10,
            image_size: 64,
            translator_epochs: 8,
            lambda_l1: 100.0,
            base_channels: 8,
            comparators: vec![DescriptorKind::Lbp, DescriptorKind::Hog],
            fusion_reg: DEFAULT_FUSION_REG,
            directions: vec![Direction::Vis2Nir, Direction::Nir2Vis],
        }
    }

    /// Set one field from its config-file key. Accepted keys: `seed`,
    /// `identities`, `captures`, `train_captures`, `size`, `epochs`,
    /// `lambda`, `base_channels`, `comparators` (comma-separated),
    /// `fusion_reg`, `directions` (comma-separated, may be empty).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("{what} `{value}` for key `{key}`"));
        macro_rules! parse {
            ($field:expr) => {
                $field = value.parse().map_err(|_| bad("unparsable value"))?
            };
        }
        match key {
            "seed" => parse!(self.seed),
            "identities" => parse!(self.identities),
            "captures" => parse!(self.captures),
            "train_captures" => parse!(self.train_captures),
            "size" => parse!(self.image_size),
            "epochs" => parse!(self.translator_epochs),
            "lambda" => parse!(self.lambda_l1),
            "base_channels" => parse!(self.base_channels),
            "fusion_reg" => parse!(self.fusion_reg),
            "comparators" => {
                self.comparators = split_list(value)
                    .map(DescriptorKind::from_tag)
                    .collect::<Result<_>>()?
            }
            "directions" => {
                self.directions = split_list(value)
                    .map(Direction::from_tag)
                    .collect::<Result<_>>()?
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown config key `{other}` (expected seed, identities, captures, \
                     train_captures, size, epochs, lambda, base_channels, comparators, \
                     fusion_reg or directions)"
                )))
            }
        }
        Ok(())
    }

    /// Apply a `key=value` config file (`#` comments and blank lines
    /// allowed) on top of the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(path, format!("line {}: expected key=value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The effective configuration as `key=value` lines (echoed into the
    /// report for provenance).
    pub fn to_text(&self) -> String {
        let list = |tags: Vec<&str>| tags.join(",");
        format!(
            "seed={}\nidentities={}\ncaptures={}\ntrain_captures={}\nsize={}\nepochs={}\n\
             lambda={}\nbase_channels={}\ncomparators={}\nfusion_reg={}\ndirections={}\n",
            self.seed,
            self.identities,
            self.captures,
            self.train_captures,
            self.image_size,
            self.translator_epochs,
            self.lambda_l1,
            self.base_channels,
            list(self.comparators.iter().map(|k| k.tag()).collect()),
            self.fusion_reg,
            list(self.directions.iter().map(|d| d.tag()).collect()),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        for &d in &self.directions {
            self.translator_config(d).validate()?;
        }
        if self.comparators.is_empty() {
            return Err(Error::Config("comparator list must not be empty".into()));
        }
        for &kind in &self.comparators {
            if kind == DescriptorKind::Embed {
                return Err(Error::Config(
                    "the pipeline extracts hand-crafted descriptors only (lbp, hog); \
                     embedding descriptors come from the verification heads API"
                        .into(),
                ));
            }
        }
        let mut seen = Vec::new();
        for &d in &self.directions {
            if seen.contains(&d) {
                return Err(Error::Config(format!("duplicate direction `{d}`")));
            }
            seen.push(d);
        }
        if !self.fusion_reg.is_finite() || self.fusion_reg < 0.0 {
            return Err(Error::Config(format!(
                "fusion_reg must be finite and >= 0, got {}",
                self.fusion_reg
            )));
        }
        if self.captures <= self.train_captures {
            return Err(Error::Config(format!(
                "captures ({}) must exceed train_captures ({}) so test trials exist",
                self.captures, self.train_captures
            )));
        }
        Ok(())
    }

    /// Dataset generator config for this run.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            identities: self.identities,
            captures: self.captures,
            train_captures: self.train_captures,
            size: self.image_size,
            seed: self.seed,
            ..SynthConfig::default()
        }
    }

    /// Translator config for one direction. The training seed mixes the run
    /// seed with the direction tag so the two translators use unrelated
    /// initialization and shuffle streams.
    pub fn translator_config(&self, direction: Direction) -> TranslatorConfig {
        TranslatorConfig {
            image_size: self.image_size,
            base_channels: self.base_channels,
            lambda_l1: self.lambda_l1,
            epochs: self.translator_epochs,
            seed: derive_seed(self.seed, &[b"translator", direction.tag().as_bytes()]),
            direction,
            ..TranslatorConfig::default()
        }
    }

    /// The scenarios this configuration evaluates: both intra-spectral
    /// baselines, the raw cross-spectral case, and one translated scenario
    /// per configured direction.
    pub fn active_scenarios(&self) -> Vec<Scenario> {
        Scenario::ALL
            .into_iter()
            .filter(|s| match s.direction() {
                None => true,
                Some(d) => self.directions.contains(&d),
            })
            .collect()
    }

    // Artifact paths, all under the working directory.

    pub fn dataset_dir(&self) -> PathBuf {
        self.workdir.join("dataset")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dataset_dir().join("manifest.txt")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.workdir.join("models")
    }

    pub fn translator_path(&self, direction: Direction) -> PathBuf {
        self.models_dir()
            .join(format!("translator_{}.nvtc", direction.tag()))
    }

    pub fn translator_log_path(&self, direction: Direction) -> PathBuf {
        self.models_dir()
            .join(format!("translator_{}.log", direction.tag()))
    }

    pub fn translated_dir(&self, direction: Direction) -> PathBuf {
        self.workdir.join("translated").join(direction.tag())
    }

    pub fn translated_manifest_path(&self, direction: Direction) -> PathBuf {
        self.translated_dir(direction).join("manifest.txt")
    }

    pub fn descriptor_dir(&self, kind: DescriptorKind) -> PathBuf {
        self.workdir.join("descriptors").join(kind.tag())
    }

    pub fn descriptor_path(&self, kind: DescriptorKind, image_key: &str) -> PathBuf {
        self.descriptor_dir(kind).join(format!("{image_key}.nvd"))
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.workdir.join("scores")
    }

    /// Score file for one (role, scenario, comparator) cell; `comparator`
    /// is a descriptor tag or [`FUSED_COMPARATOR`].
    pub fn score_path(&self, role: Role, scenario: Scenario, comparator: &str) -> PathBuf {
        self.scores_dir()
            .join(format!("{}_{}_{}.scores", role.tag(), scenario.tag(), comparator))
    }

    pub fn fusion_path(&self, scenario: Scenario) -> PathBuf {
        self.workdir
            .join("fusion")
            .join(format!("{}.fusion", scenario.tag()))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.workdir.join("report")
    }

    pub fn summary_path(&self) -> PathBuf {
        self.report_dir().join("summary.txt")
    }

    pub fn det_csv_path(&self, scenario: Scenario, comparator: &str) -> PathBuf {
        self.report_dir()
            .join(format!("det_{}_{}.csv", scenario.tag(), comparator))
    }

    pub fn det_svg_path(&self) -> PathBuf {
        self.report_dir().join("det_overlay.svg")
    }
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// Mix a run seed with domain tags into an independent stream seed.
fn derive_seed(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    for p in parts {
        bytes.push(0xff);
        bytes.extend_from_slice(p);
    }
    fnv1a64(&bytes)
}

/// `class_id` back to numeric identity and eye (`id017_L` -> (17, Left)).
fn parse_class_id(class_id: &str) -> Result<(u32, Eye)> {
    let err = || {
        Error::InvalidInput(format!(
            "class id `{class_id}` does not match the `id<index>_<L|R>` convention"
        ))
    };
    let rest = class_id.strip_prefix("id").ok_or_else(err)?;
    let (number, eye_tag) = rest.split_once('_').ok_or_else(err)?;
    let identity: u32 = number.parse().map_err(|_| err())?;
    let eye = Eye::from_tag(eye_tag).map_err(|_| err())?;
    Ok((identity, eye))
}

/// Stable artifact stem for one image: matches
/// [`SpectralImage::image_key`] for images built from the same record.
fn image_stem(class_id: &str, spectrum: Spectrum, capture: usize) -> String {
    format!("{}_{}_c{:02}", class_id, spectrum.tag(), capture)
}

/// Load the image behind a manifest record, attaching metadata parsed from
/// its class id.
fn load_record(base_dir: &Path, record: &ImageRecord) -> Result<SpectralImage> {
    let (identity, eye) = parse_class_id(&record.class_id)?;
    SpectralImage::load(
        &base_dir.join(&record.path),
        record.spectrum,
        identity,
        eye,
        record.capture_index as u32,
    )
}

/// Load a manifest, or fail naming the command that writes it.
fn load_manifest(path: &Path, stage: &str, hint: &str) -> Result<DatasetSplit> {
    if !path.exists() {
        return Err(Error::MissingStageInput {
            stage: stage.into(),
            path: path.to_path_buf(),
            hint: hint.into(),
        });
    }
    DatasetSplit::load(path)
}

/// Save a PNG via a temp file in the same directory plus atomic rename.
/// The temp name keeps the `.png` extension because the codec is chosen by
/// extension.
fn save_png_atomic(image: &SpectralImage, dir: &Path, name: &str) -> Result<()> {
    let tmp = dir.join(format!(".tmp.{name}"));
    image.save_png(&tmp)?;
    let path = dir.join(name);
    fs::rename(&tmp, &path).map_err(|e| Error::io(path, e))
}

/// Generate the synthetic dataset into `<workdir>/dataset`.
pub fn stage_synth(config: &PipelineConfig) -> Result<DatasetSplit> {
    config.validate()?;
    gen_dataset(&config.synth_config(), &config.dataset_dir())
}

/// Train the translator for one direction on the training captures and
/// save its checkpoint and training log under `<workdir>/models`.
pub fn stage_train_translator(
    config: &PipelineConfig,
    direction: Direction,
) -> Result<TrainingLog> {
    config.validate()?;
    let split = load_manifest(&config.manifest_path(), "train-translator", "synth-gen")?;
    let dataset_dir = config.dataset_dir();

    let mut pairs = Vec::new();
    for class in split.classes() {
        for capture in split.captures(&class, Role::Train) {
            let nir = split.find(&class, Spectrum::Nir, capture).ok_or_else(|| {
                Error::InvalidInput(format!("{class} capture {capture} has no nir image"))
            })?;
            let vis = split.find(&class, Spectrum::Vis, capture).ok_or_else(|| {
                Error::InvalidInput(format!("{class} capture {capture} has no vis image"))
            })?;
            pairs.push(PairedSample {
                nir: load_record(&dataset_dir, nir)?,
                vis: load_record(&dataset_dir, vis)?,
            });
        }
    }

    let trained = train_translator(&pairs, &config.translator_config(direction))?;
    trained.translator.save(&config.translator_path(direction))?;
    crate::write_atomic(
        &config.translator_log_path(direction),
        trained.log.to_text().as_bytes(),
    )?;
    Ok(trained.log)
}

/// Translate every source-spectrum image (training and test captures) with
/// the saved translator for `direction`, writing PNGs and a manifest under
/// `<workdir>/translated/<direction>`. Each image's dropout stream is
/// derived from the run seed and the image key, so reruns are
/// byte-identical.
pub fn stage_translate(config: &PipelineConfig, direction: Direction) -> Result<DatasetSplit> {
    config.validate()?;
    let split = load_manifest(&config.manifest_path(), "translate", "synth-gen")?;
    let model_path = config.translator_path(direction);
    if !model_path.exists() {
        return Err(Error::MissingStageInput {
            stage: "translate".into(),
            path: model_path,
            hint: format!("train-translator --direction {}", direction.tag()),
        });
    }
    let translator = Translator::load(&model_path)?;

    let out_dir = config.translated_dir(direction);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let dataset_dir = config.dataset_dir();

    let mut records = Vec::new();
    for record in &split.records {
        if record.spectrum != direction.source() {
            continue;
        }
        let image = load_record(&dataset_dir, record)?;
        let dropout_seed = derive_seed(
            config.seed,
            &[b"dropout", direction.tag().as_bytes(), image.image_key().as_bytes()],
        );
        let translated = translator.translate(&image, dropout_seed)?;
        let name = format!("{}.png", translated.image_key());
        save_png_atomic(&translated, &out_dir, &name)?;
        records.push(ImageRecord {
            class_id: record.class_id.clone(),
            spectrum: translated.spectrum,
            path: name,
            role: record.role,
            capture_index: record.capture_index,
        });
    }

    let translated_split = DatasetSplit { records };
    translated_split.save(&config.translated_manifest_path(direction))?;
    Ok(translated_split)
}

/// All (base directory, manifest) pairs the descriptor and scoring stages
/// read: the real dataset plus one translated set per configured direction.
fn image_sources(config: &PipelineConfig, stage: &str) -> Result<Vec<(PathBuf, DatasetSplit)>> {
    let mut sources = vec![(
        config.dataset_dir(),
        load_manifest(&config.manifest_path(), stage, "synth-gen")?,
    )];
    for &direction in &config.directions {
        let manifest = config.translated_manifest_path(direction);
        let split = load_manifest(
            &manifest,
            stage,
            &format!("translate --direction {}", direction.tag()),
        )?;
        sources.push((config.translated_dir(direction), split));
    }
    Ok(sources)
}

/// Extract every configured descriptor for every real and translated image
/// into `<workdir>/descriptors/<kind>`. Returns the number of descriptor
/// files written.
pub fn stage_extract(config: &PipelineConfig) -> Result<usize> {
    config.validate()?;
    let sources = image_sources(config, "extract")?;
    for &kind in &config.comparators {
        let dir = config.descriptor_dir(kind);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let hog_params = HogParams::default();
    let lbp_params = LbpParams::default();
    let mut written = 0;
    for (base_dir, split) in &sources {
        for record in &split.records {
            let image = load_record(base_dir, record)?;
            let stem = image.image_key();
            for &kind in &config.comparators {
                let descriptor = match kind {
                    DescriptorKind::Lbp => lbp(&image, &lbp_params)?,
                    DescriptorKind::Hog => hog(&image, &hog_params)?,
                    DescriptorKind::Embed => unreachable!("rejected by validate"),
                };
                descriptor.save(&config.descriptor_path(kind, &stem))?;
                written += 1;
            }
        }
    }
    Ok(written)
}

/// In-memory descriptor store keyed by (kind, image stem), loaded lazily.
struct DescriptorCache<'c> {
    config: &'c PipelineConfig,
    loaded: HashMap<(DescriptorKind, String), Descriptor>,
}

impl<'c> DescriptorCache<'c> {
    fn new(config: &'c PipelineConfig) -> Self {
        DescriptorCache {
            config,
            loaded: HashMap::new(),
        }
    }

    fn get(&mut self, kind: DescriptorKind, stem: &str) -> Result<&Descriptor> {
        let key = (kind, stem.to_string());
        if !self.loaded.contains_key(&key) {
            let path = self.config.descriptor_path(kind, stem);
            if !path.exists() {
                return Err(Error::MissingStageInput {
                    stage: "score".into(),
                    path,
                    hint: "extract".into(),
                });
            }
            self.loaded.insert(key.clone(), Descriptor::load(&path)?);
        }
        Ok(&self.loaded[&key])
    }
}

/// Score one trial set under one scenario with one comparator.
fn score_trials(
    cache: &mut DescriptorCache,
    trials: &TrialSet,
    scenario: Scenario,
    kind: DescriptorKind,
) -> Result<ScoreSet> {
    let mut scores = Vec::with_capacity(trials.trials.len());
    for trial in &trials.trials {
        let probe_stem = image_stem(&trial.probe_class, scenario.probe_spectrum(), trial.probe_capture);
        let gallery_stem = image_stem(
            &trial.gallery_class,
            scenario.gallery_spectrum(),
            trial.gallery_capture,
        );
        let score = {
            let probe = cache.get(kind, &probe_stem)?.clone();
            let gallery = cache.get(kind, &gallery_stem)?;
            match kind {
                DescriptorKind::Lbp => chi2_distance(&probe, gallery)?,
                DescriptorKind::Hog => cosine_distance(&probe, gallery)?,
                DescriptorKind::Embed => chi2_distance(&probe, gallery)?,
            }
        };
        scores.push(TrialScore {
            probe: probe_stem,
            gallery: gallery_stem,
            label: trial.label,
            value: score.canonical(),
        });
    }
    Ok(ScoreSet {
        comparator: kind.tag().to_string(),
        scores,
    })
}

/// Score every active scenario with every comparator, over both the test
/// trials (for evaluation) and the training-capture trials (for fusion
/// fitting). Writes one score file per (role, scenario, comparator).
pub fn stage_score(config: &PipelineConfig) -> Result<()> {
    config.validate()?;
    let split = load_manifest(&config.manifest_path(), "score", "synth-gen")?;
    let test_trials = build_trials(&split)?;
    let train_trials = build_training_trials(&split)?;
    let dir = config.scores_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    // One shared cache: intra- and cross-spectral scenarios reuse the same
    // descriptors on the probe side.
    let mut cache = DescriptorCache::new(config);
    for scenario in config.active_scenarios() {
        for &kind in &config.comparators {
            for (role, trials) in [(Role::Test, &test_trials), (Role::Train, &train_trials)] {
                let set = score_trials(&mut cache, trials, scenario, kind)?;
                set.save(&config.score_path(role, scenario, kind.tag()))?;
            }
        }
    }
    Ok(())
}

/// Load the score files of all comparators for one (role, scenario) cell
/// and return them column-aligned: per-trial feature rows plus labels and
/// trial endpoints (taken from the first comparator).
fn aligned_scores(
    config: &PipelineConfig,
    role: Role,
    scenario: Scenario,
    stage: &str,
) -> Result<(Vec<ScoreSet>, Vec<Vec<f64>>, Vec<TrialLabel>)> {
    let mut sets = Vec::new();
    for &kind in &config.comparators {
        let path = config.score_path(role, scenario, kind.tag());
        if !path.exists() {
            return Err(Error::MissingStageInput {
                stage: stage.into(),
                path,
                hint: "score".into(),
            });
        }
        sets.push(ScoreSet::load(&path)?);
    }
    let n = sets[0].scores.len();
    for set in &sets[1..] {
        if set.scores.len() != n {
            return Err(Error::InvalidInput(format!(
                "score files for {} disagree in trial count ({} vs {}); rerun `score`",
                scenario.tag(),
                n,
                set.scores.len()
            )));
        }
        for (a, b) in sets[0].scores.iter().zip(&set.scores) {
            if a.probe != b.probe || a.gallery != b.gallery || a.label != b.label {
                return Err(Error::InvalidInput(format!(
                    "score files for {} disagree on trial {} vs {}; rerun `score`",
                    scenario.tag(),
                    a.probe,
                    b.probe
                )));
            }
        }
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| sets.iter().map(|s| s.scores[i].value).collect())
        .collect();
    let labels: Vec<TrialLabel> = sets[0].scores.iter().map(|t| t.label).collect();
    Ok((sets, rows, labels))
}

/// Fit one fusion model per scenario on the training-capture scores, save
/// it under `<workdir>/fusion`, and write the fused test score files.
pub fn stage_fuse(config: &PipelineConfig) -> Result<()> {
    config.validate()?;
    let dir = config.workdir.join("fusion");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    for scenario in config.active_scenarios() {
        let (_, train_rows, train_labels) = aligned_scores(config, Role::Train, scenario, "fuse")?;
        let mut model = train_fusion(&train_rows, &train_labels, config.fusion_reg)?;
        model.comparators = config.comparators.iter().map(|k| k.tag().to_string()).collect();
        model.save(&config.fusion_path(scenario))?;

        let (test_sets, test_rows, _) = aligned_scores(config, Role::Test, scenario, "fuse")?;
        let fused_values = apply_fusion(&model, &test_rows)?;
        let scores = test_sets[0]
            .scores
            .iter()
            .zip(fused_values)
            .map(|(t, value)| TrialScore {
                probe: t.probe.clone(),
                gallery: t.gallery.clone(),
                label: t.label,
                value,
            })
            .collect();
        let fused = ScoreSet {
            comparator: FUSED_COMPARATOR.to_string(),
            scores,
        };
        fused.save(&config.score_path(Role::Test, scenario, FUSED_COMPARATOR))?;
    }
    Ok(())
}

/// Verification metrics of one (scenario, comparator) cell.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub scenario: Scenario,
    pub comparator: String,
    pub eer: f64,
    /// GAR at the largest threshold with FAR <= 1%, with the achieved FAR.
    pub gar_far_1: (f64, f64),
    /// GAR at the largest threshold with FAR <= 0.1%, with the achieved FAR.
    pub gar_far_01: (f64, f64),
}

/// Everything `eval` reports: per-cell metrics plus the DET curves behind
/// them (reused by `report` for CSVs and the overlay plot).
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub genuine_trials: usize,
    pub impostor_trials: usize,
    pub rows: Vec<MetricRow>,
    pub curves: Vec<(Scenario, String, DetCurve)>,
    /// Effective configuration echo.
    pub config_text: String,
}

impl EvalSummary {
    /// Render the summary block: dataset line, trial counts, then one
    /// metrics row per (scenario, comparator).
    pub fn to_text(&self) -> String {
        let mut out = String::from("cross-spectral verification summary\n");
        out.push_str("====================================\n\n");
        for line in self.config_text.lines() {
            let _ = writeln!(out, "  {line}");
        }
        let _ = writeln!(
            out,
            "\ntrials per scenario: {} genuine / {} impostor\n",
            self.genuine_trials, self.impostor_trials
        );
        let _ = writeln!(
            out,
            "{:<36} {:<6} {:>8}  {:>18}  {:>18}",
            "scenario", "comp", "EER", "GAR@FAR<=1%", "GAR@FAR<=0.1%"
        );
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:<36} {:<6} {:>7.2}%  {:>7.2}% @{:>6.3}%  {:>7.2}% @{:>6.3}%",
                row.scenario.label(),
                row.comparator,
                100.0 * row.eer,
                100.0 * row.gar_far_1.0,
                100.0 * row.gar_far_1.1,
                100.0 * row.gar_far_01.0,
                100.0 * row.gar_far_01.1,
            );
        }
        out
    }

    /// The metrics row for one (scenario, comparator) cell, if present.
    pub fn row(&self, scenario: Scenario, comparator: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.comparator == comparator)
    }
}

/// Compute DET curves and summary metrics for every active scenario and
/// comparator (including the fused column) from the saved test score
/// files.
pub fn stage_eval(config: &PipelineConfig) -> Result<EvalSummary> {
    config.validate()?;
    let mut columns: Vec<String> = config.comparators.iter().map(|k| k.tag().to_string()).collect();
    columns.push(FUSED_COMPARATOR.to_string());

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut genuine_trials = 0;
    let mut impostor_trials = 0;
    for scenario in config.active_scenarios() {
        for comparator in &columns {
            let path = config.score_path(Role::Test, scenario, comparator);
            if !path.exists() {
                let hint = if comparator == FUSED_COMPARATOR { "fuse" } else { "score" };
                return Err(Error::MissingStageInput {
                    stage: "eval".into(),
                    path,
                    hint: hint.into(),
                });
            }
            let set = ScoreSet::load(&path)?;
            let labeled = set.labeled();
            genuine_trials = labeled.iter().filter(|(l, _)| *l == TrialLabel::Genuine).count();
            impostor_trials = labeled.len() - genuine_trials;
            let curve = compute_det(&labeled)?;
            rows.push(MetricRow {
                scenario,
                comparator: comparator.clone(),
                eer: eer(&curve),
                gar_far_1: gar_at_far(&curve, 0.01)?,
                gar_far_01: gar_at_far(&curve, 0.001)?,
            });
            curves.push((scenario, comparator.clone(), curve));
        }
    }
    Ok(EvalSummary {
        genuine_trials,
        impostor_trials,
        rows,
        curves,
        config_text: config.to_text(),
    })
}

/// Write the report artifacts: `summary.txt`, one DET CSV per (scenario,
/// comparator), and the DET overlay SVG (fused comparator, one curve per
/// scenario). Returns the summary so callers can print it.
pub fn stage_report(config: &PipelineConfig) -> Result<EvalSummary> {
    let summary = stage_eval(config)?;
    let dir = config.report_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    crate::write_atomic(&config.summary_path(), summary.to_text().as_bytes())?;
    for (scenario, comparator, curve) in &summary.curves {
        crate::write_atomic(
            &config.det_csv_path(*scenario, comparator),
            curve.to_csv().as_bytes(),
        )?;
    }
    let overlay: Vec<(&str, &DetCurve)> = summary
        .curves
        .iter()
        .filter(|(_, c, _)| c == FUSED_COMPARATOR)
        .map(|(s, _, curve)| (s.label(), curve))
        .collect();
    crate::write_atomic(&config.det_svg_path(), render_det_svg(&overlay).as_bytes())?;
    Ok(summary)
}

/// Run the full chain: synth-gen, then per direction train-translator and
/// translate, then extract, score, fuse, and report.
pub fn run_all(config: &PipelineConfig) -> Result<EvalSummary> {
    config.validate()?;
    stage_synth(config)?;
    for &direction in &config.directions {
        stage_train_translator(config, direction)?;
        stage_translate(config, direction)?;
    }
    stage_extract(config)?;
    stage_score(config)?;
    stage_fuse(config)?;
    stage_report(config)
}

// --- DET overlay plot ---------------------------------------------------

const SVG_PALETTE: [&str; 5] = ["#1b6ca8", "#c23b22", "#2e8540", "#7d3c98", "#b7950b"];
/// Display floor for log axes; rates below it (including exact zeros) are
/// clamped to the plot edge.
const SVG_FLOOR: f64 = 1e-3;

/// Render DET curves (FAR on x, FRR on y, both log-scaled over
/// [0.1%, 100%]) as a standalone SVG document. Rates are clamped to the
/// axis floor, so curves that reach zero error run along the plot edge.
pub fn render_det_svg(curves: &[(&str, &DetCurve)]) -> String {
    let (width, height) = (760.0, 560.0);
    let (left, right, top, bottom) = (70.0, 250.0, 40.0, 60.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let span = -SVG_FLOOR.log10(); // decades shown per axis

    let x_of = |far: f64| left + (far.max(SVG_FLOOR).log10() / span + 1.0) * plot_w;
    let y_of = |frr: f64| top + plot_h - (frr.max(SVG_FLOOR).log10() / span + 1.0) * plot_h;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{left}\" y=\"24\" font-size=\"14\">DET curves (fused comparator)</text>\n"
    );

    // Grid and tick labels at the decades.
    let decades = [(1.0, "100%"), (0.1, "10%"), (0.01, "1%"), (0.001, "0.1%")];
    for (value, label) in decades {
        let x = x_of(value);
        let y = y_of(value);
        let _ = writeln!(
            svg,
            "<line x1=\"{x:.1}\" y1=\"{top}\" x2=\"{x:.1}\" y2=\"{:.1}\" \
             stroke=\"#dddddd\"/>\n\
             <line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#dddddd\"/>\n\
             <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{label}</text>",
            top + plot_h,
            left + plot_w,
            top + plot_h + 16.0,
            left - 6.0,
            y + 4.0,
        );
    }
    let _ = writeln!(
        svg,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"#333333\"/>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">false acceptance rate</text>\n\
         <text x=\"16\" y=\"{:.1}\" transform=\"rotate(-90 16 {:.1})\" \
         text-anchor=\"middle\">false rejection rate</text>",
        left + plot_w / 2.0,
        height - 16.0,
        top + plot_h / 2.0,
        top + plot_h / 2.0,
    );

    for (i, (label, curve)) in curves.iter().enumerate() {
        let color = SVG_PALETTE[i % SVG_PALETTE.len()];
        let mut points = String::new();
        for (far, frr) in curve.far.iter().zip(&curve.frr) {
            let _ = write!(points, "{:.2},{:.2} ", x_of(*far), y_of(*frr));
        }
        let legend_y = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n\
             <line x1=\"{:.1}\" y1=\"{legend_y:.1}\" x2=\"{:.1}\" y2=\"{legend_y:.1}\" \
             stroke=\"{color}\" stroke-width=\"1.5\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{label}</text>",
            points.trim_end(),
            left + plot_w + 12.0,
            left + plot_w + 34.0,
            left + plot_w + 40.0,
            legend_y + 4.0,
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Build the verification trial set for a hypothetical protocol of `users`
/// classes with `test_captures` test images each (one spectrum), using the
/// real trial generator on an in-memory manifest. Genuine count is
/// `U*T*(T-1)/2`, impostor count `U*(U-1)`.
pub fn protocol_trials(users: usize, test_captures: usize) -> Result<TrialSet> {
    if users == 0 || test_captures == 0 {
        return Err(Error::Config(
            "protocol needs at least one user and one test capture".into(),
        ));
    }
    let mut records = Vec::with_capacity(users * test_captures);
    for u in 0..users {
        for c in 0..test_captures {
            records.push(ImageRecord {
                class_id: format!("id{u:03}_{}", if u % 2 == 0 { "L" } else { "R" }),
                spectrum: Spectrum::Nir,
                path: format!("u{u}_c{c}.png"),
                role: Role::Test,
                capture_index: c,
            });
        }
    }
    build_trials(&DatasetSplit { records })
}
