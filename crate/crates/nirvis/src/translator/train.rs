//! Translator training: batch size 1, one discriminator step then one
//! generator step per sample, Adam for both networks, early stop on a
//! held-out L1 plateau, and a generator rollback to the best held-out
//! epoch. The whole loop is a pure function of (pairs, config): every
//! random draw comes from ChaCha streams derived from `config.seed`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::discriminator::{build_discriminator, Discriminator};
use super::generator::build_generator;
use super::losses::{discriminator_loss, generator_loss};
use super::{image_to_tensor, Translator, TranslatorConfig};
use crate::error::{Error, Result};
use crate::synth::PairedSample;
use crate::tensor::{Adam, Tensor};

const SHUFFLE_SEED_TAG: u64 = 0x7368_7566; // "shuf"
const DROPOUT_SEED_TAG: u64 = 0x64_726f70; // "drop"
const EVAL_SEED_TAG: u64 = 0x6576_616c; // "eval"

/// Per-epoch aggregates of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean discriminator loss over the epoch's steps.
    pub d_loss: f64,
    /// Mean non-saturating adversarial component of the generator loss.
    pub g_adversarial: f64,
    /// Mean unweighted L1 component of the generator loss.
    pub g_l1: f64,
    /// Mean L1 between translation and target on the held-out pairs
    /// (on the training pairs when nothing could be held out).
    pub holdout_l1: f64,
    /// Patch decisions that saturated the log clamp during this epoch.
    pub saturated_patches: usize,
}

/// Everything the loop observed, epoch by epoch.
#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    /// True when the patience rule ended training before `config.epochs`.
    pub stopped_early: bool,
    /// Best held-out L1; the returned generator is rolled back to it.
    pub best_holdout_l1: f64,
    pub best_epoch: usize,
}

impl TrainingLog {
    /// Render as aligned text lines (used by logs and reports).
    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "epoch  d_loss    g_adv     g_l1      holdout_l1  saturated\n",
        );
        for e in &self.epochs {
            out.push_str(&format!(
                "{:<5}  {:<8.5}  {:<8.5}  {:<8.5}  {:<10.6}  {}\n",
                e.epoch, e.d_loss, e.g_adversarial, e.g_l1, e.holdout_l1, e.saturated_patches
            ));
        }
        out.push_str(&format!(
            "pairs: {} train / {} held out; best holdout L1 {:.6} at epoch {}{}\n",
            self.train_pairs,
            self.holdout_pairs,
            self.best_holdout_l1,
            self.best_epoch,
            if self.stopped_early { " (stopped early)" } else { "" }
        ));
        out
    }
}

/// The result of a training run.
pub struct TrainedTranslator {
    pub translator: Translator,
    pub discriminator: Discriminator<f32>,
    pub log: TrainingLog,
}

/// Reject non-finite losses with a diagnostic snapshot.
fn check_finite(value: f64, what: &str, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            step,
            message: format!("{what} became {value}"),
        })
    }
}

/// Mean absolute difference between two equal-shaped tensors' values.
fn mean_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.with_data(|da| {
        b.with_data(|db| {
            debug_assert!(da.len() == db.len());
            let sum: f64 = da
                .iter()
                .zip(db)
                .map(|(x, y)| (x - y).abs() as f64)
                .sum();
            sum / da.len() as f64
        })
    })
}

/// Train a spectrum translator on pixel-aligned pairs.
///
/// Every pair contributes one discriminator update (real target vs.
/// detached translation) followed by one generator update (re-judging the
/// same translation against the just-updated discriminator). A seeded
/// fraction of the pairs is held out; their mean L1 drives early stopping
/// and the generator is restored to its best-held-out-epoch parameters
/// before returning. With a single pair nothing is held out and the
/// training L1 takes that role.
pub fn train_translator(
    pairs: &[PairedSample],
    config: &TranslatorConfig,
) -> Result<TrainedTranslator> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput(
            "translator training needs at least one pair".into(),
        ));
    }
    let s = config.image_size;
    let mut tensors: Vec<(Tensor<f32>, Tensor<f32>)> = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let (src, dst) = match config.direction {
            super::Direction::Vis2Nir => (&pair.vis, &pair.nir),
            super::Direction::Nir2Vis => (&pair.nir, &pair.vis),
        };
        if src.height != s || src.width != s || dst.height != s || dst.width != s {
            return Err(Error::InvalidInput(format!(
                "pair {i} is {}x{}, config.image_size is {s}",
                src.height, src.width
            )));
        }
        if src.channels != config.in_channels || dst.channels != config.out_channels {
            return Err(Error::InvalidInput(format!(
                "pair {i} has {}->{} channels, config expects {}->{}",
                src.channels, dst.channels, config.in_channels, config.out_channels
            )));
        }
        tensors.push((image_to_tensor(src), image_to_tensor(dst)));
    }

    let generator = build_generator::<f32>(config)?;
    let discriminator = build_discriminator::<f32>(config)?;
    let g_params = generator.params();
    let mut opt_g = Adam::new(g_params.clone(), config.lr as f32)
        .with_betas(config.beta1 as f32, 0.999);
    let mut opt_d = Adam::new(discriminator.params(), config.lr as f32)
        .with_betas(config.beta1 as f32, 0.999);

    // Seeded split: the last `holdout_n` positions of one fixed shuffle.
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SEED_TAG);
    order.shuffle(&mut shuffle_rng);
    let holdout_n = ((pairs.len() as f64 * config.holdout_fraction).round() as usize)
        .min(pairs.len() - 1);
    let (train_idx, holdout_idx) = order.split_at(pairs.len() - holdout_n);
    let mut train_idx = train_idx.to_vec();

    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DROPOUT_SEED_TAG);
    let mut log = TrainingLog {
        train_pairs: train_idx.len(),
        holdout_pairs: holdout_idx.len(),
        best_holdout_l1: f64::INFINITY,
        ..TrainingLog::default()
    };
    let mut best_snapshot: Vec<Vec<f32>> = Vec::new();

    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut shuffle_rng);
        let mut d_sum = 0.0;
        let mut adv_sum = 0.0;
        let mut l1_sum = 0.0;
        let mut saturated = 0usize;

        for (step, &i) in train_idx.iter().enumerate() {
            let (x, y) = &tensors[i];
            let y_fake = generator.forward(x, true, &mut dropout_rng);

            let d_out = discriminator_loss(&discriminator, x, y, &y_fake);
            let d_value = d_out.loss.item() as f64;
            check_finite(d_value, "discriminator loss", epoch, step)?;
            opt_d.zero_grad();
            d_out.loss.backward();
            opt_d.step();

            let g_out = generator_loss(&discriminator, x, y, &y_fake, config.lambda_l1);
            check_finite(g_out.loss.item() as f64, "generator loss", epoch, step)?;
            opt_g.zero_grad();
            g_out.loss.backward();
            opt_g.step();

            d_sum += d_value;
            adv_sum += g_out.adversarial;
            l1_sum += g_out.l1;
            saturated += d_out.saturated_patches + g_out.saturated_patches;
        }

        // Held-out L1 with dropout active but freshly seeded, so the
        // metric is comparable across epochs.
        let eval_idx: &[usize] = if holdout_idx.is_empty() { &train_idx } else { holdout_idx };
        let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ EVAL_SEED_TAG);
        let mut holdout_l1 = 0.0;
        for &i in eval_idx {
            let (x, y) = &tensors[i];
            let fake = generator.forward(x, true, &mut eval_rng);
            holdout_l1 += mean_abs_diff(&fake, y);
        }
        holdout_l1 /= eval_idx.len() as f64;

        let steps = train_idx.len() as f64;
        log.epochs.push(EpochRecord {
            epoch,
            d_loss: d_sum / steps,
            g_adversarial: adv_sum / steps,
            g_l1: l1_sum / steps,
            holdout_l1,
            saturated_patches: saturated,
        });

        if holdout_l1 < log.best_holdout_l1 - 1e-6 {
            log.best_holdout_l1 = holdout_l1;
            log.best_epoch = epoch;
            best_snapshot = g_params.iter().map(Tensor::data).collect();
        } else if epoch - log.best_epoch >= config.patience {
            log.stopped_early = true;
            break;
        }
    }

    for (p, snap) in g_params.iter().zip(&best_snapshot) {
        p.set_data(snap);
    }

    Ok(TrainedTranslator {
        translator: Translator::new(generator, config.clone())?,
        discriminator,
        log,
    })
}
