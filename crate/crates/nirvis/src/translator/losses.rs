//! Conditional-GAN objectives.
//!
//! The discriminator maximizes `log D(x, y) + log(1 - D(x, G(x, z)))`, so
//! its loss is the negation of that sum, averaged over the patch map. The
//! generator minimizes the non-saturating adversarial term
//! `-log D(x, G(x, z))` plus `lambda * mean |y - G(x, z)|`, pushing the
//! translation toward the pixel-aligned target while still having to fool
//! the patch discriminator.
//!
//! Logs are clamped below at [`LOG_CLAMP`]; a clamped patch means the
//! discriminator output saturated, which the loss reports through a
//! counter rather than treating as an error.

use super::discriminator::Discriminator;
use crate::tensor::{Scalar, Tensor};

/// Lower clamp for `ln` arguments inside the adversarial losses.
pub const LOG_CLAMP: f64 = 1e-12;

/// Discriminator objective value plus diagnostics.
pub struct DiscriminatorLoss<T: Scalar> {
    /// Scalar loss; backward reaches only discriminator parameters.
    pub loss: Tensor<T>,
    /// Patches whose log argument hit the clamp in either term.
    pub saturated_patches: usize,
}

/// Generator objective value plus diagnostics.
pub struct GeneratorLoss<T: Scalar> {
    /// Scalar loss `adv + lambda * l1`; backward reaches the generator
    /// through `y_fake` (and the discriminator parameters, whose gradients
    /// the discriminator optimizer clears before its own step).
    pub loss: Tensor<T>,
    /// Non-saturating adversarial component `mean(-log D(x, y_fake))`.
    pub adversarial: f64,
    /// Raw L1 component `mean |y_target - y_fake|` (unweighted).
    pub l1: f64,
    /// Patches whose log argument hit the clamp.
    pub saturated_patches: usize,
}

fn count_low<T: Scalar>(map: &Tensor<T>, clamp: T) -> usize {
    map.with_data(|d| d.iter().filter(|v| **v <= clamp).count())
}

fn count_high<T: Scalar>(map: &Tensor<T>, clamp: T) -> usize {
    map.with_data(|d| d.iter().filter(|v| T::one() - **v <= clamp).count())
}

/// Core patch-map arithmetic of the discriminator objective:
/// `mean(-log d_real) + mean(-log(1 - d_fake))`.
fn patch_bce<T: Scalar>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> (Tensor<T>, usize) {
    let clamp = T::fl(LOG_CLAMP);
    let saturated = count_low(d_real, clamp) + count_high(d_fake, clamp);
    let real_term = d_real.log_clamped(clamp).mean_all().neg();
    let fake_term = d_fake
        .neg()
        .add_scalar(T::one())
        .log_clamped(clamp)
        .mean_all()
        .neg();
    (real_term.add(&fake_term), saturated)
}

/// Discriminator loss on one conditioned pair. `y_fake` is detached here,
/// so this loss can never move generator parameters.
pub fn discriminator_loss<T: Scalar>(
    d: &Discriminator<T>,
    x: &Tensor<T>,
    y_real: &Tensor<T>,
    y_fake: &Tensor<T>,
) -> DiscriminatorLoss<T> {
    let d_real = d.forward(x, y_real);
    let d_fake = d.forward(x, &y_fake.detach());
    let (loss, saturated_patches) = patch_bce(&d_real, &d_fake);
    DiscriminatorLoss {
        loss,
        saturated_patches,
    }
}

/// Generator loss on one conditioned pair; `y_fake` must be the attached
/// generator output so gradients can flow back into it.
pub fn generator_loss<T: Scalar>(
    d: &Discriminator<T>,
    x: &Tensor<T>,
    y_target: &Tensor<T>,
    y_fake: &Tensor<T>,
    lambda_l1: f64,
) -> GeneratorLoss<T> {
    let clamp = T::fl(LOG_CLAMP);
    let d_fake = d.forward(x, y_fake);
    let saturated_patches = count_low(&d_fake, clamp);
    let adv = d_fake.log_clamped(clamp).mean_all().neg();
    let l1 = y_target.sub(y_fake).abs().mean_all();
    let loss = adv.add(&l1.mul_scalar(T::fl(lambda_l1)));
    GeneratorLoss {
        loss,
        adversarial: adv.item().f64(),
        l1: l1.item().f64(),
        saturated_patches,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{central_difference, max_relative_error};
    use crate::translator::{build_discriminator, build_generator, TranslatorConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_config(seed: u64) -> TranslatorConfig {
        TranslatorConfig {
            image_size: 32,
            base_channels: 1,
            max_channels: 4,
            seed,
            ..TranslatorConfig::default()
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-0.95..0.95)).collect()
    }

    /// A discriminator with every parameter zeroed outputs exactly 0.5 on
    /// any input (zero logits through zero convs and zero-centered batch
    /// norm), pinning the loss at its uninformative value 2 ln 2.
    #[test]
    fn uniform_half_discriminator_loss_is_two_ln_two() {
        let d = build_discriminator::<f64>(&toy_config(1)).unwrap();
        for p in d.params() {
            p.update_data(|v| v.fill(0.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 32 * 32;
        let x = Tensor::new(random_image(&mut rng, n), &[1, 1, 32, 32]);
        let y = Tensor::new(random_image(&mut rng, n), &[1, 1, 32, 32]);
        let f = Tensor::new(random_image(&mut rng, n), &[1, 1, 32, 32]);
        let out = discriminator_loss(&d, &x, &y, &f);
        assert!((out.loss.item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert_eq!(out.saturated_patches, 0);
    }

    #[test]
    fn patch_bce_vanishes_for_a_perfect_discriminator() {
        let eps = 1e-9;
        let d_real = Tensor::<f64>::new(vec![1.0 - eps; 9], &[1, 1, 3, 3]);
        let d_fake = Tensor::<f64>::new(vec![eps; 9], &[1, 1, 3, 3]);
        let (loss, saturated) = patch_bce(&d_real, &d_fake);
        assert!(loss.item() < 1e-6, "loss {}", loss.item());
        assert_eq!(saturated, 0);
    }

    #[test]
    fn saturated_patches_are_counted_not_fatal() {
        let d_real = Tensor::<f64>::new(vec![0.0, 0.5, 0.9, 1e-13], &[1, 1, 2, 2]);
        let d_fake = Tensor::<f64>::new(vec![1.0, 0.5, 0.1, 0.2], &[1, 1, 2, 2]);
        let (loss, saturated) = patch_bce(&d_real, &d_fake);
        assert!(loss.item().is_finite());
        // two clamped real patches (0.0 and 1e-13) + one clamped fake (1.0)
        assert_eq!(saturated, 3);
    }

    #[test]
    fn l1_term_is_zero_at_identity_and_linear_in_lambda() {
        let cfg = toy_config(3);
        let d = build_discriminator::<f64>(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 32 * 32;
        let x = Tensor::new(random_image(&mut rng, n), &[1, 1, 32, 32]);
        let y = Tensor::new(random_image(&mut rng, n), &[1, 1, 32, 32]);

        let at_identity = generator_loss(&d, &x, &y, &y, 100.0);
        assert_eq!(at_identity.l1, 0.0);
        assert!((at_identity.loss.item() - at_identity.adversarial).abs() < 1e-12);

        // |y - fake| uniformly 0.1 -> weighted L1 contribution lambda * 0.1.
        let fake = y.add_scalar(-0.1);
        let shifted = generator_loss(&d, &x, &y, &fake, 100.0);
        assert!((shifted.l1 - 0.1).abs() < 1e-12);
        let contribution = shifted.loss.item() - shifted.adversarial;
        assert!((contribution - 10.0).abs() < 1e-9, "contribution {contribution}");
    }

    #[test]
    fn lambda_zero_reduces_to_pure_adversarial_loss() {
        let cfg = toy_config(5);
        let d = build_discriminator::<f64>(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 32 * 32;
        let x = Tensor::new(random_image(&mut rng, n), &[1, 1, 32, 32]);
        let y = Tensor::new(random_image(&mut rng, n), &[1, 1, 32, 32]);
        let fake = Tensor::new(random_image(&mut rng, n), &[1, 1, 32, 32]);
        let out = generator_loss(&d, &x, &y, &fake, 0.0);
        assert!((out.loss.item() - out.adversarial).abs() < 1e-15);
    }

    /// Analytic gradients of the discriminator loss with respect to every
    /// discriminator parameter match central differences on a toy pair.
    ///
    /// The step is 1e-6: batch norm divides by small per-channel standard
    /// deviations, so a weight nudge of 1e-5 is amplified enough to carry
    /// borderline pre-activations across the leaky-ReLU kink, where a
    /// central difference measures a secant instead of the derivative.
    #[test]
    fn discriminator_loss_gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let cfg = toy_config(10 + seed);
            let d = build_discriminator::<f64>(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = 32 * 32;
            let x = Tensor::new(random_image(&mut rng, n), &[1, 1, 32, 32]);
            let y = Tensor::new(random_image(&mut rng, n), &[1, 1, 32, 32]);
            let f = Tensor::new(random_image(&mut rng, n), &[1, 1, 32, 32]);

            for p in d.params() {
                p.zero_grad();
            }
            let out = discriminator_loss(&d, &x, &y, &f);
            out.loss.backward();

            for (pi, p) in d.params().iter().enumerate() {
                let analytic = p.grad().expect("parameter missing gradient");
                let x0 = p.data();
                let numeric = central_difference(
                    |vals| {
                        p.set_data(vals);
                        discriminator_loss(&d, &x, &y, &f).loss.item()
                    },
                    &x0,
                    1e-6,
                );
                p.set_data(&x0);
                let err = max_relative_error(&analytic, &numeric, 1e-6);
                assert!(err < 1e-4, "seed {seed} param {pi}: rel err {err}");
            }
        }
    }

    /// Gradients of the full generator objective, checked through the
    /// complete encoder/decoder chain on a spanning subset of generator
    /// parameters (first conv, one mid batch norm, innermost and outermost
    /// decoder convs) — every op's backward participates in each check.
    #[test]
    fn generator_loss_gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let cfg = toy_config(20 + seed);
            let g = build_generator::<f64>(&cfg).unwrap();
            let d = build_discriminator::<f64>(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let n = 32 * 32;
            let x = Tensor::new(random_image(&mut rng, n), &[1, 1, 32, 32]);
            let y = Tensor::new(random_image(&mut rng, n), &[1, 1, 32, 32]);

            let loss_value = |rng_seed: u64| {
                let mut drop_rng = ChaCha8Rng::seed_from_u64(rng_seed);
                let fake = g.forward(&x, false, &mut drop_rng);
                generator_loss(&d, &x, &y, &fake, 10.0)
            };

            for p in g.params() {
                p.zero_grad();
            }
            let out = loss_value(0);
            out.loss.backward();

            let all = g.params();
            // First, middle and last parameter tensors span the whole chain.
            let picks = [0usize, all.len() / 2, all.len() - 1];
            for &pi in &picks {
                let p = &all[pi];
                let analytic = p.grad().expect("parameter missing gradient");
                let x0 = p.data();
                let numeric = central_difference(
                    |vals| {
                        p.set_data(vals);
                        loss_value(0).loss.item()
                    },
                    &x0,
                    1e-6,
                );
                p.set_data(&x0);
                let err = max_relative_error(&analytic, &numeric, 1e-6);
                assert!(err < 1e-4, "seed {seed} param {pi}: rel err {err}");
            }
        }
    }
}
