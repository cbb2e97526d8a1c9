//! PatchGAN discriminator: three stride-2 convolution blocks followed by
//! two stride-1 blocks and a sigmoid, emitting a spatial map of per-patch
//! real/fake probabilities. It judges the channel concatenation of the
//! condition image and the candidate image, so every patch decision is
//! conditioned on the corresponding input region.
//!
//! Like the generator, batch normalization always runs on batch statistics
//! (see the module notes in `generator.rs`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::generator::{bn_batch, channel_plan};
use crate::tensor::io::entry_map;
use super::TranslatorConfig;
use crate::error::{Error, Result};
use crate::tensor::io::TensorEntry;
use crate::tensor::{conv_output_size, BatchNorm2d, Conv2d, Init, Scalar, Tensor};

const DISC_SEED_TAG: u64 = 0x6469_7363; // "disc"

/// (kernel, stride) of every convolution in the stack, in forward order.
pub const PATCHGAN_STACK: [(usize, usize); 5] = [(4, 2), (4, 2), (4, 2), (4, 1), (4, 1)];

/// Receptive field of one output unit of a convolution stack given as
/// (kernel, stride) pairs: the standard recurrence grows the field by
/// `(k - 1) * jump` per layer while the jump multiplies by the stride.
pub fn receptive_field(stack: &[(usize, usize)]) -> usize {
    let mut r = 1usize;
    let mut j = 1usize;
    for &(k, s) in stack {
        r += (k - 1) * j;
        j *= s;
    }
    r
}

/// Spatial side length of the patch map for a square input of side `n`.
/// Errors if the stack does not fit (input too small).
pub fn patch_map_size(n: usize) -> Result<usize> {
    let mut s = n;
    for &(k, stride) in &PATCHGAN_STACK {
        if s + 2 < k {
            return Err(Error::Config(format!(
                "image_size {n} is too small for the patch discriminator stack \
                 (spatial size shrinks to {s} before a {k}x{k} kernel; minimum is 32)"
            )));
        }
        s = conv_output_size(s, k, stride, 1);
        if s == 0 {
            return Err(Error::Config(format!(
                "image_size {n} is too small for the patch discriminator stack (minimum is 32)"
            )));
        }
    }
    Ok(s)
}

struct DiscLayer<T: Scalar> {
    conv: Conv2d<T>,
    norm: Option<BatchNorm2d<T>>,
}

/// The patch discriminator. Built by [`build_discriminator`].
pub struct Discriminator<T: Scalar> {
    layers: Vec<DiscLayer<T>>,
    condition_channels: usize,
    candidate_channels: usize,
}

/// Build the PatchGAN for `config`. The five-layer stack is fixed — its
/// receptive field is 70 pixels regardless of image size — and only the
/// channel widths follow `base_channels`/`max_channels`. Inputs smaller
/// than 70 pixels are allowed (each patch then sees the whole image);
/// inputs the stack cannot reduce to at least a 1x1 map are rejected.
pub fn build_discriminator<T: Scalar>(config: &TranslatorConfig) -> Result<Discriminator<T>> {
    config.validate()?;
    patch_map_size(config.image_size)?;
    let c = channel_plan(4, config.base_channels, config.max_channels);
    let cin = config.in_channels + config.out_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ DISC_SEED_TAG);
    let init = Init::Normal(0.02);

    let mut layers = Vec::with_capacity(5);
    let widths = [cin, c[0], c[1], c[2], c[3], 1];
    for (i, &(k, s)) in PATCHGAN_STACK.iter().enumerate() {
        let has_bn = i != 0 && i != 4;
        layers.push(DiscLayer {
            conv: Conv2d::new(widths[i], widths[i + 1], k, s, 1, !has_bn, init, &mut rng),
            norm: has_bn.then(|| BatchNorm2d::new(widths[i + 1])),
        });
    }
    Ok(Discriminator {
        layers,
        condition_channels: config.in_channels,
        candidate_channels: config.out_channels,
    })
}

impl<T: Scalar> Discriminator<T> {
    /// Patch probability map in (0, 1) for (condition, candidate), both
    /// `[N, C, S, S]`.
    pub fn forward(&self, condition: &Tensor<T>, candidate: &Tensor<T>) -> Tensor<T> {
        let cs = condition.shape();
        let ys = candidate.shape();
        assert!(
            cs.len() == 4 && ys.len() == 4 && cs[0] == ys[0] && cs[2..] == ys[2..],
            "condition {cs:?} and candidate {ys:?} must agree on batch and spatial dims"
        );
        assert!(
            cs[1] == self.condition_channels && ys[1] == self.candidate_channels,
            "expected {}+{} channels, got {}+{}",
            self.condition_channels,
            self.candidate_channels,
            cs[1],
            ys[1]
        );
        let mut h = Tensor::concat_axis1(&[condition, candidate]);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.conv.forward(&h);
            if let Some(bn) = &l.norm {
                h = bn_batch(bn, &h);
            }
            if i != last {
                h = h.leaky_relu(T::fl(0.2));
            }
        }
        h.sigmoid()
    }

    /// Receptive field of one patch decision in input pixels: 70.
    pub fn receptive_field(&self) -> usize {
        receptive_field(&PATCHGAN_STACK)
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut p = Vec::new();
        for l in &self.layers {
            p.extend(l.conv.params());
            if let Some(bn) = &l.norm {
                p.extend(bn.params());
            }
        }
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }

    pub(super) fn export(&self, prefix: &str) -> Vec<TensorEntry> {
        let mut entries = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.conv.export(&format!("{prefix}.layer{i}.conv"), &mut entries);
            if let Some(bn) = &l.norm {
                bn.export(&format!("{prefix}.layer{i}.norm"), &mut entries);
            }
        }
        entries
            .into_iter()
            .map(|(name, shape, data)| TensorEntry { name, shape, data })
            .collect()
    }

    pub(super) fn import(
        &self,
        prefix: &str,
        map: &crate::tensor::StateMap,
    ) -> std::result::Result<(), String> {
        for (i, l) in self.layers.iter().enumerate() {
            l.conv.import(&format!("{prefix}.layer{i}.conv"), map)?;
            if let Some(bn) = &l.norm {
                bn.import(&format!("{prefix}.layer{i}.norm"), map)?;
            }
        }
        Ok(())
    }

    /// Save weights plus the config sidecar next to them.
    pub fn save(&self, path: &std::path::Path, config: &TranslatorConfig) -> Result<()> {
        super::save_model(path, self.export("disc"), config)
    }

    /// Load a discriminator and its config from `path` (+ sidecar).
    pub fn load(path: &std::path::Path) -> Result<(Discriminator<T>, TranslatorConfig)> {
        let (entries, config) = super::load_model(path)?;
        let d = build_discriminator::<T>(&config)?;
        let map = entry_map(entries, path)?;
        d.import("disc", &map).map_err(|m| Error::format(path, m))?;
        Ok((d, config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(size: usize) -> TranslatorConfig {
        TranslatorConfig {
            image_size: size,
            ..TranslatorConfig::default()
        }
    }

    #[test]
    fn receptive_field_of_the_stack_is_70() {
        assert_eq!(receptive_field(&PATCHGAN_STACK), 70);
        let d = build_discriminator::<f32>(&cfg(64)).unwrap();
        assert_eq!(d.receptive_field(), 70);
    }

    #[test]
    fn receptive_field_recurrence_on_known_stacks() {
        assert_eq!(receptive_field(&[(3, 1)]), 3);
        assert_eq!(receptive_field(&[(3, 1), (3, 1)]), 5);
        assert_eq!(receptive_field(&[(4, 2)]), 4);
        assert_eq!(receptive_field(&[(4, 2), (4, 2)]), 10);
    }

    #[test]
    fn patch_map_is_30x30_at_paper_scale() {
        assert_eq!(patch_map_size(256).unwrap(), 30);
        let d = build_discriminator::<f32>(&cfg(256)).unwrap();
        let x = Tensor::new(vec![0.1f32; 256 * 256], &[1, 1, 256, 256]);
        let y = Tensor::new(vec![-0.2f32; 256 * 256], &[1, 1, 256, 256]);
        let map = d.forward(&x, &y);
        assert_eq!(map.shape(), vec![1, 1, 30, 30]);
    }

    #[test]
    fn patch_map_is_6x6_at_desk_scale() {
        assert_eq!(patch_map_size(64).unwrap(), 6);
        let d = build_discriminator::<f32>(&cfg(64)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f32> = (0..64 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..64 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let map = d.forward(
            &Tensor::new(x, &[1, 1, 64, 64]),
            &Tensor::new(y, &[1, 1, 64, 64]),
        );
        assert_eq!(map.shape(), vec![1, 1, 6, 6]);
        map.with_data(|d| assert!(d.iter().all(|v| *v > 0.0 && *v < 1.0)));
    }

    #[test]
    fn rejects_sizes_the_stack_cannot_reduce() {
        let err = patch_map_size(16).unwrap_err();
        assert!(err.to_string().contains("too small"), "{err}");
    }

    #[test]
    fn paper_scale_channels_follow_the_doubling_plan() {
        let mut c = cfg(256);
        c.base_channels = 64;
        c.max_channels = 512;
        let d = build_discriminator::<f32>(&c).unwrap();
        // layer widths 2 -> 64 -> 128 -> 256 -> 512 -> 1
        assert_eq!(d.layers[0].conv.weight.shape(), vec![64, 2, 4, 4]);
        assert_eq!(d.layers[3].conv.weight.shape(), vec![512, 256, 4, 4]);
        assert_eq!(d.layers[4].conv.weight.shape(), vec![1, 512, 4, 4]);
    }
}
