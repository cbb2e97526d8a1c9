//! U-Net generator: a stride-2 convolutional encoder mirrored by a
//! transposed-convolution decoder, with skip connections pairing encoder
//! level `i` with decoder level `depth - i` and a tanh output head.
//!
//! Batch normalization always uses the statistics of the current batch,
//! also at inference time: with batch size 1 this behaves like instance
//! normalization and makes translation a pure function of the input image
//! and the dropout draws, independent of training history. The running
//! statistics stored by [`BatchNorm2d`] are kept in checkpoints but never
//! consulted by the generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TranslatorConfig;
use crate::error::Result;
use crate::tensor::io::TensorEntry;
use crate::tensor::{BatchNorm2d, Conv2d, ConvTranspose2d, Init, Scalar, Tensor};

/// Seed tag mixed into the config seed for generator initialization, so the
/// generator and discriminator draw from unrelated streams.
const GEN_SEED_TAG: u64 = 0x0067_656e; // "gen"

/// Channel widths per encoder level: doubled at every level, capped.
pub(super) fn channel_plan(depth: usize, base: usize, max: usize) -> Vec<usize> {
    (0..depth).map(|i| (base << i).min(max)).collect()
}

/// Apply batch normalization with batch statistics, ignoring running stats.
pub(super) fn bn_batch<T: Scalar>(bn: &BatchNorm2d<T>, x: &Tensor<T>) -> Tensor<T> {
    let (y, _, _) = x.batch_norm_train(&bn.gamma, &bn.beta, bn.eps);
    y
}

struct DownBlock<T: Scalar> {
    conv: Conv2d<T>,
    norm: Option<BatchNorm2d<T>>,
}

struct UpBlock<T: Scalar> {
    conv: ConvTranspose2d<T>,
    norm: Option<BatchNorm2d<T>>,
    dropout: bool,
}

/// The spectrum-translation generator. Built by [`build_generator`].
pub struct Generator<T: Scalar> {
    downs: Vec<DownBlock<T>>,
    ups: Vec<UpBlock<T>>,
    image_size: usize,
    in_channels: usize,
    out_channels: usize,
    dropout_p: f64,
}

/// Build the U-Net for `config`. The encoder has `log2(image_size)` levels,
/// so the bottleneck is spatially 1x1; initialization is drawn from a
/// ChaCha stream derived from `config.seed`, making the parameter values a
/// pure function of the config.
///
/// The first encoder block and the innermost encoder block carry no batch
/// norm (the innermost activation is 1x1, where batch statistics of a
/// single sample are degenerate); dropout sits in the innermost three
/// decoder blocks.
pub fn build_generator<T: Scalar>(config: &TranslatorConfig) -> Result<Generator<T>> {
    config.validate()?;
    let depth = config.depth();
    let c = channel_plan(depth, config.base_channels, config.max_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ GEN_SEED_TAG);
    let init = Init::Normal(0.02);

    let mut downs = Vec::with_capacity(depth);
    downs.push(DownBlock {
        conv: Conv2d::new(config.in_channels, c[0], 4, 2, 1, true, init, &mut rng),
        norm: None,
    });
    for k in 1..depth {
        let has_bn = k != depth - 1;
        downs.push(DownBlock {
            conv: Conv2d::new(c[k - 1], c[k], 4, 2, 1, !has_bn, init, &mut rng),
            norm: has_bn.then(|| BatchNorm2d::new(c[k])),
        });
    }

    let mut ups = Vec::with_capacity(depth);
    for i in 0..depth {
        let (cin, cout, has_bn, dropout) = if i == 0 {
            (c[depth - 1], c[depth - 2], true, true)
        } else if i < depth - 1 {
            (2 * c[depth - 1 - i], c[depth - 2 - i], true, i < 3)
        } else {
            (2 * c[0], config.out_channels, false, false)
        };
        ups.push(UpBlock {
            conv: ConvTranspose2d::new(cin, cout, 4, 2, 1, !has_bn, init, &mut rng),
            norm: has_bn.then(|| BatchNorm2d::new(cout)),
            dropout,
        });
    }

    Ok(Generator {
        downs,
        ups,
        image_size: config.image_size,
        in_channels: config.in_channels,
        out_channels: config.out_channels,
        dropout_p: config.dropout,
    })
}

impl<T: Scalar> Generator<T> {
    /// Full forward pass on `[N, in_channels, S, S]`, returning
    /// `[N, out_channels, S, S]` with values in [-1, 1].
    ///
    /// Dropout draws come from `rng` when `dropout_active`; the generator
    /// follows the convention of keeping dropout as its only noise source,
    /// active at inference as well (with a caller-fixed seed for
    /// deterministic translation).
    pub fn forward<R: Rng>(&self, x: &Tensor<T>, dropout_active: bool, rng: &mut R) -> Tensor<T> {
        let shape = x.shape();
        assert!(
            shape.len() == 4 && shape[1] == self.in_channels && shape[2] == self.image_size
                && shape[3] == self.image_size,
            "generator expects [N, {}, {s}, {s}] input, got {shape:?}",
            self.in_channels,
            s = self.image_size,
        );

        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(self.downs.len());
        let mut h = x.clone();
        for (i, d) in self.downs.iter().enumerate() {
            if i > 0 {
                h = h.leaky_relu(T::fl(0.2));
            }
            h = d.conv.forward(&h);
            if let Some(bn) = &d.norm {
                h = bn_batch(bn, &h);
            }
            skips.push(h.clone());
        }
        debug_assert!(h.shape()[2] == 1 && h.shape()[3] == 1, "bottleneck is 1x1");

        let depth = self.downs.len();
        for (i, u) in self.ups.iter().enumerate() {
            let input = if i == 0 {
                h
            } else {
                Tensor::concat_axis1(&[&h, &skips[depth - 1 - i]])
            };
            let mut y = input.relu();
            y = u.conv.forward(&y);
            if let Some(bn) = &u.norm {
                y = bn_batch(bn, &y);
            }
            if u.dropout {
                y = y.dropout(self.dropout_p, rng, dropout_active);
            }
            h = y;
        }
        h.tanh()
    }

    /// Number of encoder levels (`log2(image_size)`).
    pub fn encoder_levels(&self) -> usize {
        self.downs.len()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Every trainable parameter tensor (conv weights/biases, norm scales).
    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut p = Vec::new();
        for d in &self.downs {
            p.extend(d.conv.params());
            if let Some(bn) = &d.norm {
                p.extend(bn.params());
            }
        }
        for u in &self.ups {
            p.extend(u.conv.params());
            if let Some(bn) = &u.norm {
                p.extend(bn.params());
            }
        }
        p
    }

    /// Total number of trainable scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }

    pub(super) fn export(&self, prefix: &str) -> Vec<TensorEntry> {
        let mut entries = Vec::new();
        for (i, d) in self.downs.iter().enumerate() {
            d.conv.export(&format!("{prefix}.down{i}.conv"), &mut entries);
            if let Some(bn) = &d.norm {
                bn.export(&format!("{prefix}.down{i}.norm"), &mut entries);
            }
        }
        for (i, u) in self.ups.iter().enumerate() {
            u.conv.export(&format!("{prefix}.up{i}.conv"), &mut entries);
            if let Some(bn) = &u.norm {
                bn.export(&format!("{prefix}.up{i}.norm"), &mut entries);
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
        for (i, d) in self.downs.iter().enumerate() {
            d.conv.import(&format!("{prefix}.down{i}.conv"), map)?;
            if let Some(bn) = &d.norm {
                bn.import(&format!("{prefix}.down{i}.norm"), map)?;
            }
        }
        for (i, u) in self.ups.iter().enumerate() {
            u.conv.import(&format!("{prefix}.up{i}.conv"), map)?;
            if let Some(bn) = &u.norm {
                bn.import(&format!("{prefix}.up{i}.norm"), map)?;
            }
        }
        Ok(())
    }
}
