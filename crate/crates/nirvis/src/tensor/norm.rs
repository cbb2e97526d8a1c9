//! Batch normalization over `[N, C, H, W]`, normalizing each channel across
//! batch and spatial positions.

use super::{Scalar, Tensor};

impl<T: Scalar> Tensor<T> {
    /// Training-mode batch norm: normalize with the batch mean and (biased)
    /// batch variance, scale by `gamma` and shift by `beta`. Returns the
    /// output plus the per-channel batch mean and biased variance so the
    /// caller can maintain running statistics.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: T,
    ) -> (Tensor<T>, Vec<T>, Vec<T>) {
        let s = self.shape();
        assert!(s.len() == 4, "batch_norm expects [N,C,H,W], got {s:?}");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(gamma.shape() == vec![c], "gamma must be [{c}]");
        assert!(beta.shape() == vec![c], "beta must be [{c}]");
        let m = n * h * w;
        assert!(m > 0, "batch_norm needs at least one element per channel");
        let hw = h * w;
        let inv_m = T::fl(1.0 / m as f64);

        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); n * c * hw];
        let mut out = vec![T::zero(); n * c * hw];
        {
            let xn = self.node_ref();
            let gn = gamma.node_ref();
            let bn = beta.node_ref();
            for ch in 0..c {
                let mut acc = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    acc += xn.data[base..base + hw].iter().copied().sum::<T>();
                }
                mean[ch] = acc * inv_m;
                let mut vacc = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for v in &xn.data[base..base + hw] {
                        let d = *v - mean[ch];
                        vacc += d * d;
                    }
                }
                var[ch] = vacc * inv_m;
                inv_std[ch] = T::one() / (var[ch] + eps).sqrt();
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        let xh = (xn.data[i] - mean[ch]) * inv_std[ch];
                        xhat[i] = xh;
                        out[i] = gn.data[ch] * xh + bn.data[ch];
                    }
                }
            }
        }

        let xhat_saved = xhat;
        let inv_saved = inv_std;
        let y = Tensor::from_op(
            out,
            s.clone(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, parents| {
                // Per channel: dx = gamma*inv/m * (m*g - sum(g) - xhat*sum(g*xhat))
                let gamma_data = parents[1].node_ref().data.clone();
                let mut dx = vec![T::zero(); n * c * hw];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mf = T::fl(m as f64);
                for ch in 0..c {
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            sum_g += g[i];
                            sum_gx += g[i] * xhat_saved[i];
                        }
                    }
                    dgamma[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    if parents[0].requires_grad() {
                        let coeff = gamma_data[ch] * inv_saved[ch] * inv_m;
                        for b in 0..n {
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                dx[i] = coeff * (mf * g[i] - sum_g - xhat_saved[i] * sum_gx);
                            }
                        }
                    }
                }
                parents[0].accumulate_grad(&dx);
                parents[1].accumulate_grad(&dgamma);
                parents[2].accumulate_grad(&dbeta);
            },
        );
        (y, mean, var)
    }

    /// Inference-mode batch norm: normalize with frozen running statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Tensor<T> {
        let s = self.shape();
        assert!(s.len() == 4, "batch_norm expects [N,C,H,W], got {s:?}");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(gamma.shape() == vec![c], "gamma must be [{c}]");
        assert!(beta.shape() == vec![c], "beta must be [{c}]");
        assert!(running_mean.len() == c && running_var.len() == c);
        let hw = h * w;

        let rinv: Vec<T> = running_var
            .iter()
            .map(|v| T::one() / (*v + eps).sqrt())
            .collect();
        let rmean = running_mean.to_vec();

        let mut xhat = vec![T::zero(); n * c * hw];
        let mut out = vec![T::zero(); n * c * hw];
        {
            let xn = self.node_ref();
            let gn = gamma.node_ref();
            let bn = beta.node_ref();
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        let xh = (xn.data[i] - rmean[ch]) * rinv[ch];
                        xhat[i] = xh;
                        out[i] = gn.data[ch] * xh + bn.data[ch];
                    }
                }
            }
        }

        let xhat_saved = xhat;
        let rinv_saved = rinv;
        Tensor::from_op(
            out,
            s.clone(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, parents| {
                let gamma_data = parents[1].node_ref().data.clone();
                if parents[0].requires_grad() {
                    let mut dx = vec![T::zero(); n * c * hw];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let coeff = gamma_data[ch] * rinv_saved[ch];
                            for i in base..base + hw {
                                dx[i] = g[i] * coeff;
                            }
                        }
                    }
                    parents[0].accumulate_grad(&dx);
                }
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] * xhat_saved[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                parents[1].accumulate_grad(&dgamma);
                parents[2].accumulate_grad(&dbeta);
            },
        )
    }
}
