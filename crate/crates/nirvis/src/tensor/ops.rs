//! Pointwise, reduction and structural operations.
//!
//! Backward closures read parent data lazily at sweep time instead of cloning
//! it at op construction (except where the output itself is the cheaper thing
//! to keep, e.g. `tanh`). Consequence: leaf data must not be mutated between
//! building a graph and calling `backward()` on it — optimizer steps happen
//! strictly after the sweep, which is how the training loops in this crate
//! are written.

use super::conv::{matmul_nn, matmul_nt, matmul_tn};
use super::{Scalar, Tensor};

fn assert_same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) {
    let (sa, sb) = (a.shape(), b.shape());
    assert!(
        sa == sb,
        "{op}: shape mismatch, lhs {sa:?} vs rhs {sb:?}"
    );
}

impl<T: Scalar> Tensor<T> {
    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_same_shape("add", self, other);
        let (data, shape) = {
            let a = self.node_ref();
            let b = other.node_ref();
            let d: Vec<T> = a.data.iter().zip(&b.data).map(|(x, y)| *x + *y).collect();
            (d, a.shape.clone())
        };
        Tensor::from_op(
            data,
            shape,
            vec![self.clone(), other.clone()],
            |g, parents| {
                parents[0].accumulate_grad(g);
                parents[1].accumulate_grad(g);
            },
        )
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_same_shape("sub", self, other);
        let (data, shape) = {
            let a = self.node_ref();
            let b = other.node_ref();
            let d: Vec<T> = a.data.iter().zip(&b.data).map(|(x, y)| *x - *y).collect();
            (d, a.shape.clone())
        };
        Tensor::from_op(
            data,
            shape,
            vec![self.clone(), other.clone()],
            |g, parents| {
                parents[0].accumulate_grad(g);
                let neg: Vec<T> = g.iter().map(|v| -*v).collect();
                parents[1].accumulate_grad(&neg);
            },
        )
    }

    /// Elementwise (Hadamard) product; shapes must match exactly.
    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_same_shape("mul", self, other);
        let (data, shape) = {
            let a = self.node_ref();
            let b = other.node_ref();
            let d: Vec<T> = a.data.iter().zip(&b.data).map(|(x, y)| *x * *y).collect();
            (d, a.shape.clone())
        };
        Tensor::from_op(
            data,
            shape,
            vec![self.clone(), other.clone()],
            |g, parents| {
                let ga: Vec<T> = {
                    let b = parents[1].node_ref();
                    g.iter().zip(&b.data).map(|(gi, bi)| *gi * *bi).collect()
                };
                parents[0].accumulate_grad(&ga);
                let gb: Vec<T> = {
                    let a = parents[0].node_ref();
                    g.iter().zip(&a.data).map(|(gi, ai)| *gi * *ai).collect()
                };
                parents[1].accumulate_grad(&gb);
            },
        )
    }

    /// Elementwise negation.
    pub fn neg(&self) -> Tensor<T> {
        let (data, shape) = {
            let a = self.node_ref();
            (a.data.iter().map(|x| -*x).collect(), a.shape.clone())
        };
        Tensor::from_op(data, shape, vec![self.clone()], |g, parents| {
            let ga: Vec<T> = g.iter().map(|v| -*v).collect();
            parents[0].accumulate_grad(&ga);
        })
    }

    /// Add a constant to every element.
    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let (data, shape) = {
            let a = self.node_ref();
            (a.data.iter().map(|x| *x + c).collect(), a.shape.clone())
        };
        Tensor::from_op(data, shape, vec![self.clone()], |g, parents| {
            parents[0].accumulate_grad(g);
        })
    }

    /// Multiply every element by a constant.
    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let (data, shape) = {
            let a = self.node_ref();
            (a.data.iter().map(|x| *x * c).collect(), a.shape.clone())
        };
        Tensor::from_op(data, shape, vec![self.clone()], move |g, parents| {
            let ga: Vec<T> = g.iter().map(|v| *v * c).collect();
            parents[0].accumulate_grad(&ga);
        })
    }

    /// Elementwise absolute value. The subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor<T> {
        let (data, shape) = {
            let a = self.node_ref();
            (a.data.iter().map(|x| x.abs()).collect(), a.shape.clone())
        };
        Tensor::from_op(data, shape, vec![self.clone()], |g, parents| {
            let ga: Vec<T> = {
                let a = parents[0].node_ref();
                g.iter()
                    .zip(&a.data)
                    .map(|(gi, xi)| {
                        if *xi > T::zero() {
                            *gi
                        } else if *xi < T::zero() {
                            -*gi
                        } else {
                            T::zero()
                        }
                    })
                    .collect()
            };
            parents[0].accumulate_grad(&ga);
        })
    }

    /// Rectified linear unit. The subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor<T> {
        let (data, shape) = {
            let a = self.node_ref();
            (
                a.data
                    .iter()
                    .map(|x| if *x > T::zero() { *x } else { T::zero() })
                    .collect(),
                a.shape.clone(),
            )
        };
        Tensor::from_op(data, shape, vec![self.clone()], |g, parents| {
            let ga: Vec<T> = {
                let a = parents[0].node_ref();
                g.iter()
                    .zip(&a.data)
                    .map(|(gi, xi)| if *xi > T::zero() { *gi } else { T::zero() })
                    .collect()
            };
            parents[0].accumulate_grad(&ga);
        })
    }

    /// Leaky rectified linear unit with the given negative-side slope.
    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        let (data, shape) = {
            let a = self.node_ref();
            (
                a.data
                    .iter()
                    .map(|x| if *x > T::zero() { *x } else { *x * slope })
                    .collect(),
                a.shape.clone(),
            )
        };
        Tensor::from_op(data, shape, vec![self.clone()], move |g, parents| {
            let ga: Vec<T> = {
                let a = parents[0].node_ref();
                g.iter()
                    .zip(&a.data)
                    .map(|(gi, xi)| if *xi > T::zero() { *gi } else { *gi * slope })
                    .collect()
            };
            parents[0].accumulate_grad(&ga);
        })
    }

    /// Hyperbolic tangent.
    pub fn tanh(&self) -> Tensor<T> {
        let (data, shape) = {
            let a = self.node_ref();
            (
                a.data.iter().map(|x| x.tanh()).collect::<Vec<T>>(),
                a.shape.clone(),
            )
        };
        let y = data.clone();
        Tensor::from_op(data, shape, vec![self.clone()], move |g, parents| {
            let ga: Vec<T> = g
                .iter()
                .zip(&y)
                .map(|(gi, yi)| *gi * (T::one() - *yi * *yi))
                .collect();
            parents[0].accumulate_grad(&ga);
        })
    }

    /// Logistic sigmoid.
    pub fn sigmoid(&self) -> Tensor<T> {
        let (data, shape) = {
            let a = self.node_ref();
            (
                a.data
                    .iter()
                    .map(|x| T::one() / (T::one() + (-*x).exp()))
                    .collect::<Vec<T>>(),
                a.shape.clone(),
            )
        };
        let y = data.clone();
        Tensor::from_op(data, shape, vec![self.clone()], move |g, parents| {
            let ga: Vec<T> = g
                .iter()
                .zip(&y)
                .map(|(gi, yi)| *gi * *yi * (T::one() - *yi))
                .collect();
            parents[0].accumulate_grad(&ga);
        })
    }

    /// Natural log of the input clamped below at `min`. Clamped elements
    /// (x < min) receive zero gradient.
    pub fn log_clamped(&self, min: T) -> Tensor<T> {
        assert!(min > T::zero(), "log_clamped needs a positive clamp");
        let (data, shape) = {
            let a = self.node_ref();
            (
                a.data
                    .iter()
                    .map(|x| if *x > min { x.ln() } else { min.ln() })
                    .collect(),
                a.shape.clone(),
            )
        };
        Tensor::from_op(data, shape, vec![self.clone()], move |g, parents| {
            let ga: Vec<T> = {
                let a = parents[0].node_ref();
                g.iter()
                    .zip(&a.data)
                    .map(|(gi, xi)| if *xi > min { *gi / *xi } else { T::zero() })
                    .collect()
            };
            parents[0].accumulate_grad(&ga);
        })
    }

    /// Inverted dropout: with probability `p` an element is zeroed, survivors
    /// are scaled by 1/(1-p). `p == 0` or `active == false` is the identity
    /// (the same tensor is returned and no RNG draws are consumed).
    pub fn dropout<R: rand::Rng>(&self, p: f64, rng: &mut R, active: bool) -> Tensor<T> {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1), got {p}");
        if !active || p == 0.0 {
            return self.clone();
        }
        let keep = 1.0 - p;
        let scale = T::fl(1.0 / keep);
        let (data, shape, mask) = {
            let a = self.node_ref();
            let mask: Vec<T> = a
                .data
                .iter()
                .map(|_| {
                    if rng.random::<f64>() < keep {
                        scale
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let d: Vec<T> = a.data.iter().zip(&mask).map(|(x, m)| *x * *m).collect();
            (d, a.shape.clone(), mask)
        };
        Tensor::from_op(data, shape, vec![self.clone()], move |g, parents| {
            let ga: Vec<T> = g.iter().zip(&mask).map(|(gi, m)| *gi * *m).collect();
            parents[0].accumulate_grad(&ga);
        })
    }

    /// Mean over all elements, as a `[1]` tensor.
    pub fn mean_all(&self) -> Tensor<T> {
        let (sum, n) = {
            let a = self.node_ref();
            (a.data.iter().copied().sum::<T>(), a.data.len())
        };
        let inv = T::fl(1.0 / n as f64);
        Tensor::from_op(
            vec![sum * inv],
            vec![1],
            vec![self.clone()],
            move |g, parents| {
                let contrib = vec![g[0] * inv; n];
                parents[0].accumulate_grad(&contrib);
            },
        )
    }

    /// Sum over all elements, as a `[1]` tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let (sum, n) = {
            let a = self.node_ref();
            (a.data.iter().copied().sum::<T>(), a.data.len())
        };
        Tensor::from_op(
            vec![sum],
            vec![1],
            vec![self.clone()],
            move |g, parents| {
                let contrib = vec![g[0]; n];
                parents[0].accumulate_grad(&contrib);
            },
        )
    }

    /// Row sums of a `[R, C]` tensor, as a `[R]` tensor.
    pub fn sum_rows(&self) -> Tensor<T> {
        let (data, r, c) = {
            let a = self.node_ref();
            assert!(
                a.shape.len() == 2,
                "sum_rows expects a 2-d tensor, got {:?}",
                a.shape
            );
            let (r, c) = (a.shape[0], a.shape[1]);
            let mut out = vec![T::zero(); r];
            for i in 0..r {
                out[i] = a.data[i * c..(i + 1) * c].iter().copied().sum();
            }
            (out, r, c)
        };
        Tensor::from_op(
            data,
            vec![r],
            vec![self.clone()],
            move |g, parents| {
                let mut contrib = vec![T::zero(); r * c];
                for i in 0..r {
                    contrib[i * c..(i + 1) * c].fill(g[i]);
                }
                parents[0].accumulate_grad(&contrib);
            },
        )
    }

    /// View with a different shape; element count must be preserved.
    pub fn reshape(&self, new_shape: &[usize]) -> Tensor<T> {
        let (data, old_numel) = {
            let a = self.node_ref();
            (a.data.clone(), a.data.len())
        };
        let new_numel: usize = new_shape.iter().product();
        assert!(
            old_numel == new_numel,
            "reshape from numel {} to shape {:?} (numel {})",
            old_numel,
            new_shape,
            new_numel
        );
        Tensor::from_op(data, new_shape.to_vec(), vec![self.clone()], |g, parents| {
            parents[0].accumulate_grad(g);
        })
    }

    /// Concatenate along axis 1. All parts must agree on every other axis.
    pub fn concat_axis1(parts: &[&Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat_axis1 needs at least one tensor");
        let first = parts[0].shape();
        assert!(first.len() >= 2, "concat_axis1 expects rank >= 2 tensors");
        let d0 = first[0];
        let inner: usize = first[2..].iter().product();
        let mut axis_sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            assert!(
                s.len() == first.len() && s[0] == d0 && s[2..] == first[2..],
                "concat_axis1: incompatible shapes {:?} vs {:?}",
                first,
                s
            );
            axis_sizes.push(s[1]);
        }
        let total_axis: usize = axis_sizes.iter().sum();
        let mut out_shape = first.clone();
        out_shape[1] = total_axis;

        let mut data = vec![T::zero(); d0 * total_axis * inner];
        let out_row = total_axis * inner;
        for n in 0..d0 {
            let mut offset = 0;
            for (p, c) in parts.iter().zip(&axis_sizes) {
                let block = c * inner;
                let node = p.node_ref();
                data[n * out_row + offset..n * out_row + offset + block]
                    .copy_from_slice(&node.data[n * block..(n + 1) * block]);
                offset += block;
            }
        }

        let parents: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
        let sizes = axis_sizes.clone();
        Tensor::from_op(data, out_shape, parents, move |g, parents| {
            let mut offset = 0;
            for (p, c) in parents.iter().zip(&sizes) {
                let block = c * inner;
                let mut contrib = vec![T::zero(); d0 * block];
                for n in 0..d0 {
                    contrib[n * block..(n + 1) * block]
                        .copy_from_slice(&g[n * out_row + offset..n * out_row + offset + block]);
                }
                p.accumulate_grad(&contrib);
                offset += block;
            }
        })
    }

    /// Affine map `x @ w + b` for `x: [N, F]`, `w: [F, O]`, `b: [O]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
        let xs = self.shape();
        let ws = weight.shape();
        assert!(
            xs.len() == 2 && ws.len() == 2 && xs[1] == ws[0],
            "linear: x {xs:?} incompatible with w {ws:?}"
        );
        let (n, f, o) = (xs[0], xs[1], ws[1]);
        if let Some(b) = bias {
            assert!(
                b.shape() == vec![o],
                "linear: bias shape {:?} does not match output dim {}",
                b.shape(),
                o
            );
        }

        let mut out = vec![T::zero(); n * o];
        {
            let xn = self.node_ref();
            let wn = weight.node_ref();
            matmul_nn(&xn.data, &wn.data, n, f, o, &mut out);
        }
        if let Some(b) = bias {
            let bn = b.node_ref();
            for row in out.chunks_exact_mut(o) {
                for (r, bv) in row.iter_mut().zip(&bn.data) {
                    *r += *bv;
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(out, vec![n, o], parents, move |g, parents| {
            if parents[0].requires_grad() {
                let mut dx = vec![T::zero(); n * f];
                {
                    let wn = parents[1].node_ref();
                    matmul_nt(g, &wn.data, n, o, f, &mut dx);
                }
                parents[0].accumulate_grad(&dx);
            }
            if parents[1].requires_grad() {
                let mut dw = vec![T::zero(); f * o];
                {
                    let xn = parents[0].node_ref();
                    matmul_tn(&xn.data, g, f, n, o, &mut dw);
                }
                parents[1].accumulate_grad(&dw);
            }
            if parents.len() == 3 && parents[2].requires_grad() {
                let mut db = vec![T::zero(); o];
                for row in g.chunks_exact(o) {
                    for (d, gv) in db.iter_mut().zip(row) {
                        *d += *gv;
                    }
                }
                parents[2].accumulate_grad(&db);
            }
        })
    }

    /// 2x2 max pooling with stride 2 on `[N, C, H, W]`; H and W must be even.
    /// Ties keep the first (row-major) maximum.
    pub fn max_pool2d(&self) -> Tensor<T> {
        let s = self.shape();
        assert!(
            s.len() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0,
            "max_pool2d expects [N,C,H,W] with even H, W; got {s:?}"
        );
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        {
            let xn = self.node_ref();
            let x = &xn.data;
            for nc in 0..n * c {
                let base = nc * h * w;
                let obase = nc * ho * wo;
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut best_idx = base + (oi * 2) * w + oj * 2;
                        let mut best = x[best_idx];
                        for di in 0..2 {
                            for dj in 0..2 {
                                let idx = base + (oi * 2 + di) * w + (oj * 2 + dj);
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[obase + oi * wo + oj] = best;
                        argmax[obase + oi * wo + oj] = best_idx;
                    }
                }
            }
        }
        let in_numel = n * c * h * w;
        Tensor::from_op(
            out,
            vec![n, c, ho, wo],
            vec![self.clone()],
            move |g, parents| {
                let mut contrib = vec![T::zero(); in_numel];
                for (gi, &idx) in g.iter().zip(&argmax) {
                    contrib[idx] += *gi;
                }
                parents[0].accumulate_grad(&contrib);
            },
        )
    }

    /// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self) -> Tensor<T> {
        let s = self.shape();
        assert!(s.len() == 4, "global_avg_pool expects [N,C,H,W], got {s:?}");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let inv = T::fl(1.0 / hw as f64);
        let mut out = vec![T::zero(); n * c];
        {
            let xn = self.node_ref();
            for nc in 0..n * c {
                out[nc] = xn.data[nc * hw..(nc + 1) * hw].iter().copied().sum::<T>() * inv;
            }
        }
        Tensor::from_op(
            out,
            vec![n, c],
            vec![self.clone()],
            move |g, parents| {
                let mut contrib = vec![T::zero(); n * c * hw];
                for nc in 0..n * c {
                    contrib[nc * hw..(nc + 1) * hw].fill(g[nc] * inv);
                }
                parents[0].accumulate_grad(&contrib);
            },
        )
    }

    /// Normalize each row of a `[N, F]` tensor to unit L2 norm. Rows with
    /// norm below `eps` are divided by `eps` instead, so a zero row maps to
    /// a zero row.
    pub fn l2_normalize_rows(&self, eps: T) -> Tensor<T> {
        assert!(eps > T::zero(), "l2_normalize_rows needs eps > 0");
        let s = self.shape();
        assert!(s.len() == 2, "l2_normalize_rows expects [N,F], got {s:?}");
        let (n, f) = (s[0], s[1]);
        let mut out = vec![T::zero(); n * f];
        let mut scale = vec![T::zero(); n]; // 1/L per row
        let mut clamped = vec![false; n];
        {
            let xn = self.node_ref();
            for i in 0..n {
                let row = &xn.data[i * f..(i + 1) * f];
                let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
                let (l, cl) = if norm > eps { (norm, false) } else { (eps, true) };
                scale[i] = T::one() / l;
                clamped[i] = cl;
                for (o, v) in out[i * f..(i + 1) * f].iter_mut().zip(row) {
                    *o = *v * scale[i];
                }
            }
        }
        let y = out.clone();
        Tensor::from_op(
            out,
            vec![n, f],
            vec![self.clone()],
            move |g, parents| {
                let mut contrib = vec![T::zero(); n * f];
                for i in 0..n {
                    let gr = &g[i * f..(i + 1) * f];
                    let yr = &y[i * f..(i + 1) * f];
                    if clamped[i] {
                        // Constant divisor: plain scaling.
                        for ((c, gv), _) in contrib[i * f..(i + 1) * f]
                            .iter_mut()
                            .zip(gr)
                            .zip(yr)
                        {
                            *c = *gv * scale[i];
                        }
                    } else {
                        let dot = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum::<T>();
                        for ((c, gv), yv) in contrib[i * f..(i + 1) * f]
                            .iter_mut()
                            .zip(gr)
                            .zip(yr)
                        {
                            *c = (*gv - *yv * dot) * scale[i];
                        }
                    }
                }
                parents[0].accumulate_grad(&contrib);
            },
        )
    }

    /// Mean softmax cross-entropy over rows of `[N, K]` logits, optionally
    /// weighted per sample. With weights the loss is
    /// `sum_i w_i * nll_i / sum_i w_i`.
    pub fn softmax_cross_entropy(
        &self,
        labels: &[usize],
        sample_weights: Option<&[T]>,
    ) -> Tensor<T> {
        let s = self.shape();
        assert!(s.len() == 2, "softmax_cross_entropy expects [N,K], got {s:?}");
        let (n, k) = (s[0], s[1]);
        assert!(
            labels.len() == n,
            "softmax_cross_entropy: {} labels for {} rows",
            labels.len(),
            n
        );
        for &l in labels {
            assert!(l < k, "label {} out of range for {} classes", l, k);
        }
        let weights: Vec<T> = match sample_weights {
            Some(w) => {
                assert!(w.len() == n, "sample_weights length {} != N {}", w.len(), n);
                w.to_vec()
            }
            None => vec![T::one(); n],
        };
        let wsum: T = weights.iter().copied().sum();
        assert!(wsum > T::zero(), "sample weights must sum to a positive value");

        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        {
            let xn = self.node_ref();
            for i in 0..n {
                let row = &xn.data[i * k..(i + 1) * k];
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for (p, v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                    *p = (*v - m).exp();
                    z += *p;
                }
                for p in probs[i * k..(i + 1) * k].iter_mut() {
                    *p = *p / z;
                }
                let logp = (row[labels[i]] - m) - z.ln();
                loss -= weights[i] * logp;
            }
        }
        loss = loss / wsum;

        let labels = labels.to_vec();
        Tensor::from_op(
            vec![loss],
            vec![1],
            vec![self.clone()],
            move |g, parents| {
                let mut contrib = vec![T::zero(); n * k];
                for i in 0..n {
                    let coeff = g[0] * weights[i] / wsum;
                    for j in 0..k {
                        let indicator = if j == labels[i] { T::one() } else { T::zero() };
                        contrib[i * k + j] = coeff * (probs[i * k + j] - indicator);
                    }
                }
                parents[0].accumulate_grad(&contrib);
            },
        )
    }
}
