//! 2-d convolution and transposed convolution via im2col / col2im.
//!
//! The matmul kernels accumulate into their output (`C += ...`) with a fixed
//! loop order, so floating-point results are bit-reproducible run to run.

use super::{Scalar, Tensor};

/// Output spatial size of a convolution: `(n + 2p - k) / s + 1`.
/// Panics if the kernel does not fit the padded input.
pub fn conv_output_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(stride > 0, "stride must be positive");
    assert!(
        n + 2 * pad >= k,
        "kernel {k} larger than padded input {n}+2*{pad}"
    );
    (n + 2 * pad - k) / stride + 1
}

/// Output spatial size of a transposed convolution: `(n - 1) * s - 2p + k`.
pub fn conv_transpose_output_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(stride > 0, "stride must be positive");
    assert!(n > 0, "input size must be positive");
    let raw = (n - 1) * stride + k;
    assert!(raw > 2 * pad, "padding {pad} swallows the whole output");
    raw - 2 * pad
}

/// `C[m,n] += A[m,k] @ B[k,n]`, row-major.
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    for i in 0..m {
        let crow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, bv) in crow.iter_mut().zip(brow) {
                *c += aip * *bv;
            }
        }
    }
}

/// `C[m,n] += A[m,k] @ B[n,k]^T`, row-major.
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert!(a.len() == m * k && b.len() == n * k && out.len() == m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `C[m,n] += A[k,m]^T @ B[k,n]`, row-major.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert!(a.len() == k * m && b.len() == k * n && out.len() == m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, bv) in crow.iter_mut().zip(brow) {
                *c += api * *bv;
            }
        }
    }
}

/// Unfold one image `[c, h, w]` into columns `[c*kh*kw, ho*wo]`.
/// Out-of-bounds taps read as zero.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    debug_assert!(cols.len() == c * kh * kw * ho * wo);
    cols.fill(T::zero());
    let pad = pad as isize;
    for cc in 0..c {
        for di in 0..kh {
            for dj in 0..kw {
                let row = ((cc * kh + di) * kw + dj) * (ho * wo);
                for oi in 0..ho {
                    let yi = (oi * stride) as isize - pad + di as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let src = (cc * h + yi as usize) * w;
                    let dst = row + oi * wo;
                    for oj in 0..wo {
                        let xj = (oj * stride) as isize - pad + dj as isize;
                        if xj >= 0 && xj < w as isize {
                            cols[dst + oj] = x[src + xj as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add columns `[c*kh*kw, ho*wo]` back into an image `[c, h, w]`:
/// the adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    debug_assert!(cols.len() == c * kh * kw * ho * wo);
    debug_assert!(x.len() == c * h * w);
    let pad = pad as isize;
    for cc in 0..c {
        for di in 0..kh {
            for dj in 0..kw {
                let row = ((cc * kh + di) * kw + dj) * (ho * wo);
                for oi in 0..ho {
                    let yi = (oi * stride) as isize - pad + di as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let dst = (cc * h + yi as usize) * w;
                    let src = row + oi * wo;
                    for oj in 0..wo {
                        let xj = (oj * stride) as isize - pad + dj as isize;
                        if xj >= 0 && xj < w as isize {
                            x[dst + xj as usize] += cols[src + oj];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// 2-d convolution of `[N, Cin, H, W]` with weights `[Cout, Cin, kh, kw]`
    /// and optional bias `[Cout]`, producing `[N, Cout, H', W']`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Tensor<T> {
        let xs = self.shape();
        let ws = weight.shape();
        assert!(xs.len() == 4, "conv2d expects input [N,Cin,H,W], got {xs:?}");
        assert!(ws.len() == 4, "conv2d expects weight [Cout,Cin,kh,kw], got {ws:?}");
        assert!(
            xs[1] == ws[1],
            "conv2d channel mismatch: input has {} channels, weight expects {}",
            xs[1],
            ws[1]
        );
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(b) = bias {
            assert!(
                b.shape() == vec![cout],
                "conv2d bias shape {:?} does not match {} output channels",
                b.shape(),
                cout
            );
        }
        let ho = conv_output_size(h, kh, stride, pad);
        let wo = conv_output_size(w, kw, stride, pad);
        let krows = cin * kh * kw;
        let opix = ho * wo;

        let mut out = vec![T::zero(); n * cout * opix];
        {
            let xn = self.node_ref();
            let wn = weight.node_ref();
            let mut cols = vec![T::zero(); krows * opix];
            for b in 0..n {
                im2col(
                    &xn.data[b * cin * h * w..(b + 1) * cin * h * w],
                    cin, h, w, kh, kw, stride, pad, ho, wo, &mut cols,
                );
                matmul_nn(
                    &wn.data,
                    &cols,
                    cout,
                    krows,
                    opix,
                    &mut out[b * cout * opix..(b + 1) * cout * opix],
                );
            }
        }
        if let Some(b) = bias {
            let bn = b.node_ref();
            for batch in out.chunks_exact_mut(cout * opix) {
                for (co, bv) in bn.data.iter().enumerate() {
                    for v in batch[co * opix..(co + 1) * opix].iter_mut() {
                        *v += *bv;
                    }
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(
            out,
            vec![n, cout, ho, wo],
            parents,
            move |g, parents| {
                let need_dx = parents[0].requires_grad();
                let need_dw = parents[1].requires_grad();
                let mut dx = if need_dx {
                    vec![T::zero(); n * cin * h * w]
                } else {
                    Vec::new()
                };
                let mut dw = if need_dw {
                    vec![T::zero(); cout * krows]
                } else {
                    Vec::new()
                };
                if need_dx || need_dw {
                    let xn = parents[0].node_ref();
                    let wn = parents[1].node_ref();
                    let mut cols = vec![T::zero(); krows * opix];
                    let mut dcols = vec![T::zero(); krows * opix];
                    for b in 0..n {
                        let gb = &g[b * cout * opix..(b + 1) * cout * opix];
                        if need_dw {
                            im2col(
                                &xn.data[b * cin * h * w..(b + 1) * cin * h * w],
                                cin, h, w, kh, kw, stride, pad, ho, wo, &mut cols,
                            );
                            matmul_nt(gb, &cols, cout, opix, krows, &mut dw);
                        }
                        if need_dx {
                            dcols.fill(T::zero());
                            matmul_tn(&wn.data, gb, krows, cout, opix, &mut dcols);
                            col2im(
                                &dcols,
                                cin, h, w, kh, kw, stride, pad, ho, wo,
                                &mut dx[b * cin * h * w..(b + 1) * cin * h * w],
                            );
                        }
                    }
                }
                if need_dx {
                    parents[0].accumulate_grad(&dx);
                }
                if need_dw {
                    parents[1].accumulate_grad(&dw);
                }
                if parents.len() == 3 && parents[2].requires_grad() {
                    let mut db = vec![T::zero(); cout];
                    for b in 0..n {
                        for co in 0..cout {
                            let base = (b * cout + co) * opix;
                            db[co] += g[base..base + opix].iter().copied().sum::<T>();
                        }
                    }
                    parents[2].accumulate_grad(&db);
                }
            },
        )
    }

    /// Transposed 2-d convolution (the adjoint of `conv2d` in its spatial
    /// action): input `[N, Cin, H, W]`, weights `[Cin, Cout, kh, kw]`,
    /// optional bias `[Cout]`, output `[N, Cout, (H-1)s - 2p + kh, ...]`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Tensor<T> {
        let xs = self.shape();
        let ws = weight.shape();
        assert!(xs.len() == 4, "conv_transpose2d expects [N,Cin,H,W], got {xs:?}");
        assert!(
            ws.len() == 4,
            "conv_transpose2d expects weight [Cin,Cout,kh,kw], got {ws:?}"
        );
        assert!(
            xs[1] == ws[0],
            "conv_transpose2d channel mismatch: input has {} channels, weight expects {}",
            xs[1],
            ws[0]
        );
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        if let Some(b) = bias {
            assert!(
                b.shape() == vec![cout],
                "conv_transpose2d bias shape {:?} does not match {} output channels",
                b.shape(),
                cout
            );
        }
        let ho = conv_transpose_output_size(h, kh, stride, pad);
        let wo = conv_transpose_output_size(w, kw, stride, pad);
        let krows = cout * kh * kw;
        let ipix = h * w;

        let mut out = vec![T::zero(); n * cout * ho * wo];
        {
            let xn = self.node_ref();
            let wn = weight.node_ref();
            let mut cols = vec![T::zero(); krows * ipix];
            for b in 0..n {
                cols.fill(T::zero());
                // cols = W^T (viewed [Cin, Cout*kh*kw]) applied to x_b.
                matmul_tn(
                    &wn.data,
                    &xn.data[b * cin * ipix..(b + 1) * cin * ipix],
                    krows,
                    cin,
                    ipix,
                    &mut cols,
                );
                col2im(
                    &cols,
                    cout, ho, wo, kh, kw, stride, pad, h, w,
                    &mut out[b * cout * ho * wo..(b + 1) * cout * ho * wo],
                );
            }
        }
        if let Some(b) = bias {
            let bn = b.node_ref();
            let opix = ho * wo;
            for batch in out.chunks_exact_mut(cout * opix) {
                for (co, bv) in bn.data.iter().enumerate() {
                    for v in batch[co * opix..(co + 1) * opix].iter_mut() {
                        *v += *bv;
                    }
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(
            out,
            vec![n, cout, ho, wo],
            parents,
            move |g, parents| {
                let need_dx = parents[0].requires_grad();
                let need_dw = parents[1].requires_grad();
                let mut dx = if need_dx {
                    vec![T::zero(); n * cin * ipix]
                } else {
                    Vec::new()
                };
                let mut dw = if need_dw {
                    vec![T::zero(); cin * krows]
                } else {
                    Vec::new()
                };
                if need_dx || need_dw {
                    let xn = parents[0].node_ref();
                    let wn = parents[1].node_ref();
                    let mut dcols = vec![T::zero(); krows * ipix];
                    for b in 0..n {
                        let gb = &g[b * cout * ho * wo..(b + 1) * cout * ho * wo];
                        // dcols = im2col(g) with the forward scatter geometry.
                        im2col(
                            gb, cout, ho, wo, kh, kw, stride, pad, h, w, &mut dcols,
                        );
                        if need_dx {
                            matmul_nn(
                                &wn.data,
                                &dcols,
                                cin,
                                krows,
                                ipix,
                                &mut dx[b * cin * ipix..(b + 1) * cin * ipix],
                            );
                        }
                        if need_dw {
                            matmul_nt(
                                &xn.data[b * cin * ipix..(b + 1) * cin * ipix],
                                &dcols,
                                cin,
                                ipix,
                                krows,
                                &mut dw,
                            );
                        }
                    }
                }
                if need_dx {
                    parents[0].accumulate_grad(&dx);
                }
                if need_dw {
                    parents[1].accumulate_grad(&dw);
                }
                if parents.len() == 3 && parents[2].requires_grad() {
                    let opix = ho * wo;
                    let mut db = vec![T::zero(); cout];
                    for b in 0..n {
                        for co in 0..cout {
                            let base = (b * cout + co) * opix;
                            db[co] += g[base..base + opix].iter().copied().sum::<T>();
                        }
                    }
                    parents[2].accumulate_grad(&db);
                }
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution: the oracle the im2col path must match.
    #[allow(clippy::too_many_arguments)]
    fn conv2d_reference(
        x: &[f64],
        w: &[f64],
        b: Option<&[f64]>,
        n: usize,
        cin: usize,
        h: usize,
        wdt: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let ho = conv_output_size(h, kh, stride, pad);
        let wo = conv_output_size(wdt, kw, stride, pad);
        let mut out = vec![0.0; n * cout * ho * wo];
        for bi in 0..n {
            for co in 0..cout {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = b.map_or(0.0, |bb| bb[co]);
                        for ci in 0..cin {
                            for di in 0..kh {
                                for dj in 0..kw {
                                    let yi = (oi * stride + di) as isize - pad as isize;
                                    let xj = (oj * stride + dj) as isize - pad as isize;
                                    if yi >= 0 && yi < h as isize && xj >= 0 && xj < wdt as isize {
                                        let xv = x[((bi * cin + ci) * h + yi as usize) * wdt
                                            + xj as usize];
                                        let wv = w[((co * cin + ci) * kh + di) * kw + dj];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[((bi * cout + co) * ho + oi) * wo + oj] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n, cin, h, w, cout, k, s, p) in &[
            (1usize, 1usize, 5usize, 5usize, 1usize, 3usize, 1usize, 1usize),
            (2, 3, 8, 6, 4, 4, 2, 1),
            (1, 2, 7, 7, 3, 3, 2, 0),
            (2, 1, 6, 9, 2, 4, 2, 1),
            (1, 4, 10, 10, 2, 5, 3, 2),
        ] {
            let x = rand_vec(&mut rng, n * cin * h * w);
            let wt = rand_vec(&mut rng, cout * cin * k * k);
            let b = rand_vec(&mut rng, cout);
            let xt = Tensor::new(x.clone(), &[n, cin, h, w]);
            let wtt = Tensor::new(wt.clone(), &[cout, cin, k, k]);
            let bt = Tensor::new(b.clone(), &[cout]);
            let y = xt.conv2d(&wtt, Some(&bt), s, p);
            let want = conv2d_reference(&x, &wt, Some(&b), n, cin, h, w, cout, k, k, s, p);
            let got = y.data();
            assert_eq!(got.len(), want.len());
            for (a, bb) in got.iter().zip(&want) {
                assert!((a - bb).abs() < 1e-12, "conv mismatch at cfg {n},{cin},{h},{w}");
            }
        }
    }

    #[test]
    fn conv2d_output_shape_at_full_resolution() {
        // 256x256 input, k=4, s=2, p=1 halves the spatial size.
        assert_eq!(conv_output_size(256, 4, 2, 1), 128);
        let x = Tensor::<f32>::zeros(&[1, 3, 256, 256]);
        let w = Tensor::<f32>::zeros(&[2, 3, 4, 4]);
        let y = x.conv2d(&w, None, 2, 1);
        assert_eq!(y.shape(), vec![1, 2, 128, 128]);
    }

    #[test]
    fn conv_transpose_inverts_conv_shape() {
        // Shape-level inverse of the stride-2 k4 p1 downsampling block.
        for size in [4usize, 8, 16, 64] {
            let down = conv_output_size(size, 4, 2, 1);
            assert_eq!(down, size / 2);
            assert_eq!(conv_transpose_output_size(down, 4, 2, 1), size);
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> when both use the same
        // weights (with axes [Cout, Cin, kh, kw] vs [Cin->.., Cout, ..]
        // roles swapped), stride and padding.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cin, cout, h, w, k, s, p) = (3usize, 2usize, 6usize, 6usize, 4usize, 2usize, 1usize);
        let ho = conv_output_size(h, k, s, p);
        let wo = conv_output_size(w, k, s, p);

        let x = rand_vec(&mut rng, cin * h * w);
        let wt = rand_vec(&mut rng, cout * cin * k * k);
        let y = rand_vec(&mut rng, cout * ho * wo);

        let xt = Tensor::new(x.clone(), &[1, cin, h, w]);
        let wconv = Tensor::new(wt.clone(), &[cout, cin, k, k]);
        let cx = xt.conv2d(&wconv, None, s, p);

        // Same weights viewed for the transpose: [Cout, Cin, kh, kw] input
        // channel role is Cout here.
        let yt = Tensor::new(y.clone(), &[1, cout, ho, wo]);
        let wtrans = Tensor::new(wt.clone(), &[cout, cin, k, k]);
        let cty = yt.conv_transpose2d(&wtrans, None, s, p);

        let lhs: f64 = cx.data().iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&cty.data()).map(|(a, b)| a * b).sum();
        assert!(
            (lhs - rhs).abs() < 1e-10,
            "adjoint identity violated: {lhs} vs {rhs}"
        );
    }

    #[test]
    #[should_panic(expected = "channel mismatch")]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        let _ = x.conv2d(&w, None, 1, 1);
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k, n) = (4usize, 3usize, 5usize);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);

        let mut c_nn = vec![0.0; m * n];
        matmul_nn(&a, &b, m, k, n, &mut c_nn);

        // Build B^T and A^T and check the other kernels give the same product.
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c_nt = vec![0.0; m * n];
        matmul_nt(&a, &bt, m, k, n, &mut c_nt);

        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c_tn = vec![0.0; m * n];
        matmul_tn(&at, &b, m, k, n, &mut c_tn);

        for i in 0..m * n {
            assert!((c_nn[i] - c_nt[i]).abs() < 1e-12);
            assert!((c_nn[i] - c_tn[i]).abs() < 1e-12);
        }
    }
}
