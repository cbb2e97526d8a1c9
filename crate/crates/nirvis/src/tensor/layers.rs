//! Parameterized layers: thin structs owning parameter tensors plus a
//! `forward`. Models are built by composing these by hand — there is no
//! module graph abstraction, which keeps save/load explicit.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use super::{Scalar, Tensor};

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Gaussian with the given standard deviation (GAN convention: 0.02).
    Normal(f64),
    /// He initialization: Gaussian with std `sqrt(2 / fan_in)`.
    Kaiming,
    Zeros,
}

impl Init {
    fn draw<T: Scalar, R: Rng>(self, rng: &mut R, fan_in: usize, count: usize) -> Vec<T> {
        use rand_distr::{Distribution, Normal};
        match self {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..count).map(|_| T::fl(dist.sample(rng))).collect()
            }
            Init::Kaiming => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..count).map(|_| T::fl(dist.sample(rng))).collect()
            }
            Init::Zeros => vec![T::zero(); count],
        }
    }
}

/// One export entry: name, shape, values widened/narrowed to f32.
pub(crate) type StateEntry = (String, Vec<usize>, Vec<f32>);
pub(crate) type StateMap = HashMap<String, (Vec<usize>, Vec<f32>)>;

fn export_tensor<T: Scalar>(t: &Tensor<T>, name: &str, out: &mut Vec<StateEntry>) {
    out.push((
        name.to_string(),
        t.shape(),
        t.data().iter().map(|v| v.f64() as f32).collect(),
    ));
}

fn import_tensor<T: Scalar>(t: &Tensor<T>, name: &str, map: &StateMap) -> Result<(), String> {
    let (shape, data) = map
        .get(name)
        .ok_or_else(|| format!("missing tensor `{name}`"))?;
    if *shape != t.shape() {
        return Err(format!(
            "tensor `{name}` has shape {:?}, expected {:?}",
            shape,
            t.shape()
        ));
    }
    let vals: Vec<T> = data.iter().map(|v| T::fl(*v as f64)).collect();
    t.set_data(&vals);
    Ok(())
}

/// 2-d convolution layer.
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = init.draw::<T, R>(rng, fan_in, out_ch * fan_in);
        Conv2d {
            weight: Tensor::param(w, &[out_ch, in_ch, kernel, kernel]),
            bias: bias.then(|| Tensor::param(vec![T::zero(); out_ch], &[out_ch])),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut p = vec![self.weight.clone()];
        if let Some(b) = &self.bias {
            p.push(b.clone());
        }
        p
    }

    pub(crate) fn export(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        export_tensor(&self.weight, &format!("{prefix}.weight"), out);
        if let Some(b) = &self.bias {
            export_tensor(b, &format!("{prefix}.bias"), out);
        }
    }

    pub(crate) fn import(&self, prefix: &str, map: &StateMap) -> Result<(), String> {
        import_tensor(&self.weight, &format!("{prefix}.weight"), map)?;
        if let Some(b) = &self.bias {
            import_tensor(b, &format!("{prefix}.bias"), map)?;
        }
        Ok(())
    }
}

/// Transposed 2-d convolution layer (weights stored `[Cin, Cout, kh, kw]`).
pub struct ConvTranspose2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = init.draw::<T, R>(rng, fan_in, in_ch * out_ch * kernel * kernel);
        ConvTranspose2d {
            weight: Tensor::param(w, &[in_ch, out_ch, kernel, kernel]),
            bias: bias.then(|| Tensor::param(vec![T::zero(); out_ch], &[out_ch])),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.conv_transpose2d(&self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut p = vec![self.weight.clone()];
        if let Some(b) = &self.bias {
            p.push(b.clone());
        }
        p
    }

    pub(crate) fn export(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        export_tensor(&self.weight, &format!("{prefix}.weight"), out);
        if let Some(b) = &self.bias {
            export_tensor(b, &format!("{prefix}.bias"), out);
        }
    }

    pub(crate) fn import(&self, prefix: &str, map: &StateMap) -> Result<(), String> {
        import_tensor(&self.weight, &format!("{prefix}.weight"), map)?;
        if let Some(b) = &self.bias {
            import_tensor(b, &format!("{prefix}.bias"), map)?;
        }
        Ok(())
    }
}

/// Batch normalization layer with running statistics for inference.
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    running_mean: RefCell<Vec<T>>,
    running_var: RefCell<Vec<T>>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::param(vec![T::one(); channels], &[channels]),
            beta: Tensor::param(vec![T::zero(); channels], &[channels]),
            running_mean: RefCell::new(vec![T::zero(); channels]),
            running_var: RefCell::new(vec![T::one(); channels]),
            momentum: T::fl(0.1),
            eps: T::fl(1e-5),
        }
    }

    /// Training mode normalizes with batch statistics and folds them into
    /// the running estimates (unbiased variance when the batch has more than
    /// one element per channel); inference mode uses the running estimates.
    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Tensor<T> {
        if training {
            let s = x.shape();
            let m = s[0] * s[2] * s[3];
            let (y, mean, var) = x.batch_norm_train(&self.gamma, &self.beta, self.eps);
            let correction = if m > 1 {
                T::fl(m as f64 / (m as f64 - 1.0))
            } else {
                T::one()
            };
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            let one_minus = T::one() - self.momentum;
            for c in 0..mean.len() {
                rm[c] = one_minus * rm[c] + self.momentum * mean[c];
                rv[c] = one_minus * rv[c] + self.momentum * var[c] * correction;
            }
            y
        } else {
            let rm = self.running_mean.borrow();
            let rv = self.running_var.borrow();
            x.batch_norm_eval(&self.gamma, &self.beta, &rm, &rv, self.eps)
        }
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        vec![self.gamma.clone(), self.beta.clone()]
    }

    /// Copies of the running statistics (mean, variance).
    pub fn running_stats(&self) -> (Vec<T>, Vec<T>) {
        (
            self.running_mean.borrow().clone(),
            self.running_var.borrow().clone(),
        )
    }

    pub(crate) fn export(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        export_tensor(&self.gamma, &format!("{prefix}.gamma"), out);
        export_tensor(&self.beta, &format!("{prefix}.beta"), out);
        let rm = self.running_mean.borrow();
        let rv = self.running_var.borrow();
        out.push((
            format!("{prefix}.running_mean"),
            vec![rm.len()],
            rm.iter().map(|v| v.f64() as f32).collect(),
        ));
        out.push((
            format!("{prefix}.running_var"),
            vec![rv.len()],
            rv.iter().map(|v| v.f64() as f32).collect(),
        ));
    }

    pub(crate) fn import(&self, prefix: &str, map: &StateMap) -> Result<(), String> {
        import_tensor(&self.gamma, &format!("{prefix}.gamma"), map)?;
        import_tensor(&self.beta, &format!("{prefix}.beta"), map)?;
        for (name, target) in [
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            let key = format!("{prefix}.{name}");
            let (shape, data) = map
                .get(&key)
                .ok_or_else(|| format!("missing tensor `{key}`"))?;
            let mut buf = target.borrow_mut();
            if *shape != vec![buf.len()] {
                return Err(format!("tensor `{key}` has wrong shape {shape:?}"));
            }
            for (dst, src) in buf.iter_mut().zip(data) {
                *dst = T::fl(*src as f64);
            }
        }
        Ok(())
    }
}

/// Fully connected layer.
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>, // [in, out]
    pub bias: Tensor<T>,   // [out]
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, init: Init, rng: &mut R) -> Self {
        let w = init.draw::<T, R>(rng, in_dim, in_dim * out_dim);
        Linear {
            weight: Tensor::param(w, &[in_dim, out_dim]),
            bias: Tensor::param(vec![T::zero(); out_dim], &[out_dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.linear(&self.weight, Some(&self.bias))
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub(crate) fn export(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        export_tensor(&self.weight, &format!("{prefix}.weight"), out);
        export_tensor(&self.bias, &format!("{prefix}.bias"), out);
    }

    pub(crate) fn import(&self, prefix: &str, map: &StateMap) -> Result<(), String> {
        import_tensor(&self.weight, &format!("{prefix}.weight"), map)?;
        import_tensor(&self.bias, &format!("{prefix}.bias"), map)
    }
}
