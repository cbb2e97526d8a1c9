//! Adam optimizer with bias-corrected moment estimates.

use super::{Scalar, Tensor};

/// Adam over a fixed set of parameter tensors. Moment buffers are allocated
/// to match each parameter's shape at construction; the step count increases
/// strictly monotonically with every `step()`.
pub struct Adam<T: Scalar> {
    params: Vec<Tensor<T>>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    step_count: u64,
}

impl<T: Scalar> Adam<T> {
    /// Defaults: beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn new(params: Vec<Tensor<T>>, lr: T) -> Self {
        let m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Adam {
            params,
            m,
            v,
            lr,
            beta1: T::fl(0.9),
            beta2: T::fl(0.999),
            epsilon: T::fl(1e-8),
            step_count: 0,
        }
    }

    /// Builder-style override of the moment decay rates.
    pub fn with_betas(mut self, beta1: T, beta2: T) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update. Parameters whose gradient buffer is unset are
    /// treated as having zero gradient (their moments decay).
    pub fn step(&mut self) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (idx, p) in self.params.iter().enumerate() {
            let grad = p.grad();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            debug_assert!(m.len() == p.numel(), "moment buffer shape mismatch");
            let zero = T::zero();
            let one = T::one();
            p.update_data(|data| {
                for i in 0..data.len() {
                    let g = grad.as_ref().map_or(zero, |gv| gv[i]);
                    m[i] = self.beta1 * m[i] + (one - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (one - self.beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    data[i] = data[i] - self.lr * mhat / (vhat.sqrt() + self.epsilon);
                }
            });
        }
    }

    /// Clear gradients on every managed parameter.
    pub fn zero_grad(&mut self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_with_fresh_state_leaves_params_unchanged() {
        let p = Tensor::param(vec![1.0_f64, -2.0], &[2]);
        let mut opt = Adam::new(vec![p.clone()], 0.1);
        opt.step(); // no gradient accumulated at all
        assert_eq!(p.data(), vec![1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // With bias correction, the very first Adam step has magnitude
        // ~lr * g / (|g| + eps) = lr * sign(g).
        let p = Tensor::param(vec![0.0_f64], &[1]);
        let mut opt = Adam::new(vec![p.clone()], 0.01);
        let loss = p.mul_scalar(3.0).sum_all(); // dL/dp = 3
        loss.backward();
        opt.step();
        let v = p.data()[0];
        assert!((v + 0.01).abs() < 1e-6, "expected ~-lr, got {v}");
    }

    #[test]
    fn converges_on_a_quadratic() {
        // minimize (p - 5)^2
        let p = Tensor::param(vec![0.0_f64], &[1]);
        let mut opt = Adam::new(vec![p.clone()], 0.1);
        for _ in 0..2000 {
            opt.zero_grad();
            let diff = p.add_scalar(-5.0);
            let loss = diff.mul(&diff).sum_all();
            loss.backward();
            opt.step();
        }
        assert!((p.data()[0] - 5.0).abs() < 1e-3);
    }

    #[test]
    fn step_count_strictly_increases() {
        let p = Tensor::param(vec![0.0_f32], &[1]);
        let mut opt = Adam::new(vec![p], 0.001);
        for want in 1..=5u64 {
            opt.step();
            assert_eq!(opt.step_count(), want);
        }
    }
}
