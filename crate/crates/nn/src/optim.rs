use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamStore<S>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { config, step: 0, first: zeros(), second: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamStore<S>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let corr1 = S::lit(1.0 - c.beta1.powi(t));
        let corr2 = S::lit(1.0 - c.beta2.powi(t));
        let (lr, eps) = (S::lit(c.lr), S::lit(c.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g[i];
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + one_b1 * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        params.zero_grads();
    }
}
