use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;

/// A trainable matrix with its gradient and Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub value: Matrix,
    pub grad: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
    pub step_count: u64,
}

impl ParamTensor {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        ParamTensor {
            value,
            grad: Matrix::zeros(r, c),
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Drops optimizer state, keeping the value.
    pub fn reset_optimizer(&mut self) {
        self.adam_m.fill(0.0);
        self.adam_v.fill(0.0);
        self.step_count = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owning store of parameters, addressed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: Matrix) -> ParamId {
        self.params.push(ParamTensor::new(value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(ParamTensor::zero_grad);
    }
}

/// Adam with bias correction. Gradients are left in place; callers zero them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step<'a>(&self, params: impl IntoIterator<Item = &'a mut ParamTensor>) {
        for p in params {
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let g = p.grad.as_slice();
            let m = p.adam_m.as_mut_slice();
            let v = p.adam_v.as_mut_slice();
            let w = p.value.as_mut_slice();
            for idx in 0..w.len() {
                m[idx] = self.beta1 * m[idx] + (1.0 - self.beta1) * g[idx];
                v[idx] = self.beta2 * v[idx] + (1.0 - self.beta2) * g[idx] * g[idx];
                let m_hat = m[idx] / bc1;
                let v_hat = v[idx] / bc2;
                w[idx] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut ParamTensor>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    Adam {
        lr,
        beta1,
        beta2,
        eps,
    }
    .step(params)
}

/// Uniform Glorot initialization, `±√(6/(fan_in+fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::uniform(fan_in, fan_out, -limit, limit, rng)
}
