//! Adaptive-moment (Adam) parameter updates.

use crate::scalar::Scalar;
use crate::tape::{GradStore, Tensor};

pub struct Adam<T: Scalar> {
    params: Vec<Tensor<T>>,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: usize,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: Vec<Tensor<T>>, lr: T, betas: (T, T)) -> Self {
        let m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Adam {
            params,
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: T::from_f64_lossy(1e-8),
            m,
            v,
            step: 0,
        }
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    /// One update over all managed parameters; missing gradients are zero.
    pub fn step(&mut self, grads: &GradStore<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (i, p) in self.params.iter().enumerate() {
            let g = grads.get_or_zeros(p);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_data(|data| {
                for j in 0..data.len() {
                    m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g[j];
                    v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g[j] * g[j];
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            });
        }
    }
}
