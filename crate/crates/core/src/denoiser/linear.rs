//! Minimal linear backend: `eps(z) = A · vec(z)`.
//!
//! No attention sites, one trainable matrix. Used for analytic gradient
//! checks of the gateway mechanism and as the second implementor keeping
//! the backend interface honest.

use std::hash::Hasher;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::share::ShareMode;
use crate::tape::{instrument, Tensor};

use super::{AttnControl, DenoiserBackend, SelfAttentionSite, TextCondition};

pub struct LinearDenoiser<T: Scalar> {
    shape: [usize; 3],
    pub matrix: Tensor<T>,
    sites: Vec<SelfAttentionSite<T>>,
}

impl<T: Scalar> LinearDenoiser<T> {
    pub fn init(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let d: usize = shape.iter().product();
        let bound = 1.0 / (d as f64).sqrt();
        let data = (0..d * d)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            .collect();
        LinearDenoiser {
            shape,
            matrix: Tensor::var(&[d, d], data),
            sites: Vec::new(),
        }
    }

    pub fn with_matrix(shape: [usize; 3], data: Vec<T>) -> Self {
        let d: usize = shape.iter().product();
        assert_eq!(data.len(), d * d);
        LinearDenoiser {
            shape,
            matrix: Tensor::var(&[d, d], data),
            sites: Vec::new(),
        }
    }
}

impl<T: Scalar> DenoiserBackend<T> for LinearDenoiser<T> {
    fn latent_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn sites(&self) -> &[SelfAttentionSite<T>] {
        &self.sites
    }

    fn predict(
        &self,
        z: &Tensor<T>,
        _t: usize,
        _cond: &TextCondition<T>,
        ctrl: Option<&dyn AttnControl<T>>,
    ) -> Result<Tensor<T>> {
        if let Some(ctrl) = ctrl {
            super::site::validate_control(ctrl, 0)?;
        }
        instrument::count_raw_forward();
        let d: usize = self.shape.iter().product();
        let flat = z.reshape(&[d, 1])?;
        self.matrix.matmul(&flat)?.reshape(&self.shape)
    }

    fn null_condition(&self) -> TextCondition<T> {
        TextCondition::null(1)
    }

    fn trainable_params(&self) -> Vec<Tensor<T>> {
        if self.matrix.is_trainable() {
            vec![self.matrix.clone()]
        } else {
            vec![]
        }
    }

    fn set_edit_mode(&self, _mode: ShareMode) {
        // No clones; the matrix itself is the tunable parameter set.
    }

    fn frozen_fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        h.write_usize(self.shape.iter().product());
        h.finish()
    }
}
