//! Noise-prediction backends with hookable self-attention sites.

pub mod codec;
pub mod linear;
pub mod site;
pub mod toy;
pub mod train;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{instrument, DenoiserScope, Tensor};

pub use codec::AffineCodec;
pub use linear::LinearDenoiser;
pub use site::{AttnControl, SelfAttentionSite, SiteAction};
pub use toy::{ToyDenoiser, ToyDenoiserConfig};

/// Text conditioning as the denoiser consumes it: an embedded token matrix.
/// The null (unconditional) prompt is a fixed all-zero array.
pub struct TextCondition<T: Scalar> {
    pub embedding: Tensor<T>,
    pub is_null: bool,
}

impl<T: Scalar> TextCondition<T> {
    pub fn null(dim: usize) -> Self {
        TextCondition {
            embedding: Tensor::zeros(&[1, dim]),
            is_null: true,
        }
    }

    pub fn from_embedding(embedding: Tensor<T>) -> Self {
        TextCondition {
            embedding,
            is_null: false,
        }
    }
}

/// A noise predictor with an enumerable, stable list of self-attention sites.
pub trait DenoiserBackend<T: Scalar> {
    fn latent_shape(&self) -> [usize; 3];

    fn sites(&self) -> &[SelfAttentionSite<T>];

    /// Predict the noise component of `z` at training timestep `t`. Every
    /// self-attention computation is routed through `ctrl` when present.
    fn predict(
        &self,
        z: &Tensor<T>,
        t: usize,
        cond: &TextCondition<T>,
        ctrl: Option<&dyn AttnControl<T>>,
    ) -> Result<Tensor<T>>;

    fn null_condition(&self) -> TextCondition<T>;

    /// Currently gradient-active parameters.
    fn trainable_params(&self) -> Vec<Tensor<T>>;

    /// Enter editing mode: backbone frozen, clones reset and gated by `mode`.
    fn set_edit_mode(&self, mode: crate::share::ShareMode);

    /// Checksum over everything that must stay untouched during editing.
    fn frozen_fingerprint(&self) -> u64;
}

/// Classifier-free guidance: `eps_u + scale * (eps_c - eps_u)`.
pub fn cfg_combine<T: Scalar>(
    eps_uncond: &Tensor<T>,
    eps_cond: &Tensor<T>,
    scale: T,
) -> Result<Tensor<T>> {
    eps_uncond.add(&eps_cond.sub(eps_uncond)?.mul_scalar(scale))
}

/// One guided noise prediction. Counts as a single denoiser computation for
/// retained-graph accounting, whether or not guidance doubles the raw
/// forward count. With a null prompt (or scale 1) the conditional pass is
/// arithmetically a no-op, so only one forward runs.
pub fn predict_with_guidance<T: Scalar>(
    backend: &dyn DenoiserBackend<T>,
    z: &Tensor<T>,
    t: usize,
    cond: &TextCondition<T>,
    cfg_scale: T,
    ctrl: Option<&dyn AttnControl<T>>,
) -> Result<Tensor<T>> {
    let _scope = DenoiserScope::enter();
    instrument::count_guided_prediction();
    if cond.is_null || cfg_scale == T::one() {
        return backend.predict(z, t, cond, ctrl);
    }
    let null = backend.null_condition();
    let eps_uncond = backend.predict(z, t, &null, ctrl)?;
    let eps_cond = backend.predict(z, t, cond, ctrl)?;
    cfg_combine(&eps_uncond, &eps_cond, cfg_scale)
}

/// Reject non-finite predictions at module boundaries.
pub fn ensure_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("{what} contains non-finite values")))
    }
}
