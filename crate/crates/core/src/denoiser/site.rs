//! Self-attention sites: the per-layer projection matrices, their
//! editing-branch clones, and the hook protocol that lets callers intercept
//! attention computations.

use std::hash::Hasher;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::share::{ShareMode, SourceFeats};
use crate::tape::Tensor;

/// One hookable self-attention layer.
///
/// `w_q/w_k/w_v` are the source-branch projections, kept frozen during
/// editing. `w_q_t/w_k_t/w_v_t` are the editing-branch clones; immediately
/// after initialization (and after every [`SelfAttentionSite::reset_clones`])
/// each clone equals its frozen counterpart exactly. Which clones accept
/// gradient is decided by the share mode: at most one of `{w_q_t}` /
/// `{w_k_t, w_v_t}` is ever trainable in a run.
pub struct SelfAttentionSite<T: Scalar> {
    pub layer_index: usize,
    pub head_count: usize,
    /// Per-head key dimensionality d used in the attention scale.
    pub key_dim: usize,
    pub channels: usize,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_q_t: Tensor<T>,
    pub w_k_t: Tensor<T>,
    pub w_v_t: Tensor<T>,
}

impl<T: Scalar> SelfAttentionSite<T> {
    pub fn init(layer_index: usize, channels: usize, head_count: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(channels % head_count == 0, "channels must split across heads");
        let init = |rng: &mut ChaCha8Rng| -> Tensor<T> {
            let bound = 1.0 / (channels as f64).sqrt();
            let data = (0..channels * channels)
                .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                .collect();
            Tensor::var(&[channels, channels], data)
        };
        let w_q = init(rng);
        let w_k = init(rng);
        let w_v = init(rng);
        let clone_of = |t: &Tensor<T>| Tensor::var(&[channels, channels], t.to_vec());
        let site = SelfAttentionSite {
            layer_index,
            head_count,
            key_dim: channels / head_count,
            channels,
            w_q_t: clone_of(&w_q),
            w_k_t: clone_of(&w_k),
            w_v_t: clone_of(&w_v),
            w_q,
            w_k,
            w_v,
        };
        // Clones start untrainable; a mode decides later.
        site.w_q_t.set_trainable(false);
        site.w_k_t.set_trainable(false);
        site.w_v_t.set_trainable(false);
        site
    }

    /// Copy frozen weights back into the clones.
    pub fn reset_clones(&self) {
        for (frozen, clone) in [
            (&self.w_q, &self.w_q_t),
            (&self.w_k, &self.w_k_t),
            (&self.w_v, &self.w_v_t),
        ] {
            let data = frozen.to_vec();
            clone.update_data(|d| d.copy_from_slice(&data));
        }
    }

    pub fn clones_equal_frozen(&self) -> bool {
        [
            (&self.w_q, &self.w_q_t),
            (&self.w_k, &self.w_k_t),
            (&self.w_v, &self.w_v_t),
        ]
        .iter()
        .all(|(f, c)| f.to_vec() == c.to_vec())
    }

    /// Gate clone trainability for a share mode (or freeze everything).
    pub fn set_mode_trainability(&self, mode: Option<ShareMode>) {
        let (q, kv) = match mode {
            Some(ShareMode::QShare) => (false, true),
            Some(ShareMode::KvShare) => (true, false),
            None => (false, false),
        };
        self.w_q_t.set_trainable(q);
        self.w_k_t.set_trainable(kv);
        self.w_v_t.set_trainable(kv);
    }

    pub fn clone_params(&self) -> [&Tensor<T>; 3] {
        [&self.w_q_t, &self.w_k_t, &self.w_v_t]
    }

    pub fn frozen_params(&self) -> [&Tensor<T>; 3] {
        [&self.w_q, &self.w_k, &self.w_v]
    }

    pub(crate) fn hash_frozen(&self, h: &mut impl Hasher) {
        for t in self.frozen_params() {
            for v in t.data().iter() {
                h.write_u64(v.to_f64_lossy().to_bits());
            }
        }
    }
}

/// What a hook asks one site to do for the current computation.
pub enum SiteAction<'a, T: Scalar> {
    /// Plain self-attention with the frozen (source-branch) projections.
    Frozen,
    /// Plain self-attention with the editing-branch clones.
    CloneVanilla,
    /// Consume the source branch's queries; keys/values come from the live
    /// hidden states through the clones (structure-preserved editing).
    ShareQ { feats: &'a SourceFeats<T> },
    /// Consume the source branch's keys/values; queries come from the live
    /// hidden states through the clone (non-rigid editing).
    ShareKv { feats: &'a SourceFeats<T> },
    /// Frozen attention, with the computed Q/K/V reported to
    /// [`AttnControl::record`].
    Capture,
}

/// Hook set handed to a denoiser forward pass.
///
/// The driver loop announces each sampling step via `begin_step`; the
/// backend then asks for an action per attention site it reaches.
pub trait AttnControl<T: Scalar> {
    /// Sites this control intends to touch (validated against the backend).
    fn referenced_sites(&self) -> Vec<usize>;

    fn action(&self, site_index: usize) -> SiteAction<'_, T>;

    /// Called for sites acting under [`SiteAction::Capture`].
    fn record(&self, _site_index: usize, _q: &Tensor<T>, _k: &Tensor<T>, _v: &Tensor<T>) {}

    /// Announce the current sampling step (loop index, level).
    fn begin_step(&self, _loop_step: usize, _level: usize) {}
}

/// Validate a hook set against a backend's site list.
pub fn validate_control<T: Scalar>(
    ctrl: &dyn AttnControl<T>,
    site_count: usize,
) -> Result<()> {
    for s in ctrl.referenced_sites() {
        if s >= site_count {
            return Err(Error::config(format!(
                "hook references unknown site {s} (backend has {site_count})"
            )));
        }
    }
    Ok(())
}
