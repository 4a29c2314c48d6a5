//! Adaptive dual-branch self-attention sharing.
//!
//! The editing branch consumes the source branch's queries (structure-
//! preserved tasks) or key/value pairs (non-rigid tasks):
//!
//! ```text
//! Q-share:  softmax(Q_s K_tᵀ / sqrt(d)) V_t     K_t = W_k_t x,  V_t = W_v_t x
//! KV-share: softmax(Q_t K_sᵀ / sqrt(d)) V_s     Q_t = W_q_t x
//! ```
//!
//! The source branch is never modified; cached features enter the editing
//! graph as constants.

use std::cell::Cell;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::denoiser::site::{AttnControl, SelfAttentionSite, SiteAction};
use crate::error::{Error, Result};
use crate::inversion::SourceFeatureCache;
use crate::scalar::Scalar;
use crate::tape::Tensor;

/// Which feature set the editing branch borrows from the source branch.
///
/// Q-share marks `{W_k_t, W_v_t}` trainable, KV-share marks `{W_q_t}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShareMode {
    /// Structure-preserved editing: source queries, live keys/values.
    QShare,
    /// Non-rigid editing: live queries, source keys/values.
    KvShare,
}

impl ShareMode {
    pub fn label(&self) -> &'static str {
        match self {
            ShareMode::QShare => "structure",
            ShareMode::KvShare => "nonrigid",
        }
    }
}

/// Inclusive window of sampling-loop step indices (1-based; step 1 is the
/// highest-noise step). `None` disables sharing entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepWindow {
    pub start: usize,
    pub end: usize,
}

impl StepWindow {
    pub fn contains(&self, step: usize) -> bool {
        step >= self.start && step <= self.end
    }

    pub fn is_empty(&self) -> bool {
        self.start > self.end
    }
}

/// Which layers and steps share which features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareConfig {
    pub mode: ShareMode,
    pub shared_layers: BTreeSet<usize>,
    pub active_steps: Option<StepWindow>,
}

impl ShareConfig {
    /// Default for a backend with `n_sites` attention sites and an `s`-step
    /// sampler: share the deepest half of the sites (the decoder-side,
    /// high-resolution ones), skipping the first four (highest-noise) steps.
    pub fn default_for(mode: ShareMode, n_sites: usize, s: usize) -> Self {
        let shared = n_sites.div_ceil(2);
        ShareConfig {
            mode,
            shared_layers: (n_sites - shared..n_sites).collect(),
            active_steps: if s >= 5 {
                Some(StepWindow { start: 5, end: s })
            } else if s >= 1 {
                Some(StepWindow { start: 1, end: s })
            } else {
                None
            },
        }
    }

    pub fn step_active(&self, loop_step: usize) -> bool {
        self.active_steps
            .map(|w| w.contains(loop_step))
            .unwrap_or(false)
    }

    /// Every (loop step, layer) pair this config covers, for an `s`-step
    /// sampler.
    pub fn grid(&self, s: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for step in 1..=s {
            if self.step_active(step) {
                for layer in &self.shared_layers {
                    out.push((step, *layer));
                }
            }
        }
        out
    }
}

/// Cached per-site source features at one (step, layer) point, stored as
/// plain values so the editing graph treats them as constants.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceFeats<T: Scalar> {
    pub n: usize,
    pub c: usize,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> SourceFeats<T> {
    pub fn from_tensors(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Self> {
        let (n, c) = match q.shape() {
            [n, c] => (*n, *c),
            s => return Err(Error::invalid(format!("features must be 2-d, got {s:?}"))),
        };
        if k.shape() != [n, c] || v.shape() != [n, c] {
            return Err(Error::shape(&[n, c], k.shape(), "source feature triple"));
        }
        Ok(SourceFeats {
            n,
            c,
            q: q.to_vec(),
            k: k.to_vec(),
            v: v.to_vec(),
        })
    }
}

/// Multi-head scaled-dot attention. Queries are `[Nq, C]`; keys and values
/// share `[Nk, C]` (`Nk == Nq` for self-attention, the condition length for
/// cross-attention).
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let (_n, c) = match q.shape() {
        [n, c] => (*n, *c),
        s => return Err(Error::invalid(format!("attention input must be 2-d, got {s:?}"))),
    };
    let nk = match k.shape() {
        [nk, kc] if *kc == c => *nk,
        s => return Err(Error::shape(&[0, c], s, "attention keys")),
    };
    if v.shape() != [nk, c] {
        return Err(Error::shape(&[nk, c], v.shape(), "attention values"));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid(format!("{c} channels do not split into {heads} heads")));
    }
    let d = c / heads;
    let scale = T::one() / T::from_f64_lossy((d as f64).sqrt());
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (c0, c1) = (h * d, (h + 1) * d);
        let qh = q.slice_cols(c0, c1)?;
        let kh = k.slice_cols(c0, c1)?;
        let vh = v.slice_cols(c0, c1)?;
        let logits = qh.matmul(&kh.transpose2d()?)?.mul_scalar(scale);
        let weights = logits.softmax_rows()?;
        outputs.push(weights.matmul(&vh)?);
    }
    Tensor::concat_cols(&outputs)
}

/// Project hidden states through a site's frozen or clone matrices.
pub fn project_qkv<T: Scalar>(
    x: &Tensor<T>,
    site: &SelfAttentionSite<T>,
    clones: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (wq, wk, wv) = if clones {
        (&site.w_q_t, &site.w_k_t, &site.w_v_t)
    } else {
        (&site.w_q, &site.w_k, &site.w_v)
    };
    Ok((x.matmul(wq)?, x.matmul(wk)?, x.matmul(wv)?))
}

/// Plain self-attention at one site.
pub fn attend_vanilla<T: Scalar>(
    x: &Tensor<T>,
    site: &SelfAttentionSite<T>,
    clones: bool,
) -> Result<Tensor<T>> {
    let (q, k, v) = project_qkv(x, site, clones)?;
    scaled_dot_attention(&q, &k, &v, site.head_count)
}

/// Dual-branch shared attention at one site of the editing branch.
pub fn attend_shared<T: Scalar>(
    x: &Tensor<T>,
    feats: &SourceFeats<T>,
    site: &SelfAttentionSite<T>,
    mode: ShareMode,
) -> Result<Tensor<T>> {
    let (n, c) = match x.shape() {
        [n, c] => (*n, *c),
        s => return Err(Error::invalid(format!("hidden states must be 2-d, got {s:?}"))),
    };
    if feats.n != n || feats.c != c {
        // Resolution mismatches are rejected, never interpolated.
        return Err(Error::config(format!(
            "cached features are [{}, {}] but live hidden states are [{n}, {c}] at layer {}",
            feats.n, feats.c, site.layer_index
        )));
    }
    match mode {
        ShareMode::QShare => {
            let q_src = Tensor::constant(&[n, c], feats.q.clone());
            let k_live = x.matmul(&site.w_k_t)?;
            let v_live = x.matmul(&site.w_v_t)?;
            scaled_dot_attention(&q_src, &k_live, &v_live, site.head_count)
        }
        ShareMode::KvShare => {
            let q_live = x.matmul(&site.w_q_t)?;
            let k_src = Tensor::constant(&[n, c], feats.k.clone());
            let v_src = Tensor::constant(&[n, c], feats.v.clone());
            scaled_dot_attention(&q_live, &k_src, &v_src, site.head_count)
        }
    }
}

/// Hook set that activates [`attend_shared`] on the configured
/// (layer, step) grid and clone-vanilla attention everywhere else.
pub struct ShareHooks<'a, T: Scalar> {
    cfg: ShareConfig,
    cache: &'a SourceFeatureCache<T>,
    current_step: Cell<usize>,
    current_level: Cell<usize>,
    site_count: usize,
}

impl<'a, T: Scalar> ShareHooks<'a, T> {
    pub fn config(&self) -> &ShareConfig {
        &self.cfg
    }
}

/// Build the editing-branch hook set, validating that the cache covers the
/// configured grid.
pub fn install_share_hooks<'a, T: Scalar>(
    cfg: &ShareConfig,
    cache: &'a SourceFeatureCache<T>,
    site_count: usize,
    s: usize,
) -> Result<ShareHooks<'a, T>> {
    for layer in &cfg.shared_layers {
        if *layer >= site_count {
            return Err(Error::config(format!(
                "share config references layer {layer}, backend has {site_count} sites"
            )));
        }
    }
    if let Some(w) = &cfg.active_steps {
        if !w.is_empty() && (w.start < 1 || w.end > s) {
            return Err(Error::config(format!(
                "share window {}..={} outside 1..={s}",
                w.start, w.end
            )));
        }
    }
    for (step, layer) in cfg.grid(s) {
        let level = s + 1 - step;
        if cache.get(level, layer).is_none() {
            return Err(Error::config(format!(
                "feature cache is missing (level {level}, layer {layer})"
            )));
        }
    }
    Ok(ShareHooks {
        cfg: cfg.clone(),
        cache,
        current_step: Cell::new(0),
        current_level: Cell::new(0),
        site_count,
    })
}

impl<'a, T: Scalar> AttnControl<T> for ShareHooks<'a, T> {
    fn referenced_sites(&self) -> Vec<usize> {
        (0..self.site_count).collect()
    }

    fn action(&self, site_index: usize) -> SiteAction<'_, T> {
        let step = self.current_step.get();
        if self.cfg.step_active(step) && self.cfg.shared_layers.contains(&site_index) {
            if let Some(feats) = self.cache.get(self.current_level.get(), site_index) {
                return match self.cfg.mode {
                    ShareMode::QShare => SiteAction::ShareQ { feats },
                    ShareMode::KvShare => SiteAction::ShareKv { feats },
                };
            }
        }
        // The editing branch always runs on the clone weights.
        SiteAction::CloneVanilla
    }

    fn begin_step(&self, loop_step: usize, level: usize) {
        self.current_step.set(loop_step);
        self.current_level.set(level);
    }
}
