//! Gateway-restricted guidance optimization.
//!
//! Backpropagating an image-space loss through an unrolled sampler retains
//! one denoiser graph per step. Instead, each sampling step computes
//!
//! ```text
//! z_{t-1} = k1 * z_t + k2 * eps            if step in gateways
//! z_{t-1} = k1 * z_t + sg(k2 * eps)        otherwise
//! ```
//!
//! so gradients reach the trainable projections only through the noise terms
//! of the gateway steps - and, at those steps, back through the latent chain
//! as well - while the number of retained denoiser graphs equals the gateway
//! count exactly. Each optimization loop draws a fresh gateway set, rolls
//! out the editing branch from the pivotal noise latent, scores the decoded
//! result against the target caption plus a latent-space regularizer, and
//! applies one adaptive-moment update.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::codec::AffineCodec;
use crate::denoiser::{predict_with_guidance, DenoiserBackend, TextCondition};
use crate::embedder::TextImageEmbedder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::inversion::{InversionTrajectory, SourceFeatureCache};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::schedule::{step_coefficients, Latent, NoiseSchedule};
use crate::share::{install_share_hooks, ShareConfig};
use crate::tape::{graph_stats, instrument, no_grad, Tensor};
use crate::toydata::Caption;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GatewayStrategy {
    Random,
    FormerHalf,
    LatterHalf,
    StratifiedIntervals,
}

pub const GATEWAY_STRATEGIES: [GatewayStrategy; 4] = [
    GatewayStrategy::Random,
    GatewayStrategy::FormerHalf,
    GatewayStrategy::LatterHalf,
    GatewayStrategy::StratifiedIntervals,
];

impl GatewayStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            GatewayStrategy::Random => "random",
            GatewayStrategy::FormerHalf => "former-half",
            GatewayStrategy::LatterHalf => "latter-half",
            GatewayStrategy::StratifiedIntervals => "stratified-intervals",
        }
    }
}

/// The sampling steps (1-based loop indices) whose noise terms keep their
/// graphs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewaySchedule {
    pub steps: BTreeSet<usize>,
    pub strategy: GatewayStrategy,
    pub rng_seed: u64,
}

impl GatewaySchedule {
    pub fn contains(&self, step: usize) -> bool {
        self.steps.contains(&step)
    }
}

fn sample_distinct(rng: &mut ChaCha8Rng, lo: usize, hi: usize, n: usize) -> BTreeSet<usize> {
    // Partial Fisher-Yates over the inclusive range [lo, hi].
    let mut pool: Vec<usize> = (lo..=hi).collect();
    let mut out = BTreeSet::new();
    for i in 0..n {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
        out.insert(pool[i]);
    }
    out
}

/// Draw `n` distinct gateway steps from `[1..=s]` under a strategy.
///
/// `n == s` is degenerate-complete: every strategy returns all steps. The
/// half strategies otherwise reject `n` larger than their half.
pub fn select_gateways(
    strategy: GatewayStrategy,
    s: usize,
    n: usize,
    rng_seed: u64,
) -> Result<GatewaySchedule> {
    if n > s {
        return Err(Error::invalid(format!("{n} gateways exceed {s} sampling steps")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let steps = if n == 0 {
        BTreeSet::new()
    } else if n == s {
        (1..=s).collect()
    } else {
        match strategy {
            GatewayStrategy::Random => sample_distinct(&mut rng, 1, s, n),
            GatewayStrategy::FormerHalf => {
                let half = s / 2;
                if n > half {
                    return Err(Error::invalid(format!(
                        "{n} gateways do not fit in the former {half} steps"
                    )));
                }
                sample_distinct(&mut rng, 1, half, n)
            }
            GatewayStrategy::LatterHalf => {
                let half = s / 2;
                if n > s - half {
                    return Err(Error::invalid(format!(
                        "{n} gateways do not fit in the latter {} steps",
                        s - half
                    )));
                }
                sample_distinct(&mut rng, half + 1, s, n)
            }
            GatewayStrategy::StratifiedIntervals => {
                // One uniform draw per contiguous bucket of width s/n.
                let mut steps = BTreeSet::new();
                for b in 0..n {
                    let lo = b * s / n + 1;
                    let hi = (b + 1) * s / n;
                    steps.insert(rng.gen_range(lo..=hi));
                }
                steps
            }
        }
    };
    Ok(GatewaySchedule {
        steps,
        strategy,
        rng_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationConfig {
    /// Number of optimization loops N; 0 means the direct edit.
    pub loops: usize,
    /// Gateways per loop n.
    pub gateways_per_loop: usize,
    pub strategy: GatewayStrategy,
    pub learning_rate: f64,
    /// Adaptive-moment decay pair.
    pub betas: (f64, f64),
    /// Reconstruction strength weighting the latent regularizer.
    pub lambda: f64,
    pub cfg_scale: f64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        OptimizationConfig {
            loops: 3,
            gateways_per_loop: 5,
            strategy: GatewayStrategy::Random,
            learning_rate: 1e-4,
            betas: (0.9, 0.999),
            lambda: 1.0,
            cfg_scale: 7.5,
        }
    }
}

impl OptimizationConfig {
    pub fn validate(&self, s: usize) -> Result<()> {
        if self.gateways_per_loop > s {
            return Err(Error::invalid(format!(
                "{} gateways per loop exceed {s} sampling steps",
                self.gateways_per_loop
            )));
        }
        if !(0.0..=10.0).contains(&self.lambda) {
            return Err(Error::invalid(format!(
                "lambda {} outside [0, 10]",
                self.lambda
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Loss components of one rollout; `loop_index` counts the parameter
/// updates applied before the evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loop_index: usize,
    pub gateways: Vec<usize>,
    pub l_clip: f64,
    pub l_reg: f64,
    pub total: f64,
}

/// Retention accounting for one optimization rollout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutStats {
    /// Denoiser computations whose graphs stayed attached to the loss.
    pub retained_graphs: usize,
    /// Activation elements held by those graphs.
    pub retained_elements: usize,
    /// Peak live denoiser-scoped elements during the rollout.
    pub peak_scoped_elements: usize,
}

/// Roll the editing branch out from the noised latent with stop-gradient on
/// every non-gateway noise term. Gradient flows to parameters only through
/// gateway noise terms; the latent chain carries gradient across all steps.
pub fn sample_with_gateways<T: Scalar>(
    z_noised: &Latent<T>,
    cond: &TextCondition<T>,
    hooks: Option<&dyn crate::denoiser::AttnControl<T>>,
    gw: &GatewaySchedule,
    backend: &dyn DenoiserBackend<T>,
    sched: &NoiseSchedule<T>,
    cfg_scale: T,
) -> Result<Tensor<T>> {
    let s = sched.num_inference_steps();
    if let Some(max) = gw.steps.iter().max() {
        if *max > s {
            return Err(Error::invalid(format!("gateway step {max} outside 1..={s}")));
        }
    }
    let mut z = z_noised.to_tensor();
    for loop_step in 1..=s {
        let level = s + 1 - loop_step;
        if let Some(h) = hooks {
            h.begin_step(loop_step, level);
        }
        let t = sched.train_timestep(level)?;
        let eps = predict_with_guidance(backend, &z, t, cond, cfg_scale, hooks)?;
        if !eps.all_finite() {
            return Err(Error::Rollout {
                step: loop_step,
                reason: "non-finite noise prediction".into(),
            });
        }
        let coeffs = step_coefficients(level, level - 1, sched)?;
        let noise_term = eps.mul_scalar(coeffs.k2);
        let noise_term = if gw.contains(loop_step) {
            noise_term
        } else {
            noise_term.detach()
        };
        z = z.mul_scalar(coeffs.k1).add(&noise_term)?;
        if !z.all_finite() {
            return Err(Error::Rollout {
                step: loop_step,
                reason: "non-finite latent".into(),
            });
        }
    }
    Ok(z)
}

/// `1 - cos(image, text)` over unit embeddings; range `[0, 2]`.
pub fn clip_loss<T: Scalar>(image_emb: &Tensor<T>, text_emb: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(image_emb.dot(text_emb)?.neg().add_scalar(T::one()))
}

/// Squared L2 distance between the edited and source clean latents.
pub fn reg_loss<T: Scalar>(z0_t: &Tensor<T>, z0_s: &Tensor<T>) -> Result<Tensor<T>> {
    z0_t.sub(z0_s)?.sum_squares()
}

/// Everything one edit run produces.
pub struct EditOutcome<T: Scalar> {
    /// Clean editing-branch latent after the final rollout.
    pub final_latent: Latent<T>,
    pub final_image: Image<T>,
    /// `stage_images[k]` is the decoded edit after `k` parameter updates;
    /// index 0 is the direct feature-sharing edit.
    pub stage_images: Vec<Image<T>>,
    /// `history[k]` is the loss of the rollout after `k` updates.
    pub history: Vec<LossBreakdown>,
    pub rollout_stats: Vec<RolloutStats>,
}

/// The random-gateway guidance loop.
///
/// Per loop: draw a fresh gateway set, roll out the editing branch from the
/// trajectory's noised latent, decode, score against the target, and apply
/// one optimizer update. Emits the decoded image of every rollout plus a
/// final post-update rollout.
#[allow(clippy::too_many_arguments)]
pub fn optimize_edit<T: Scalar>(
    traj: &InversionTrajectory<T>,
    cache: &SourceFeatureCache<T>,
    share_cfg: &ShareConfig,
    target_caption: &Caption,
    target_cond: &TextCondition<T>,
    opt_cfg: &OptimizationConfig,
    backend: &dyn DenoiserBackend<T>,
    codec: &AffineCodec,
    embedder: &dyn TextImageEmbedder<T>,
    sched: &NoiseSchedule<T>,
    seed: u64,
) -> Result<EditOutcome<T>> {
    let s = sched.num_inference_steps();
    opt_cfg.validate(s)?;
    if traj.schedule_id != sched.fingerprint() {
        return Err(Error::config("trajectory/schedule mismatch in optimize_edit"));
    }
    backend.set_edit_mode(share_cfg.mode);
    let hooks = install_share_hooks(share_cfg, cache, backend.sites().len(), s)?;
    let params = backend.trainable_params();
    if params.is_empty() && opt_cfg.loops > 0 {
        return Err(Error::invalid(
            "optimization requested but the trainable set is empty",
        ));
    }
    let mut opt = Adam::new(
        params,
        T::from_f64_lossy(opt_cfg.learning_rate),
        (
            T::from_f64_lossy(opt_cfg.betas.0),
            T::from_f64_lossy(opt_cfg.betas.1),
        ),
    );
    let cfg_scale = T::from_f64_lossy(opt_cfg.cfg_scale);
    let lambda = T::from_f64_lossy(opt_cfg.lambda);
    let z0_s = cache.clean_latent().to_tensor();
    let text_emb = no_grad(|| embedder.embed_text(target_caption))?;
    let z_noised = traj.noised();

    let mut seed_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(opt_cfg.loops + 1);
    let mut stage_images = Vec::with_capacity(opt_cfg.loops + 1);
    let mut rollout_stats = Vec::with_capacity(opt_cfg.loops);

    for loop_idx in 0..opt_cfg.loops {
        let gw = select_gateways(
            opt_cfg.strategy,
            s,
            opt_cfg.gateways_per_loop,
            seed_rng.gen(),
        )?;
        instrument::reset_peak_scoped_elements();
        let z0_t = sample_with_gateways(
            z_noised,
            target_cond,
            Some(&hooks),
            &gw,
            backend,
            sched,
            cfg_scale,
        )
        .map_err(|e| match e {
            Error::Rollout { step, reason } => Error::Rollout {
                step,
                reason: format!("loop {loop_idx}: {reason}"),
            },
            other => other,
        })?;
        let image = codec.decode(&z0_t)?;
        let image_emb = embedder.embed_image(&image)?;
        let l_clip = clip_loss(&image_emb, &text_emb)?;
        let l_reg = reg_loss(&z0_t, &z0_s)?;
        let total = l_clip.add(&l_reg.mul_scalar(lambda))?;
        let breakdown = LossBreakdown {
            loop_index: loop_idx,
            gateways: gw.steps.iter().copied().collect(),
            l_clip: l_clip.item().to_f64_lossy(),
            l_reg: l_reg.item().to_f64_lossy(),
            total: total.item().to_f64_lossy(),
        };
        if !breakdown.total.is_finite() {
            history.push(breakdown);
            return Err(Error::EditAborted {
                loop_index: loop_idx,
                history,
            });
        }
        let stats = graph_stats(&total);
        rollout_stats.push(RolloutStats {
            retained_graphs: stats.retained_denoiser_graphs,
            retained_elements: stats.retained_denoiser_elements,
            peak_scoped_elements: instrument::peak_scoped_elements(),
        });
        stage_images.push(Image::from_tensor(&image)?);
        history.push(breakdown);
        let grads = total.backward()?;
        drop(total);
        drop(l_clip);
        drop(l_reg);
        drop(image_emb);
        drop(image);
        drop(z0_t);
        opt.step(&grads);
    }

    // Final rollout with the updated parameters; stop-gradient placement
    // does not change values, so this is the plain feature-sharing edit.
    let empty = GatewaySchedule {
        steps: BTreeSet::new(),
        strategy: opt_cfg.strategy,
        rng_seed: 0,
    };
    let (final_latent, final_image, final_breakdown) = no_grad(|| -> Result<_> {
        let z0_t = sample_with_gateways(
            z_noised,
            target_cond,
            Some(&hooks),
            &empty,
            backend,
            sched,
            cfg_scale,
        )?;
        let image_t = codec.decode(&z0_t)?;
        let image_emb = embedder.embed_image(&image_t)?;
        let l_clip = clip_loss(&image_emb, &text_emb)?.item().to_f64_lossy();
        let l_reg = reg_loss(&z0_t, &z0_s)?.item().to_f64_lossy();
        let breakdown = LossBreakdown {
            loop_index: opt_cfg.loops,
            gateways: Vec::new(),
            l_clip,
            l_reg,
            total: l_clip + opt_cfg.lambda * l_reg,
        };
        Ok((
            Latent::from_tensor(&z0_t, 0)?,
            Image::from_tensor(&image_t)?,
            breakdown,
        ))
    })?;
    stage_images.push(final_image.clone());
    history.push(final_breakdown);

    Ok(EditOutcome {
        final_latent,
        final_image,
        stage_images,
        history,
        rollout_stats,
    })
}
