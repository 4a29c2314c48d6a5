//! Noise-prediction training for the toy denoiser.
//!
//! Minimizes `E ||eps - eps_theta(x_t, t, cond)||^2` over random timesteps
//! and noise draws, with classifier-free condition dropout so guidance has
//! a meaningful unconditional branch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::denoiser::codec::AffineCodec;
use crate::denoiser::toy::ToyDenoiser;
use crate::denoiser::DenoiserBackend;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tape::{no_grad, Tensor};
use crate::toydata::ToyScene;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Probability of replacing the caption with the null condition.
    pub cond_dropout: f64,
    /// Snapshot cadence for divergence recovery.
    pub snapshot_every: usize,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig {
            steps: 1500,
            batch_size: 4,
            learning_rate: 2e-3,
            seed: 0,
            cond_dropout: 0.1,
            snapshot_every: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Box-Muller keeps the draw stream identical across scalar types.
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let a = 2.0 * std::f64::consts::PI * u2;
        out.push(r * a.cos());
        if out.len() < n {
            out.push(r * a.sin());
        }
    }
    out
}

fn noised_sample<T: Scalar>(
    scene: &ToyScene,
    t: usize,
    sched: &NoiseSchedule<T>,
    codec: &AffineCodec,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<T>, Vec<T>)> {
    let render_seed = rng.gen::<u64>();
    let img = crate::toydata::render::<T>(scene, render_seed);
    let z0 = codec.encode(&img)?;
    let eps: Vec<T> = standard_normal(rng, z0.data().len())
        .into_iter()
        .map(T::from_f64_lossy)
        .collect();
    let abar = sched.alpha_bar_train(t)?;
    let c0 = abar.sqrt();
    let c1 = (T::one() - abar).sqrt();
    let zt = z0
        .data()
        .iter()
        .zip(&eps)
        .map(|(z, e)| c0 * *z + c1 * *e)
        .collect();
    Ok((zt, eps))
}

/// One training batch's loss as a graph tensor.
fn batch_loss<T: Scalar>(
    model: &ToyDenoiser<T>,
    scenes: &[ToyScene],
    sched: &NoiseSchedule<T>,
    codec: &AffineCodec,
    cfg: &DenoiserTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let shape = model.latent_shape();
    let mut total: Option<Tensor<T>> = None;
    for _ in 0..cfg.batch_size {
        let scene = scenes[rng.gen_range(0..scenes.len())];
        let t = rng.gen_range(0..sched.num_train_steps());
        let (zt, eps) = noised_sample(&scene, t, sched, codec, rng)?;
        let cond = if rng.gen::<f64>() < cfg.cond_dropout {
            model.null_condition()
        } else {
            model.encode_caption(&scene.caption())?
        };
        let zt = Tensor::constant(&shape, zt);
        let eps = Tensor::constant(&shape, eps);
        let pred = model.predict(&zt, t, &cond, None)?;
        let loss = pred.sub(&eps)?.sum_squares()?
            .mul_scalar(T::one() / T::from_f64_lossy(zt.numel() as f64));
        total = Some(match total {
            Some(acc) => acc.add(&loss)?,
            None => loss,
        });
    }
    Ok(total
        .expect("batch_size >= 1")
        .mul_scalar(T::one() / T::from_f64_lossy(cfg.batch_size as f64)))
}

/// Train in place. On divergence the model is restored to the last good
/// snapshot and a training failure is returned.
pub fn train_toy_denoiser<T: Scalar>(
    model: &ToyDenoiser<T>,
    scenes: &[ToyScene],
    sched: &NoiseSchedule<T>,
    codec: &AffineCodec,
    cfg: &DenoiserTrainConfig,
) -> Result<TrainReport> {
    if scenes.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::invalid("steps and batch_size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model.set_train_mode();
    let params = model.trainable_params();
    let mut opt = Adam::new(
        params.clone(),
        T::from_f64_lossy(cfg.learning_rate),
        (T::from_f64_lossy(0.9), T::from_f64_lossy(0.999)),
    );
    let mut snapshot: Vec<Vec<T>> = params.iter().map(|p| p.to_vec()).collect();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let loss = batch_loss(model, scenes, sched, codec, cfg, &mut rng)?;
        let value = loss.item().to_f64_lossy();
        if !value.is_finite() {
            for (p, snap) in params.iter().zip(&snapshot) {
                p.update_data(|d| d.copy_from_slice(snap));
            }
            return Err(Error::Training {
                step,
                reason: "loss became non-finite; restored last good checkpoint".into(),
            });
        }
        curve.push(value);
        let grads = loss.backward()?;
        opt.step(&grads);
        if (step + 1) % cfg.snapshot_every == 0 {
            for (i, p) in params.iter().enumerate() {
                snapshot[i] = p.to_vec();
            }
        }
    }
    model.reset_clones();
    Ok(TrainReport {
        initial_loss: curve[0],
        final_loss: *curve.last().unwrap(),
        loss_curve: curve,
    })
}

/// Mean noise-prediction MSE on a fixed held-out draw set.
pub fn eval_noise_mse<T: Scalar>(
    model: &ToyDenoiser<T>,
    scenes: &[ToyScene],
    sched: &NoiseSchedule<T>,
    codec: &AffineCodec,
    seed: u64,
    samples: usize,
    t_override: Option<usize>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = model.latent_shape();
    let mut total = 0.0;
    for _ in 0..samples {
        let scene = scenes[rng.gen_range(0..scenes.len())];
        let t = t_override.unwrap_or_else(|| rng.gen_range(0..sched.num_train_steps()));
        let (zt, eps) = noised_sample(&scene, t, sched, codec, &mut rng)?;
        let cond = model.encode_caption(&scene.caption())?;
        let zt_t = Tensor::constant(&shape, zt);
        let mse = no_grad(|| -> Result<f64> {
            let pred = model.predict(&zt_t, t, &cond, None)?;
            let diff: f64 = pred
                .data()
                .iter()
                .zip(&eps)
                .map(|(p, e)| (*p - *e).to_f64_lossy().powi(2))
                .sum();
            Ok(diff / eps.len() as f64)
        })?;
        total += mse;
    }
    Ok(total / samples as f64)
}

/// Baseline that predicts the noise as the noised input itself; at the
/// highest noise levels this is the dataset-independent floor reference.
pub fn identity_estimate_mse<T: Scalar>(
    scenes: &[ToyScene],
    sched: &NoiseSchedule<T>,
    codec: &AffineCodec,
    seed: u64,
    samples: usize,
    t: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let scene = scenes[rng.gen_range(0..scenes.len())];
        let (zt, eps) = noised_sample::<T>(&scene, t, sched, codec, &mut rng)?;
        let diff: f64 = zt
            .iter()
            .zip(&eps)
            .map(|(p, e)| (*p - *e).to_f64_lossy().powi(2))
            .sum();
        total += diff / eps.len() as f64;
    }
    Ok(total / samples as f64)
}
