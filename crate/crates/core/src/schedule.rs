//! Deterministic DDIM arithmetic and the noise schedule shared by every
//! other module.
//!
//! Levels index positions on the inference grid: level `0` is the clean
//! latent, level `S` the fully noised one. A denoising step from level `t`
//! to `t-1` is
//!
//! ```text
//! z_{t-1} = k1 * z_t + k2 * eps,   k1 = sqrt(abar_{t-1} / abar_t)
//!                                  k2 = sqrt(1 - abar_{t-1})
//!                                     - sqrt(abar_{t-1} (1 - abar_t) / abar_t)
//! ```
//!
//! and the inversion step is its exact algebraic inverse. The stochastic
//! DDIM parameter is fixed to zero throughout: inversion needs determinism.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tensor;

/// Schedule parameters as they appear in the run config file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScheduleSpec {
    pub num_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Number of inference steps S.
    pub s: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            num_train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            s: 50,
        }
    }
}

/// The cumulative-product noise schedule plus the inference timestep grid.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<T: Scalar> {
    num_train_steps: usize,
    alphas_cumprod: Vec<T>,
    /// Strictly decreasing training timesteps, sampling order, length S.
    inference_timesteps: Vec<usize>,
    fingerprint: String,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Linear-in-variance beta schedule with uniformly spaced inference steps.
    pub fn new(spec: &ScheduleSpec) -> Result<Self> {
        if spec.num_train_steps == 0 {
            return Err(Error::invalid("num_train_steps must be positive"));
        }
        if spec.s > spec.num_train_steps {
            return Err(Error::invalid(format!(
                "S = {} exceeds num_train_steps = {}",
                spec.s, spec.num_train_steps
            )));
        }
        let t = spec.num_train_steps;
        let mut alphas_cumprod = Vec::with_capacity(t);
        let mut acc = 1.0f64;
        for i in 0..t {
            let beta = if t == 1 {
                spec.beta_start
            } else {
                spec.beta_start + (spec.beta_end - spec.beta_start) * (i as f64) / ((t - 1) as f64)
            };
            acc *= 1.0 - beta;
            alphas_cumprod.push(T::from_f64_lossy(acc));
        }
        let mut inference_timesteps = Vec::with_capacity(spec.s);
        if spec.s > 0 {
            let ratio = t / spec.s;
            for j in (0..spec.s).rev() {
                inference_timesteps.push(j * ratio);
            }
        }
        let fingerprint = format!(
            "ddim-t{}-b{}-{}-s{}",
            spec.num_train_steps, spec.beta_start, spec.beta_end, spec.s
        );
        Self::from_parts(t, alphas_cumprod, inference_timesteps, fingerprint)
    }

    /// Build from raw parts, enforcing the schedule invariants.
    pub fn from_parts(
        num_train_steps: usize,
        alphas_cumprod: Vec<T>,
        inference_timesteps: Vec<usize>,
        fingerprint: String,
    ) -> Result<Self> {
        if alphas_cumprod.len() != num_train_steps {
            return Err(Error::invalid("alphas_cumprod length != num_train_steps"));
        }
        for (i, a) in alphas_cumprod.iter().enumerate() {
            if !(a.is_finite() && *a > T::zero() && *a <= T::one()) {
                return Err(Error::invalid(format!("abar[{i}] out of (0, 1]")));
            }
            if i > 0 && alphas_cumprod[i] >= alphas_cumprod[i - 1] {
                return Err(Error::invalid("abar must be strictly decreasing"));
            }
        }
        let hi = T::from_f64_lossy(0.99);
        let lo = T::from_f64_lossy(0.05);
        if alphas_cumprod[0] <= hi {
            return Err(Error::invalid("abar at the first training step must be > 0.99"));
        }
        if alphas_cumprod[num_train_steps - 1] >= lo {
            return Err(Error::invalid("abar at the last training step must be < 0.05"));
        }
        for (i, ts) in inference_timesteps.iter().enumerate() {
            if *ts >= num_train_steps {
                return Err(Error::invalid(format!(
                    "inference timestep {ts} outside the training schedule"
                )));
            }
            if i > 0 && inference_timesteps[i] >= inference_timesteps[i - 1] {
                return Err(Error::invalid("inference timesteps must be strictly decreasing"));
            }
        }
        Ok(NoiseSchedule {
            num_train_steps,
            alphas_cumprod,
            inference_timesteps,
            fingerprint,
        })
    }

    pub fn num_train_steps(&self) -> usize {
        self.num_train_steps
    }

    /// Number of inference steps S (levels run 0..=S).
    pub fn num_inference_steps(&self) -> usize {
        self.inference_timesteps.len()
    }

    pub fn inference_timesteps(&self) -> &[usize] {
        &self.inference_timesteps
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Training timestep fed to the denoiser at inference level `1..=S`.
    pub fn train_timestep(&self, level: usize) -> Result<usize> {
        let s = self.num_inference_steps();
        if level == 0 || level > s {
            return Err(Error::invalid(format!("level {level} outside 1..={s}")));
        }
        Ok(self.inference_timesteps[s - level])
    }

    /// Cumulative alpha at an inference level; level 0 is exactly clean.
    pub fn alpha_bar_level(&self, level: usize) -> Result<T> {
        if level == 0 {
            return Ok(T::one());
        }
        Ok(self.alphas_cumprod[self.train_timestep(level)?])
    }

    /// Cumulative alpha at a raw training timestep (used by the trainer).
    pub fn alpha_bar_train(&self, t: usize) -> Result<T> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("training timestep {t} out of range")))
    }
}

/// A latent array tagged with its inference level (0 = clean).
#[derive(Debug, Clone, PartialEq)]
pub struct Latent<T: Scalar> {
    data: Vec<T>,
    shape: [usize; 3],
    pub step_tag: usize,
}

impl<T: Scalar> Latent<T> {
    pub fn new(data: Vec<T>, shape: [usize; 3], step_tag: usize) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(&shape, &[data.len()], "latent data"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("latent contains non-finite entries"));
        }
        Ok(Latent {
            data,
            shape,
            step_tag,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::constant(&self.shape, self.data.clone())
    }

    pub fn from_tensor(t: &Tensor<T>, step_tag: usize) -> Result<Self> {
        let shape = match t.shape() {
            [c, h, w] => [*c, *h, *w],
            s => return Err(Error::invalid(format!("latent tensor must be 3-d, got {s:?}"))),
        };
        Latent::new(t.to_vec(), shape, step_tag)
    }
}

/// The two alpha-derived coefficients of one deterministic sampling step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients<T: Scalar> {
    pub k1: T,
    pub k2: T,
}

impl<T: Scalar> StepCoefficients<T> {
    pub fn from_alpha_bars(abar_t: T, abar_prev: T) -> Result<Self> {
        if !(abar_t > T::zero() && abar_t <= T::one()) || !(abar_prev > T::zero() && abar_prev <= T::one()) {
            return Err(Error::invalid("alpha bars must lie in (0, 1]"));
        }
        let k1 = (abar_prev / abar_t).sqrt();
        let k2 = (T::one() - abar_prev).sqrt()
            - (abar_prev * (T::one() - abar_t) / abar_t).sqrt();
        Ok(StepCoefficients { k1, k2 })
    }
}

/// Coefficients for the denoising step from level `t` to `t_prev`.
///
/// `t_prev` must be the adjacent, less-noised level (`t_prev = t - 1`).
pub fn step_coefficients<T: Scalar>(
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule<T>,
) -> Result<StepCoefficients<T>> {
    if t_prev >= t {
        return Err(Error::invalid(format!(
            "t_prev = {t_prev} must be earlier in noise than t = {t}"
        )));
    }
    if t_prev + 1 != t {
        return Err(Error::invalid(format!(
            "levels {t} and {t_prev} are not adjacent on the inference grid"
        )));
    }
    StepCoefficients::from_alpha_bars(sched.alpha_bar_level(t)?, sched.alpha_bar_level(t_prev)?)
}

/// Noise a clean latent to inference level `t`:
/// `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn forward_noise<T: Scalar>(
    z0: &Latent<T>,
    t: usize,
    eps: &[T],
    sched: &NoiseSchedule<T>,
) -> Result<Latent<T>> {
    if eps.len() != z0.data().len() {
        return Err(Error::shape(
            &z0.shape(),
            &[eps.len()],
            "forward_noise eps",
        ));
    }
    let abar = sched.alpha_bar_level(t)?;
    let c0 = abar.sqrt();
    let c1 = (T::one() - abar).sqrt();
    let data = z0
        .data()
        .iter()
        .zip(eps)
        .map(|(z, e)| c0 * *z + c1 * *e)
        .collect();
    Latent::new(data, z0.shape(), t)
}

/// One deterministic denoising step on plain values.
pub fn ddim_step<T: Scalar>(
    z_t: &Latent<T>,
    eps_pred: &[T],
    coeffs: &StepCoefficients<T>,
) -> Result<Latent<T>> {
    if eps_pred.len() != z_t.data().len() {
        return Err(Error::shape(&z_t.shape(), &[eps_pred.len()], "ddim_step eps"));
    }
    if !eps_pred.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("ddim_step received non-finite eps_pred"));
    }
    let data = z_t
        .data()
        .iter()
        .zip(eps_pred)
        .map(|(z, e)| coeffs.k1 * *z + coeffs.k2 * *e)
        .collect();
    Latent::new(data, z_t.shape(), z_t.step_tag.saturating_sub(1))
}

/// Exact algebraic inverse of [`ddim_step`]:
/// `z_t = (z_{t-1} - k2 * eps) / k1`.
pub fn ddim_invert_step<T: Scalar>(
    z_prev: &Latent<T>,
    eps_pred: &[T],
    coeffs: &StepCoefficients<T>,
) -> Result<Latent<T>> {
    if eps_pred.len() != z_prev.data().len() {
        return Err(Error::shape(
            &z_prev.shape(),
            &[eps_pred.len()],
            "ddim_invert_step eps",
        ));
    }
    if coeffs.k1 == T::zero() {
        return Err(Error::invalid("ddim_invert_step with k1 = 0"));
    }
    if !eps_pred.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("ddim_invert_step received non-finite eps_pred"));
    }
    let data = z_prev
        .data()
        .iter()
        .zip(eps_pred)
        .map(|(z, e)| (*z - coeffs.k2 * *e) / coeffs.k1)
        .collect();
    Latent::new(data, z_prev.shape(), z_prev.step_tag + 1)
}

/// [`ddim_step`] on graph tensors; gradient flows through both terms unless
/// the caller detaches the noise term first.
pub fn ddim_step_tensor<T: Scalar>(
    z_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    coeffs: &StepCoefficients<T>,
) -> Result<Tensor<T>> {
    z_t.mul_scalar(coeffs.k1).add(&eps_pred.mul_scalar(coeffs.k2))
}
