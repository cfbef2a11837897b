//! Classifier-free guidance and the deterministic samplers.

use ndarray::{Array4, Zip};
use serde::{Deserialize, Serialize};

use super::denoiser::{Condition, NoisePredictor};
use super::process::{output_to_eps, PredictionType};
use super::schedule::NoiseSchedule;
use crate::error::{ensure, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Ddim,
    /// Second-order multistep solver in data-prediction form (DPM-Solver++ 2M).
    FastMultistep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub guidance_scale: f64,
    pub scheduler_kind: SchedulerKind,
    /// Only the deterministic `eta = 0` update is implemented.
    pub eta: f64,
    /// Clamp every intermediate x₀ estimate to [−1, 1].
    pub clip_denoised: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_steps: 30,
            guidance_scale: 1.0,
            scheduler_kind: SchedulerKind::Ddim,
            eta: 0.0,
            clip_denoised: true,
        }
    }
}

impl SamplerConfig {
    pub fn with_guidance(mut self, s: f64) -> Self {
        self.guidance_scale = s;
        self
    }

    pub fn validate(&self, t_max: usize) -> Result<()> {
        ensure!(
            self.n_steps >= 1 && self.n_steps <= t_max,
            "n_steps {} outside [1, {t_max}]",
            self.n_steps
        );
        ensure!(
            self.guidance_scale >= 0.0 && self.guidance_scale.is_finite(),
            "guidance scale must be finite and non-negative"
        );
        ensure!(
            self.eta == 0.0,
            "only deterministic sampling (eta = 0) is supported, got {}",
            self.eta
        );
        Ok(())
    }
}

/// Prediction type and guidance scale tuned per organ for the cholec models;
/// unknown names fall back to ε-prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrganDefaults {
    pub prediction_type: PredictionType,
    pub guidance_scale: f64,
}

pub fn organ_defaults(name: &str) -> OrganDefaults {
    let norm: String = name
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect();
    let (prediction_type, guidance_scale) = match norm.as_str() {
        "abdominalwall" => (PredictionType::V, 0.6),
        "fat" => (PredictionType::Epsilon, 5.0),
        "liver" => (PredictionType::Epsilon, 6.0),
        "gallbladder" => (PredictionType::Epsilon, 5.5),
        "ligament" => (PredictionType::Epsilon, 5.0),
        _ => (PredictionType::Epsilon, 5.0),
    };
    OrganDefaults {
        prediction_type,
        guidance_scale,
    }
}

/// `ε_u + s·(ε_c − ε_u)`.
pub fn cfg_combine<T: Scalar>(eps_u: &Array4<T>, eps_c: &Array4<T>, s: f64) -> Array4<T> {
    let s = T::lit(s);
    Zip::from(eps_u)
        .and(eps_c)
        .map_collect(|&u, &c| u + s * (c - u))
}

/// Guided prediction in ε-space. Scales 1 and 0 run a single pass and return
/// the conditional or unconditional prediction unchanged.
pub fn cfg_predict<T: Scalar>(
    model: &impl NoisePredictor<T>,
    x_t: &Array4<T>,
    t: usize,
    cond: &Condition<T>,
    guidance_scale: f64,
    schedule: &NoiseSchedule<T>,
) -> Result<Array4<T>> {
    ensure!(t < schedule.len(), "timestep {t} out of range");
    let ts = vec![t; x_t.dim().0];
    let a = schedule.alpha_bar(t);
    let kind = model.prediction_type();
    let eps = |c: &Condition<T>| -> Result<Array4<T>> {
        Ok(output_to_eps(model.predict(x_t, &ts, c)?, x_t, a, kind))
    };
    if guidance_scale == 1.0 || cond.is_unconditional() {
        return eps(cond);
    }
    let uncond = cond.unconditional();
    if guidance_scale == 0.0 {
        return eps(&uncond);
    }
    Ok(cfg_combine(&eps(&uncond)?, &eps(cond)?, guidance_scale))
}

/// Called after every update with the timestep the state now belongs to
/// (`None` once fully denoised).
pub type StepHook<'a, T> = dyn FnMut(Option<usize>, &mut Array4<T>) -> Result<()> + 'a;

/// Evenly strided descending subsequence of `0..len` ending at `len − 1`,
/// `n` entries.
pub fn timesteps(len: usize, n: usize) -> Vec<usize> {
    let n = n.clamp(1, len.max(1));
    (0..n)
        .rev()
        .map(|i| ((2 * (i + 1) * len + n) / (2 * n)).max(1) - 1)
        .collect()
}

fn x0_and_eps<T: Scalar>(
    x: &Array4<T>,
    eps: Array4<T>,
    a: T,
    clip: bool,
) -> (Array4<T>, Array4<T>) {
    let sa = a.sqrt();
    let s1 = (T::one() - a).sqrt();
    let mut x0 = Zip::from(x)
        .and(&eps)
        .map_collect(|&x, &e| (x - s1 * e) / sa);
    if !clip {
        return (x0, eps);
    }
    let one = T::one();
    x0.mapv_inplace(|v| v.max(-one).min(one));
    let eps = Zip::from(x)
        .and(&x0)
        .map_collect(|&x, &x0| (x - sa * x0) / s1);
    (x0, eps)
}

/// Denoises a state assumed to belong to timestep `t_start` using only
/// timesteps `≤ t_start`.
#[allow(clippy::too_many_arguments)]
pub fn denoise_from<T: Scalar>(
    model: &impl NoisePredictor<T>,
    x: Array4<T>,
    t_start: usize,
    cond: &Condition<T>,
    schedule: &NoiseSchedule<T>,
    config: &SamplerConfig,
    mut hook: Option<&mut StepHook<'_, T>>,
) -> Result<Array4<T>> {
    config.validate(schedule.len())?;
    ensure!(
        t_start < schedule.len(),
        "start timestep {t_start} out of range"
    );
    ensure!(cond.len() == x.dim().0, "condition/batch size mismatch");
    let ts = timesteps(t_start + 1, config.n_steps);
    let mut x = x;
    let mut history: Option<(Array4<T>, T)> = None;
    for (k, &t) in ts.iter().enumerate() {
        let prev = ts.get(k + 1).copied();
        let a = schedule.alpha_bar(t);
        let a_prev = prev.map_or(T::one(), |p| schedule.alpha_bar(p));
        let eps = cfg_predict(model, &x, t, cond, config.guidance_scale, schedule)?;
        let (x0, eps) = x0_and_eps(&x, eps, a, config.clip_denoised);
        x = match config.scheduler_kind {
            SchedulerKind::Ddim => {
                let (sa, s1) = (a_prev.sqrt(), (T::one() - a_prev).sqrt());
                Zip::from(&x0)
                    .and(&eps)
                    .map_collect(|&x0, &e| sa * x0 + s1 * e)
            }
            SchedulerKind::FastMultistep => match prev {
                None => x0,
                Some(_) => {
                    let lambda = |a: T| (a / (T::one() - a)).ln() * T::lit(0.5);
                    let h = lambda(a_prev) - lambda(a);
                    let d = match &history {
                        Some((x0_last, h_last)) => {
                            let r = *h_last / h;
                            let c = T::one() / (T::lit(2.0) * r);
                            Zip::from(&x0)
                                .and(x0_last)
                                .map_collect(|&u, &v| (T::one() + c) * u - c * v)
                        }
                        _ => x0.clone(),
                    };
                    let ratio = ((T::one() - a_prev) / (T::one() - a)).sqrt();
                    let coef = a_prev.sqrt() * (T::one() - (-h).exp());
                    history = Some((x0, h));
                    Zip::from(&x)
                        .and(&d)
                        .map_collect(|&x, &d| ratio * x + coef * d)
                }
            },
        };
        if let Some(h) = hook.as_deref_mut() {
            h(prev, &mut x)?;
        }
    }
    let one = T::one();
    x.mapv_inplace(|v| v.max(-one).min(one));
    Ok(x)
}

/// Full reverse process from `x_T` at timestep `T − 1`.
pub fn ddim_sample<T: Scalar>(
    model: &impl NoisePredictor<T>,
    x_t: Array4<T>,
    cond: &Condition<T>,
    schedule: &NoiseSchedule<T>,
    config: &SamplerConfig,
    hook: Option<&mut StepHook<'_, T>>,
) -> Result<Array4<T>> {
    denoise_from(model, x_t, schedule.len() - 1, cond, schedule, config, hook)
}
