use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Everything needed to rebuild a [`NoiseSchedule`]; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build<T: Scalar>(&self) -> Result<NoiseSchedule<T>> {
        build_schedule(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

/// β/α/ᾱ tables of the forward process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Builds the tables from explicit betas, each in `(0, 1)`.
    pub fn from_betas(betas: Vec<T>) -> Result<Self> {
        ensure!(
            betas.len() >= 2,
            "schedule needs at least 2 steps, got {}",
            betas.len()
        );
        ensure!(
            betas.iter().all(|&b| b > T::zero() && b < T::one()),
            "betas must lie in (0, 1)"
        );
        let alphas: Vec<T> = betas.iter().map(|&b| T::one() - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = T::one();
        for &a in &alphas {
            acc = acc * a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bars[t]
    }
}

pub fn build_schedule<T: Scalar>(
    kind: ScheduleKind,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule<T>> {
    ensure!(steps >= 2, "schedule needs T ≥ 2, got {steps}");
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            ensure!(
                0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0,
                "linear schedule needs 0 < beta_start ≤ beta_end < 1, got {beta_start}, {beta_end}"
            );
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| {
                ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (0..steps)
                .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(1e-8, 0.999))
                .collect()
        }
    };
    NoiseSchedule::from_betas(betas.into_iter().map(T::lit).collect())
}
