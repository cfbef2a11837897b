//! Forward noising and the ε/v parameterisations.

use ndarray::{Array, Array4, Axis, Dimension, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{ensure, Result};
use crate::scalar::Scalar;

/// What the denoiser's raw output represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionType {
    Epsilon,
    /// Velocity `√ᾱ·z − √(1−ᾱ)·x₀`.
    V,
}

/// Standard normal tensor, drawn in row-major order.
pub fn gaussian_noise<T: Scalar>(
    shape: (usize, usize, usize, usize),
    rng: &mut impl Rng,
) -> Array4<T> {
    Array4::from_shape_simple_fn(shape, || T::lit(rng.sample::<f64, _>(StandardNormal)))
}

fn check_t<T: Scalar>(t: usize, schedule: &NoiseSchedule<T>) -> Result<()> {
    ensure!(
        t < schedule.len(),
        "timestep {t} out of range [0, {})",
        schedule.len()
    );
    Ok(())
}

/// `√ᾱ·x₀ + √(1−ᾱ)·z` for an explicit `alpha_bar`.
pub fn forward_diffuse_alpha<T: Scalar, D: Dimension>(
    x0: &Array<T, D>,
    alpha_bar: T,
    z: &Array<T, D>,
) -> Result<Array<T, D>> {
    ensure!(
        x0.shape() == z.shape(),
        "noise shape {:?} does not match data shape {:?}",
        z.shape(),
        x0.shape()
    );
    let a = alpha_bar.sqrt();
    let s = (T::one() - alpha_bar).sqrt();
    Ok(Zip::from(x0).and(z).map_collect(|&x, &n| a * x + s * n))
}

pub fn forward_diffuse<T: Scalar, D: Dimension>(
    x0: &Array<T, D>,
    t: usize,
    z: &Array<T, D>,
    schedule: &NoiseSchedule<T>,
) -> Result<Array<T, D>> {
    check_t(t, schedule)?;
    forward_diffuse_alpha(x0, schedule.alpha_bar(t), z)
}

/// Velocity target `√ᾱ·z − √(1−ᾱ)·x₀`.
pub fn v_from_eps<T: Scalar, D: Dimension>(
    x0: &Array<T, D>,
    z: &Array<T, D>,
    t: usize,
    schedule: &NoiseSchedule<T>,
) -> Result<Array<T, D>> {
    check_t(t, schedule)?;
    v_from_eps_alpha(x0, z, schedule.alpha_bar(t))
}

pub fn v_from_eps_alpha<T: Scalar, D: Dimension>(
    x0: &Array<T, D>,
    z: &Array<T, D>,
    alpha_bar: T,
) -> Result<Array<T, D>> {
    ensure!(x0.shape() == z.shape(), "x0/z shape mismatch");
    let a = alpha_bar.sqrt();
    let s = (T::one() - alpha_bar).sqrt();
    Ok(Zip::from(x0).and(z).map_collect(|&x, &n| a * n - s * x))
}

/// Recovers `(ε, x₀)` from a noisy sample and its velocity.
pub fn eps_from_v<T: Scalar, D: Dimension>(
    x_t: &Array<T, D>,
    v: &Array<T, D>,
    t: usize,
    schedule: &NoiseSchedule<T>,
) -> Result<(Array<T, D>, Array<T, D>)> {
    check_t(t, schedule)?;
    eps_from_v_alpha(x_t, v, schedule.alpha_bar(t))
}

pub fn eps_from_v_alpha<T: Scalar, D: Dimension>(
    x_t: &Array<T, D>,
    v: &Array<T, D>,
    alpha_bar: T,
) -> Result<(Array<T, D>, Array<T, D>)> {
    ensure!(x_t.shape() == v.shape(), "x_t/v shape mismatch");
    let a = alpha_bar.sqrt();
    let s = (T::one() - alpha_bar).sqrt();
    let eps = Zip::from(x_t).and(v).map_collect(|&x, &v| s * x + a * v);
    let x0 = Zip::from(x_t).and(v).map_collect(|&x, &v| a * x - s * v);
    Ok((eps, x0))
}

/// Converts a raw model output to ε-space.
pub fn output_to_eps<T: Scalar>(
    output: Array4<T>,
    x_t: &Array4<T>,
    alpha_bar: T,
    kind: PredictionType,
) -> Array4<T> {
    match kind {
        PredictionType::Epsilon => output,
        PredictionType::V => {
            eps_from_v_alpha(x_t, &output, alpha_bar)
                .expect("shapes checked by caller")
                .0
        }
    }
}

/// Per-sample forward process for a batch with individual timesteps.
pub fn forward_diffuse_batch<T: Scalar>(
    x0: &Array4<T>,
    ts: &[usize],
    z: &Array4<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<Array4<T>> {
    ensure!(
        ts.len() == x0.len_of(Axis(0)),
        "one timestep per sample required"
    );
    ensure!(x0.shape() == z.shape(), "noise shape mismatch");
    let mut out = Array4::zeros(x0.raw_dim());
    for (i, &t) in ts.iter().enumerate() {
        let xi = x0.index_axis(Axis(0), i).to_owned();
        let zi = z.index_axis(Axis(0), i).to_owned();
        out.index_axis_mut(Axis(0), i)
            .assign(&forward_diffuse(&xi, t, &zi, schedule)?);
    }
    Ok(out)
}

/// Regression target for a batch: `z` for ε-models, `v` for v-models.
pub fn training_target<T: Scalar>(
    kind: PredictionType,
    x0: &Array4<T>,
    z: &Array4<T>,
    ts: &[usize],
    schedule: &NoiseSchedule<T>,
) -> Result<Array4<T>> {
    match kind {
        PredictionType::Epsilon => Ok(z.clone()),
        PredictionType::V => {
            let mut out = Array4::zeros(x0.raw_dim());
            for (i, &t) in ts.iter().enumerate() {
                let xi = x0.index_axis(Axis(0), i).to_owned();
                let zi = z.index_axis(Axis(0), i).to_owned();
                out.index_axis_mut(Axis(0), i)
                    .assign(&v_from_eps(&xi, &zi, t, schedule)?);
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{build_schedule, ScheduleKind};
    use ndarray::{Array1, Array3};

    #[test]
    fn unit_alpha_is_identity() {
        let x0 = Array1::from(vec![0.3, -0.7, 1.0]);
        let z = Array1::from(vec![5.0, 6.0, 7.0]);
        assert_eq!(forward_diffuse_alpha(&x0, 1.0, &z).unwrap(), x0);
        assert_eq!(v_from_eps_alpha(&x0, &z, 1.0).unwrap(), z);
    }

    #[test]
    fn hand_evaluated_quarter_alpha() {
        let x0 = Array3::<f64>::zeros((3, 2, 2));
        let z = Array3::<f64>::ones((3, 2, 2));
        let xt = forward_diffuse_alpha(&x0, 0.25, &z).unwrap();
        assert!(xt.iter().all(|&v| (v - 0.75f64.sqrt()).abs() < 1e-15));
        let v = v_from_eps_alpha(&x0, &z, 0.25).unwrap();
        assert!(v.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn shape_mismatch_and_range_errors() {
        let s = build_schedule::<f64>(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        let a = Array1::<f64>::zeros(3);
        let b = Array1::<f64>::zeros(4);
        assert!(forward_diffuse(&a, 0, &b, &s).is_err());
        assert!(forward_diffuse(&a, 10, &a, &s).is_err());
        assert!(v_from_eps(&a, &b, 0, &s).is_err());
        assert!(eps_from_v(&a, &b, 0, &s).is_err());
    }
}
