use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use super::params::{init_uniform, Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            init_uniform(&[c_out, c_in, k, k], c_in * k * k, rng),
        );
        let bias = store.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[c_out])));
        Conv2d {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    /// 1×1 convolution with every parameter exactly zero.
    pub fn zeros<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            ArrayD::zeros(IxDyn(&[c_out, c_in, 1, 1])),
        );
        let bias = store.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[c_out])));
        Conv2d {
            weight,
            bias,
            stride: 1,
            pad: 0,
        }
    }

    /// Looks up an existing layer by name.
    pub fn find<T: Scalar>(store: &ParamStore<T>, name: &str, stride: usize) -> Option<Self> {
        let weight = store.find(&format!("{name}.weight"))?;
        let bias = store.find(&format!("{name}.bias"))?;
        let k = store.get(weight).shape()[2];
        Some(Conv2d {
            weight,
            bias,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.conv2d(
            x,
            p.var(self.weight),
            p.var(self.bias),
            self.stride,
            self.pad,
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            init_uniform(&[d_out, d_in], d_in, rng),
        );
        let bias = store.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[d_out])));
        Linear { weight, bias }
    }

    pub fn find<T: Scalar>(store: &ParamStore<T>, name: &str) -> Option<Self> {
        Some(Linear {
            weight: store.find(&format!("{name}.weight"))?,
            bias: store.find(&format!("{name}.bias"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

/// Sinusoidal timestep features, `[n, dim]`.
pub fn timestep_features<T: Scalar>(ts: &[usize], dim: usize) -> ArrayD<T> {
    let half = dim / 2;
    let mut out = ArrayD::<T>::zeros(IxDyn(&[ts.len(), dim]));
    for (n, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            out[[n, i]] = T::lit(a.sin());
            out[[n, half + i]] = T::lit(a.cos());
        }
    }
    out
}
