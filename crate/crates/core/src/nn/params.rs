use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use crate::scalar::Scalar;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<ArrayD<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<ArrayD<T>>) -> Self {
        assert_eq!(names.len(), tensors.len());
        ParamStore { names, tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value.as_standard_layout().into_owned());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[ArrayD<T>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Puts every tensor on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.iter() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Tape handles for every tensor of a store, in store order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn grads<T: Scalar>(&self, g: &Gradients<T>, store: &ParamStore<T>) -> Vec<ArrayD<T>> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| g.get_or_zeros(v, t))
            .collect()
    }
}

/// Uniform fan-in initialisation, bound `1/sqrt(fan_in)`.
pub fn init_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(rng.random_range(-bound..bound)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
pub struct Adam<T: Scalar> {
    config: AdamConfig,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    step: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .tensors()
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect()
        };
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[ArrayD<T>]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - b1.powi(self.step);
        let bc2 = T::one() - b2.powi(self.step);
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for (i, g) in grads.iter().enumerate() {
            let p = store.get_mut(ParamId(i));
            ndarray::Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p = *p - lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

/// Runs `steps` Adam updates. `step_fn` receives the current parameters and
/// the step index and returns the loss with one gradient per tensor.
pub fn fit<T: Scalar, E>(
    store: &mut ParamStore<T>,
    config: AdamConfig,
    steps: usize,
    mut step_fn: impl FnMut(&ParamStore<T>, usize) -> Result<(T, Vec<ArrayD<T>>), E>,
) -> Result<Vec<f64>, E> {
    let mut opt = Adam::new(store, config);
    let mut losses = Vec::with_capacity(steps);
    for i in 0..steps {
        let (loss, grads) = step_fn(store, i)?;
        opt.step(store, &grads);
        losses.push(loss.f64());
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("x", ArrayD::from_elem(IxDyn(&[3]), 5.0));
        let mut opt = Adam::new(
            &store,
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
        );
        for _ in 0..500 {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, true);
            let target = ArrayD::from_elem(IxDyn(&[3]), 1.5);
            let loss = tape.mse(b.var(id), &target, None);
            let g = tape.backward(loss);
            let grads = b.grads(&g, &store);
            opt.step(&mut store, &grads);
        }
        for &v in store.get(id).iter() {
            assert!((v - 1.5).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn checksum_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::<f32>::new();
        a.insert("w", init_uniform(&[2, 2], 2, &mut rng));
        let b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        a.get_mut(ParamId(0))[[0, 0]] += 1.0;
        assert_ne!(a.checksum(), b.checksum());
    }
}
