//! Minimal neural-network toolkit: a gradient tape, parameter stores, Adam
//! and the handful of layers the models in this crate are built from.

mod layers;
mod params;
mod tape;

pub use layers::{timestep_features, Conv2d, Linear};
pub use params::{fit, init_uniform, Adam, AdamConfig, Bound, ParamId, ParamStore};
pub use tape::{to_cnhw, to_nchw, Gradients, Tape, Var};
