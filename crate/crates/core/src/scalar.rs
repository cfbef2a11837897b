//! Floating point scalars the numerical core is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::{Deserialize, Serialize};

/// On-disk element type of a parameter payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Gathers the traits the core needs from a floating point type: f32 or f64.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    /// Converts an f64 literal. Never fails for f32/f64.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }

    fn write_le(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Decodes one little-endian element of `dtype` into `T`.
pub(crate) fn read_le<T: Scalar>(bytes: &[u8], dtype: Dtype) -> T {
    match dtype {
        Dtype::F32 => T::lit(f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64),
        Dtype::F64 => T::lit(f64::from_le_bytes(bytes[..8].try_into().unwrap())),
    }
}
