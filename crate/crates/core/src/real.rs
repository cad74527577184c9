//! Floating-point abstraction so the whole pipeline runs in either single or
//! double precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use realfft::FftNum;
use serde::{Deserialize, Serialize};

/// On-disk / runtime precision tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Reads `SVOC_PRECISION` (`f32` / `f64`); defaults to double precision.
    pub fn from_env() -> Result<Self, String> {
        match std::env::var("SVOC_PRECISION") {
            Err(_) => Ok(Precision::F64),
            Ok(v) => v.parse(),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?}, expected f32 or f64")),
        }
    }
}

pub trait Real:
    Float
    + FloatConst
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + FftNum
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    fn erf(self) -> Self;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn to_le_bytes_vec(self, out: &mut Vec<u8>);

    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    fn lit(x: f64) -> Self {
        x as f32
    }

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    fn lit(x: f64) -> Self {
        x
    }

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}
