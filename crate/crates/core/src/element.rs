//! Storage element types.
//!
//! Tensors store either `f32` or `f64`. Every reduction in this crate
//! accumulates in `f64` regardless of the storage type, so single precision
//! only affects what is stored between stages.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::IsaError;

pub trait Element:
    Copy + Default + PartialEq + PartialOrd + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;

    fn to_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` has exactly `Self::BYTES` entries.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const PRECISION: Precision = Precision::Single;
    const BYTES: usize = 4;

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const PRECISION: Precision = Precision::Double;
    const BYTES: usize = 8;

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Working precision of stored tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

impl FromStr for Precision {
    type Err = IsaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" | "f32" | "fp32" => Ok(Precision::Single),
            "double" | "f64" | "fp64" => Ok(Precision::Double),
            other => Err(IsaError::config(format!("unknown precision '{other}'"))),
        }
    }
}

/// Dot product of two equal-length rows, accumulated in `f64`.
///
/// Four independent partial sums keep the loop vectorizable; the summation
/// order is fixed, so results do not depend on threading.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i].to_f64() * b[i].to_f64();
        acc[1] += a[i + 1].to_f64() * b[i + 1].to_f64();
        acc[2] += a[i + 2].to_f64() * b[i + 2].to_f64();
        acc[3] += a[i + 3].to_f64() * b[i + 3].to_f64();
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i].to_f64() * b[i].to_f64();
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Dot product of a stored row with an `f64` vector.
#[inline]
pub fn dot_mixed<T: Element>(a: &[T], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i].to_f64() * b[i];
        acc[1] += a[i + 1].to_f64() * b[i + 1];
        acc[2] += a[i + 2].to_f64() * b[i + 2];
        acc[3] += a[i + 3].to_f64() * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i].to_f64() * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
