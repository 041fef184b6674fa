// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// A real floating-point scalar: `f32` or `f64`.
///
/// Everything numeric in this crate is generic over `Scalar`. Storage on disk
/// is always `f32`; [`Scalar::from_storage`] and [`Scalar::to_storage`] are the only
/// conversions used at that boundary.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless for `f32`, widening for `f64`.
    fn from_storage(v: f32) -> Self;
    /// Rounds to nearest for `f64`.
    fn to_storage(self) -> f32;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn half() -> Self {
        Self::from_f64_lossy(0.5)
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_storage(v: f32) -> Self {
        v
    }
    #[inline]
    fn to_storage(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_storage(v: f32) -> Self {
        f64::from(v)
    }
    #[inline]
    fn to_storage(self) -> f32 {
        self as f32
    }
}
