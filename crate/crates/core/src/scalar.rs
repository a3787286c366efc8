//! Numeric type used for rewards.
//!
//! Rewards in both driving games are small integers, but the engine only
//! needs signed addition and ordering, so it is written against this trait.
//! `i64` is the default; `Ratio<i64>` and `f64` are supported for reward
//! tables that are not integral.

use std::fmt::{Debug, Display};
use std::ops::AddAssign;

use num_rational::Ratio;
use num_traits::Signed;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait RewardScalar:
    Signed + Copy + PartialOrd + AddAssign + Debug + Display + Serialize + DeserializeOwned + Send + Sync + 'static
{
    /// Converts a small integer literal into the scalar type.
    fn from_units(units: i32) -> Self;
}

impl RewardScalar for i32 {
    fn from_units(units: i32) -> Self {
        units
    }
}

impl RewardScalar for i64 {
    fn from_units(units: i32) -> Self {
        i64::from(units)
    }
}

impl RewardScalar for f64 {
    fn from_units(units: i32) -> Self {
        f64::from(units)
    }
}

impl RewardScalar for Ratio<i64> {
    fn from_units(units: i32) -> Self {
        Ratio::from_integer(i64::from(units))
    }
}

/// Smallest of a non-empty set of values under `PartialOrd`.
pub(crate) fn partial_min<R: RewardScalar>(values: &[R]) -> Option<R> {
    values.iter().copied().reduce(|a, b| if b < a { b } else { a })
}
