//! Multiply-add tallies.
//!
//! Conventions, with `nq` query rows and `nk` key rows in a block pair and
//! head dim `D`:
//!
//! * exact pair: `2*nq*nk*D` for the scores plus `2*nq*nk*D` for `P V`
//! * Taylor pair: `2*nq*D` for the mean-key scores plus `2*nq*D` for the mean values
//! * dense equivalent: `4*N*S*D` for `N` queries against `S` keys

use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::Serialize;

use crate::error::IsaError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlopCount {
    pub exact_mas: u64,
    pub taylor_mas: u64,
    pub overhead_mas: u64,
    pub dense_equivalent_mas: u64,
}

pub fn exact_pair_mas(nq: usize, nk: usize, d: usize) -> u64 {
    4 * (nq * nk * d) as u64
}

pub fn taylor_pair_mas(nq: usize, d: usize) -> u64 {
    4 * (nq * d) as u64
}

pub fn dense_mas(nq: usize, nk: usize, d: usize) -> u64 {
    4 * (nq * nk * d) as u64
}

impl FlopCount {
    /// Exact plus Taylor work, overhead excluded.
    pub fn kernel_mas(&self) -> u64 {
        self.exact_mas + self.taylor_mas
    }

    pub fn total_mas(&self) -> u64 {
        self.kernel_mas() + self.overhead_mas
    }

    /// Kernel work relative to dense attention.
    pub fn kernel_ratio(&self) -> f64 {
        self.kernel_mas() as f64 / self.dense_equivalent_mas as f64
    }

    pub fn taylor_share(&self) -> f64 {
        self.taylor_mas as f64 / self.kernel_mas() as f64
    }
}

impl Add for FlopCount {
    type Output = FlopCount;

    fn add(mut self, rhs: FlopCount) -> FlopCount {
        self += rhs;
        self
    }
}

impl AddAssign for FlopCount {
    fn add_assign(&mut self, rhs: FlopCount) {
        self.exact_mas += rhs.exact_mas;
        self.taylor_mas += rhs.taylor_mas;
        self.overhead_mas += rhs.overhead_mas;
        self.dense_equivalent_mas += rhs.dense_equivalent_mas;
    }
}

impl std::iter::Sum for FlopCount {
    fn sum<I: Iterator<Item = FlopCount>>(iter: I) -> Self {
        iter.fold(FlopCount::default(), Add::add)
    }
}

/// `key=value` lines.
impl fmt::Display for FlopCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "exact_mas={}", self.exact_mas)?;
        writeln!(f, "taylor_mas={}", self.taylor_mas)?;
        writeln!(f, "overhead_mas={}", self.overhead_mas)?;
        writeln!(f, "dense_equivalent_mas={}", self.dense_equivalent_mas)
    }
}

impl FromStr for FlopCount {
    type Err = IsaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = FlopCount::default();
        let mut seen = [false; 4];
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| IsaError::Validation(format!("expected key=value, got '{line}'")))?;
            let value: u64 = value
                .trim()
                .parse()
                .map_err(|_| IsaError::Validation(format!("bad count in '{line}'")))?;
            let slot = match key.trim() {
                "exact_mas" => 0,
                "taylor_mas" => 1,
                "overhead_mas" => 2,
                "dense_equivalent_mas" => 3,
                other => return Err(IsaError::Validation(format!("unknown key '{other}'"))),
            };
            seen[slot] = true;
            *[&mut out.exact_mas, &mut out.taylor_mas, &mut out.overhead_mas, &mut out.dense_equivalent_mas][slot] =
                value;
        }
        if seen.iter().any(|s| !s) {
            return Err(IsaError::Validation("flop record is missing keys".into()));
        }
        Ok(out)
    }
}
