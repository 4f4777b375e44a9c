//! Uniform one-dimensional grids and linear interpolation on them.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct UniformGrid<T> {
    lo: T,
    hi: T,
    n: usize,
    step: T,
}

impl<T: Scalar> UniformGrid<T> {
    /// `n` nodes spanning `[lo, hi]` inclusive.
    pub fn new(lo: T, hi: T, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain(format!("grid needs at least 2 nodes, got {n}")));
        }
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Domain(format!("grid bounds [{lo}, {hi}] are not an interval")));
        }
        let step = (hi - lo) / T::from_usize_lossy(n - 1);
        Ok(UniformGrid { lo, hi, n, step })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lo(&self) -> T {
        self.lo
    }

    pub fn hi(&self) -> T {
        self.hi
    }

    pub fn step(&self) -> T {
        self.step
    }

    #[inline]
    pub fn node(&self, i: usize) -> T {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + T::from_usize_lossy(i) * self.step
        }
    }

    pub fn nodes(&self) -> Vec<T> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    pub fn contains(&self, x: T) -> bool {
        x >= self.lo && x <= self.hi
    }

    /// Cell index `i` and weight `w` with `x = (1 − w)·xᵢ + w·xᵢ₊₁`.
    /// Outside the grid `w` leaves `[0, 1]` (linear extrapolation from the edge cell).
    #[inline]
    pub fn locate(&self, x: T) -> (usize, T) {
        let s = (x - self.lo) / self.step;
        let last = self.n - 2;
        let i = if s <= T::zero() { 0 } else { s.floor().to_usize().unwrap_or(last).min(last) };
        (i, s - T::from_usize_lossy(i))
    }

    /// Linear interpolation of nodal `values`, extrapolating linearly outside.
    #[inline]
    pub fn interpolate(&self, values: &[T], x: T) -> T {
        debug_assert_eq!(values.len(), self.n);
        let (i, w) = self.locate(x);
        values[i] + w * (values[i + 1] - values[i])
    }
}

/// Second difference `(u[i+1] − 2u[i] + u[i−1]) / h²` at interior nodes; zero at the ends
/// (linear extrapolation ghost nodes).
pub fn second_difference<T: Scalar>(u: &[T], h: T, out: &mut [T]) {
    let n = u.len();
    let inv = T::one() / (h * h);
    out[0] = T::zero();
    out[n - 1] = T::zero();
    for i in 1..n - 1 {
        out[i] = (u[i + 1] - T::lit(2.0) * u[i] + u[i - 1]) * inv;
    }
}

/// Central first difference inside, one-sided at the ends.
pub fn first_difference<T: Scalar>(u: &[T], h: T, out: &mut [T]) {
    let n = u.len();
    out[0] = (u[1] - u[0]) / h;
    out[n - 1] = (u[n - 1] - u[n - 2]) / h;
    let inv = T::one() / (T::lit(2.0) * h);
    for i in 1..n - 1 {
        out[i] = (u[i + 1] - u[i - 1]) * inv;
    }
}
