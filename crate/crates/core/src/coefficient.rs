//! Named coefficient families for the state-dependent model maps.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A bounded, strictly positive map of the price.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient<T> {
    Constant(T),
    /// `clamp(intercept + slope * x, floor, cap)`
    Affine {
        intercept: T,
        slope: T,
        floor: T,
        cap: T,
    },
    /// `clamp(scale * |x|^beta, floor, cap)`
    CevClamped {
        scale: T,
        beta: T,
        floor: T,
        cap: T,
    },
    /// Piecewise linear through `(xs[i], ys[i])`, flat outside.
    Tabulated {
        xs: Vec<T>,
        ys: Vec<T>,
    },
}

impl<T: Scalar> Coefficient<T> {
    pub fn constant(v: T) -> Self {
        Coefficient::Constant(v)
    }

    /// Checks positivity and boundedness; returns `(inf, sup)` over ℝ.
    pub fn validate(&self, name: &str) -> Result<(T, T)> {
        let (lo, hi) = self.bounds();
        if !(lo > T::zero()) || !hi.is_finite() || !lo.is_finite() {
            return Err(Error::InvalidModel(format!(
                "{name} must be bounded and bounded away from zero (inf = {lo}, sup = {hi})"
            )));
        }
        if let Coefficient::Tabulated { xs, ys } = self {
            if xs.len() != ys.len() || xs.is_empty() {
                return Err(Error::InvalidModel(format!("{name}: tabulated sizes differ or empty")));
            }
            if xs.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidModel(format!("{name}: tabulated abscissae not increasing")));
            }
        }
        match self {
            Coefficient::Affine { floor, cap, .. } | Coefficient::CevClamped { floor, cap, .. } if floor > cap => {
                Err(Error::InvalidModel(format!("{name}: floor above cap")))
            }
            _ => Ok((lo, hi)),
        }
    }

    /// Global `(inf, sup)` of the map.
    pub fn bounds(&self) -> (T, T) {
        match self {
            Coefficient::Constant(v) => (*v, *v),
            Coefficient::Affine { slope, floor, cap, intercept } => {
                if slope.is_zero() {
                    let v = clamp(*intercept, *floor, *cap);
                    (v, v)
                } else {
                    (*floor, *cap)
                }
            }
            Coefficient::CevClamped { scale, beta, floor, cap } => {
                if beta.is_zero() {
                    let v = clamp(*scale, *floor, *cap);
                    (v, v)
                } else {
                    (*floor, *cap)
                }
            }
            Coefficient::Tabulated { ys, .. } => {
                ys.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &y| (lo.min(y), hi.max(y)))
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        let (lo, hi) = self.bounds();
        lo == hi
    }

    pub fn value(&self, x: T) -> T {
        match self {
            Coefficient::Constant(v) => *v,
            Coefficient::Affine { intercept, slope, floor, cap } => clamp(*intercept + *slope * x, *floor, *cap),
            Coefficient::CevClamped { scale, beta, floor, cap } => clamp(*scale * x.abs().powf(*beta), *floor, *cap),
            Coefficient::Tabulated { xs, ys } => {
                let n = xs.len();
                if x <= xs[0] {
                    return ys[0];
                }
                if x >= xs[n - 1] {
                    return ys[n - 1];
                }
                let i = upper_segment(xs, x);
                let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
                ys[i] + w * (ys[i + 1] - ys[i])
            }
        }
    }

    /// Derivative in `x` (one-sided from the right at kinks, zero where clamped).
    pub fn derivative(&self, x: T) -> T {
        match self {
            Coefficient::Constant(_) => T::zero(),
            Coefficient::Affine { intercept, slope, floor, cap } => {
                let raw = *intercept + *slope * x;
                if raw <= *floor || raw >= *cap {
                    T::zero()
                } else {
                    *slope
                }
            }
            Coefficient::CevClamped { scale, beta, floor, cap } => {
                let raw = *scale * x.abs().powf(*beta);
                if raw <= *floor || raw >= *cap || x.is_zero() {
                    T::zero()
                } else {
                    *scale * *beta * x.abs().powf(*beta - T::one()) * x.signum()
                }
            }
            Coefficient::Tabulated { xs, ys } => {
                let n = xs.len();
                if n < 2 || x < xs[0] || x >= xs[n - 1] {
                    return T::zero();
                }
                let i = upper_segment(xs, x);
                (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])
            }
        }
    }
}

fn clamp<T: Scalar>(v: T, lo: T, hi: T) -> T {
    v.max(lo).min(hi)
}

/// Index `i` with `xs[i] <= x < xs[i+1]`, assuming `xs[0] <= x < xs[n-1]`.
fn upper_segment<T: Scalar>(xs: &[T], x: T) -> usize {
    let p = xs.partition_point(|&v| v <= x);
    p.saturating_sub(1).min(xs.len() - 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_evaluate() {
        let c = Coefficient::Constant(0.2f64);
        assert_eq!(c.value(5.0), 0.2);
        assert_eq!(c.derivative(5.0), 0.0);

        let a = Coefficient::Affine { intercept: 0.1f64, slope: 0.05, floor: 0.05, cap: 0.3 };
        assert!((a.value(1.0) - 0.15).abs() < 1e-15);
        assert_eq!(a.value(-10.0), 0.05);
        assert_eq!(a.value(10.0), 0.3);
        assert_eq!(a.derivative(1.0), 0.05);
        assert_eq!(a.derivative(10.0), 0.0);

        let cev = Coefficient::CevClamped { scale: 0.2f64, beta: 0.5, floor: 0.05, cap: 0.5 };
        assert!((cev.value(4.0) - 0.4).abs() < 1e-15);
        assert!((cev.derivative(4.0) - 0.05).abs() < 1e-15);

        let t = Coefficient::Tabulated { xs: vec![0.0, 1.0, 2.0], ys: vec![1.0, 3.0, 2.0] };
        assert_eq!(t.value(0.5), 2.0);
        assert_eq!(t.value(-1.0), 1.0);
        assert_eq!(t.value(3.0), 2.0);
        assert_eq!(t.derivative(1.5), -1.0);
        assert_eq!(t.bounds(), (1.0, 3.0));
    }

    #[test]
    fn validation_rejects_non_positive() {
        assert!(Coefficient::Constant(0.0f64).validate("f").is_err());
        assert!(Coefficient::Affine { intercept: 0.1f64, slope: 1.0, floor: -0.1, cap: 1.0 }.validate("f").is_err());
        assert!(Coefficient::Tabulated { xs: vec![0.0f64, 0.0], ys: vec![1.0, 1.0] }.validate("f").is_err());
        assert_eq!(Coefficient::Constant(0.1f32).validate("f").unwrap(), (0.1, 0.1));
    }
}
