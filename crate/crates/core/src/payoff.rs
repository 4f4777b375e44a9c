//! Terminal functionals and their Fréchet derivative representation.
//!
//! Paths live on a uniform time grid `t₀ = 0 < … < t_N = T`. The Asian
//! average `a(x) = ∫ x dμ` uses a weight measure with uniform density on
//! `[0, T)` plus an optional atom at `T`; the mass of `[t_k, t_{k+1})` sits on
//! the left node. The derivative `λ_Φ(dt, x)` is stored as one mass per node.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Payoff of the terminal price alone.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalPayoff<T> {
    Call {
        strike: T,
    },
    Put {
        strike: T,
    },
    Digital {
        strike: T,
    },
    /// Long `k1`, short two at the midpoint, long `k2`.
    Butterfly {
        k1: T,
        k2: T,
    },
    Affine {
        slope: T,
        intercept: T,
    },
    /// Piecewise linear through the points, linearly extended from the edge segments.
    Tabulated {
        xs: Vec<T>,
        ys: Vec<T>,
    },
}

impl<T: Scalar> TerminalPayoff<T> {
    pub fn validate(&self) -> Result<()> {
        match self {
            TerminalPayoff::Butterfly { k1, k2 } if !(k2 > k1) => Err(Error::Domain("butterfly needs k1 < k2".into())),
            TerminalPayoff::Tabulated { xs, ys } => {
                if xs.len() < 2 || xs.len() != ys.len() {
                    return Err(Error::Domain("tabulated payoff needs >= 2 matching points".into()));
                }
                if xs.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::Domain("tabulated payoff abscissae not increasing".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, x: T) -> T {
        let zero = T::zero();
        match self {
            TerminalPayoff::Call { strike } => (x - *strike).max(zero),
            TerminalPayoff::Put { strike } => (*strike - x).max(zero),
            TerminalPayoff::Digital { strike } => {
                if x >= *strike {
                    T::one()
                } else {
                    zero
                }
            }
            TerminalPayoff::Butterfly { k1, k2 } => {
                let mid = (*k1 + *k2) * T::lit(0.5);
                (x - *k1).max(zero) - T::lit(2.0) * (x - mid).max(zero) + (x - *k2).max(zero)
            }
            TerminalPayoff::Affine { slope, intercept } => *slope * x + *intercept,
            TerminalPayoff::Tabulated { xs, ys } => {
                let i = segment(xs, x);
                ys[i] + (ys[i + 1] - ys[i]) * (x - xs[i]) / (xs[i + 1] - xs[i])
            }
        }
    }

    /// Right derivative. The digital's jump carries no absolutely continuous part.
    pub fn derivative(&self, x: T) -> T {
        let (zero, one) = (T::zero(), T::one());
        let step = |k: T| if x >= k { one } else { zero };
        match self {
            TerminalPayoff::Call { strike } => step(*strike),
            TerminalPayoff::Put { strike } => step(*strike) - one,
            TerminalPayoff::Digital { .. } => zero,
            TerminalPayoff::Butterfly { k1, k2 } => {
                let mid = (*k1 + *k2) * T::lit(0.5);
                step(*k1) - T::lit(2.0) * step(mid) + step(*k2)
            }
            TerminalPayoff::Affine { slope, .. } => *slope,
            TerminalPayoff::Tabulated { xs, ys } => {
                let i = segment(xs, x);
                (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])
            }
        }
    }
}

fn segment<T: Scalar>(xs: &[T], x: T) -> usize {
    xs.partition_point(|&v| v <= x).saturating_sub(1).min(xs.len() - 2)
}

/// `φ(a, x_T)` for the Asian family.
#[derive(Debug, Clone, PartialEq)]
pub enum AsianFn<T> {
    /// `φ = a`
    Average,
    /// `φ = (a − K)⁺`
    AverageCall { strike: T },
    /// `φ = g(x_T)`, independent of the average.
    Terminal(TerminalPayoff<T>),
}

impl<T: Scalar> AsianFn<T> {
    pub fn value(&self, avg: T, x: T) -> T {
        match self {
            AsianFn::Average => avg,
            AsianFn::AverageCall { strike } => (avg - *strike).max(T::zero()),
            AsianFn::Terminal(g) => g.value(x),
        }
    }

    /// `(∂ₐφ, ∂ₓφ)`, right derivatives.
    pub fn gradient(&self, avg: T, x: T) -> (T, T) {
        match self {
            AsianFn::Average => (T::one(), T::zero()),
            AsianFn::AverageCall { strike } => (if avg >= *strike { T::one() } else { T::zero() }, T::zero()),
            AsianFn::Terminal(g) => (T::zero(), g.derivative(x)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PayoffSpec<T> {
    Markovian(TerminalPayoff<T>),
    /// Average under `μ = (1 − p)·Uniform[0, T) + p·δ_T`.
    Asian {
        phi: AsianFn<T>,
        terminal_weight: T,
    },
}

impl<T: Scalar> PayoffSpec<T> {
    pub fn validate(&self) -> Result<()> {
        match self {
            PayoffSpec::Markovian(g) => g.validate(),
            PayoffSpec::Asian { phi, terminal_weight } => {
                if *terminal_weight < T::zero() || *terminal_weight > T::one() {
                    return Err(Error::Domain("terminal weight must lie in [0, 1]".into()));
                }
                if let AsianFn::Terminal(g) = phi {
                    g.validate()?;
                }
                Ok(())
            }
        }
    }

    pub fn is_markovian(&self) -> bool {
        matches!(self, PayoffSpec::Markovian(_))
    }

    /// Atom of `μ` at maturity (1 for Markovian payoffs).
    pub fn terminal_weight(&self) -> T {
        match self {
            PayoffSpec::Markovian(_) => T::one(),
            PayoffSpec::Asian { terminal_weight, .. } => *terminal_weight,
        }
    }

    /// Mass `μ([t_k, t_{k+1}))` of each of the `n_steps` intervals.
    pub fn interval_weight(&self, n_steps: usize) -> T {
        match self {
            PayoffSpec::Markovian(_) => T::zero(),
            PayoffSpec::Asian { terminal_weight, .. } => (T::one() - *terminal_weight) / T::from_usize_lossy(n_steps),
        }
    }

    /// Average `Σ_{k<N} w·x_k + p·x_N` of a path with `N + 1` nodes.
    pub fn average(&self, path: &[T]) -> T {
        let n = path.len() - 1;
        let w = self.interval_weight(n);
        let body = path[..n].iter().fold(T::zero(), |acc, &x| acc + x);
        w * body + self.terminal_weight() * path[n]
    }

    /// `Φ(x)` on a discrete path.
    pub fn evaluate(&self, path: &[T]) -> T {
        let x_t = *path.last().expect("non-empty path");
        match self {
            PayoffSpec::Markovian(g) => g.value(x_t),
            PayoffSpec::Asian { phi, .. } => phi.value(self.average(path), x_t),
        }
    }

    /// Value given the accumulated non-terminal average `m = Σ_{k<N} w·x_k` and `x_T`.
    pub fn evaluate_augmented(&self, m: T, x_t: T) -> T {
        match self {
            PayoffSpec::Markovian(g) => g.value(x_t),
            PayoffSpec::Asian { phi, terminal_weight } => phi.value(m + *terminal_weight * x_t, x_t),
        }
    }

    /// Per-node masses of `λ_Φ(dt, x)`.
    pub fn frechet_masses(&self, path: &[T]) -> Vec<T> {
        let n = path.len() - 1;
        let x_t = path[n];
        let mut out = vec![T::zero(); n + 1];
        match self {
            PayoffSpec::Markovian(g) => out[n] = g.derivative(x_t),
            PayoffSpec::Asian { phi, terminal_weight } => {
                let (da, dx) = phi.gradient(self.average(path), x_t);
                let w = self.interval_weight(n);
                for m in out[..n].iter_mut() {
                    *m = da * w;
                }
                out[n] = da * *terminal_weight + dx;
            }
        }
        out
    }

    /// Total variation of `λ_Φ(·, x)`.
    pub fn frechet_total_variation(&self, path: &[T]) -> T {
        self.frechet_masses(path).iter().fold(T::zero(), |acc, m| acc + m.abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terminal_families() {
        let c = TerminalPayoff::Call { strike: 1.0f64 };
        assert_eq!((c.value(1.5), c.derivative(1.5), c.derivative(0.5)), (0.5, 1.0, 0.0));
        let p = TerminalPayoff::Put { strike: 1.0f64 };
        assert_eq!((p.value(0.25), p.derivative(0.25)), (0.75, -1.0));
        let b = TerminalPayoff::Butterfly { k1: 0.8f64, k2: 1.2 };
        assert!((b.value(1.0) - 0.2).abs() < 1e-15);
        assert_eq!(b.value(1.3), 0.0);
        assert_eq!(b.derivative(1.1), -1.0);
        let t = TerminalPayoff::Tabulated { xs: vec![0.0f64, 1.0, 2.0], ys: vec![0.0, 0.0, 1.0] };
        assert_eq!(t.value(3.0), 2.0);
        assert_eq!(t.value(1.5), 0.5);
        assert!(TerminalPayoff::Butterfly { k1: 1.0f64, k2: 1.0 }.validate().is_err());
    }

    #[test]
    fn asian_average_and_masses() {
        let spec = PayoffSpec::Asian { phi: AsianFn::Average, terminal_weight: 0.0f64 };
        let path = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spec.average(&path) - 2.5).abs() < 1e-15);
        let m = spec.frechet_masses(&path);
        assert_eq!(m, vec![0.25, 0.25, 0.25, 0.25, 0.0]);
        assert!((spec.frechet_total_variation(&path) - 1.0).abs() < 1e-15);

        let atom = PayoffSpec::Asian { phi: AsianFn::AverageCall { strike: 1.0 }, terminal_weight: 1.0f64 };
        let call = PayoffSpec::Markovian(TerminalPayoff::Call { strike: 1.0f64 });
        assert_eq!(atom.evaluate(&path), call.evaluate(&path));
        assert_eq!(atom.frechet_masses(&path), call.frechet_masses(&path));
        assert_eq!(atom.evaluate_augmented(0.0, 1.7), call.evaluate_augmented(0.0, 1.7));
    }
}
