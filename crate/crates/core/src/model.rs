//! Impact model coefficients and the closed-form transforms built on them.
//!
//! The benchmark model has impacted volatility `σ(γ) = σ₀ / (1 − fγ)` on the
//! admissible set `{fγ < 1}` and `+∞` outside it. Its running cost is
//! `G(a) = (a − σ₀)² / (2f)`. The general quadratic family uses
//! `G(a) = ½γ₂a² − γ₁a + γ₀`, of which the benchmark is the special case
//! `γ₂ = 1/f`, `γ₁ = σ₀/f`, `γ₀ = σ₀²/(2f)`.
//!
//! Both families satisfy `∂ₐG(a) = a·σ⁻¹(a)`. The maximizer of
//! `½a²z − G(a)` is therefore `σ(z)`, which keeps the HJB flux and the primal
//! gamma in one place.

use crate::coefficient::Coefficient;
use crate::error::{Error, Result};
use crate::scalar::{Extended, Scalar};

/// Coefficients `(γ₀, γ₁, γ₂)` of the general quadratic running cost.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost<T> {
    pub gamma0: Coefficient<T>,
    pub gamma1: Coefficient<T>,
    pub gamma2: Coefficient<T>,
}

/// Value and maximizer of `a ↦ ½a²z − G(t, x, a)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fenchel<T> {
    pub value: T,
    pub argmax: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpactModel<T> {
    sigma0: Coefficient<T>,
    impact: Coefficient<T>,
    cost: Option<QuadraticCost<T>>,
    c_upper: T,
    c_lower: T,
    eps_margin: T,
}

/// Outcome of the `(H3)` sandwich check on a control grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthReport<T> {
    /// Largest `G − C₀(1 + a²)` (positive means violated).
    pub upper_excess: T,
    /// Largest `a²/C − C − G` (positive means violated).
    pub lower_excess: T,
}

impl<T: Scalar> GrowthReport<T> {
    pub fn holds(&self) -> bool {
        self.upper_excess <= T::zero() && self.lower_excess <= T::zero()
    }
}

impl<T: Scalar> ImpactModel<T> {
    /// Benchmark model with `G = (a − σ₀)²/(2f)`; bound constants and margin
    /// get their defaults (see [`ImpactModel::default_bounds`]).
    pub fn benchmark(sigma0: Coefficient<T>, impact: Coefficient<T>) -> Result<Self> {
        sigma0.validate("sigma0")?;
        impact.validate("f")?;
        let mut m =
            ImpactModel { sigma0, impact, cost: None, c_upper: T::zero(), c_lower: T::zero(), eps_margin: T::zero() };
        m.apply_defaults();
        Ok(m)
    }

    /// Constant-coefficient benchmark model.
    pub fn constant(sigma0: T, f: T) -> Result<Self> {
        Self::benchmark(Coefficient::Constant(sigma0), Coefficient::Constant(f))
    }

    /// General quadratic cost. `sigma0` and `impact` are kept for domain sizing only.
    pub fn quadratic(sigma0: Coefficient<T>, impact: Coefficient<T>, cost: QuadraticCost<T>) -> Result<Self> {
        sigma0.validate("sigma0")?;
        impact.validate("f")?;
        cost.gamma2.validate("gamma2")?;
        cost.gamma1.validate("gamma1")?;
        let (g0_lo, _) = cost.gamma0.bounds();
        if g0_lo < T::zero() {
            return Err(Error::InvalidModel("gamma0 must be non-negative".into()));
        }
        let mut m = ImpactModel {
            sigma0,
            impact,
            cost: Some(cost),
            c_upper: T::zero(),
            c_lower: T::zero(),
            eps_margin: T::zero(),
        };
        m.apply_defaults();
        Ok(m)
    }

    /// Overrides `(C, C₀)` of the growth sandwich `a²/C − C ≤ G ≤ C₀(1 + a²)`.
    pub fn with_bounds(mut self, c_lower: T, c_upper: T) -> Result<Self> {
        if !(c_lower > T::zero()) || !(c_upper > T::zero()) {
            return Err(Error::InvalidModel("growth constants must be positive".into()));
        }
        self.c_lower = c_lower;
        self.c_upper = c_upper;
        Ok(self)
    }

    pub fn with_eps_margin(mut self, eps: T) -> Result<Self> {
        let (g2_lo, _) = self.gamma2_bounds();
        if !(eps > T::zero()) || eps * T::lit(2.0) >= g2_lo {
            return Err(Error::InvalidModel(format!("eps_margin must lie in (0, inf gamma2 / 2), got {eps}")));
        }
        self.eps_margin = eps;
        Ok(self)
    }

    fn apply_defaults(&mut self) {
        let (c_lower, c_upper) = self.default_bounds();
        self.c_lower = c_lower;
        self.c_upper = c_upper;
        let (g2_lo, _) = self.gamma2_bounds();
        self.eps_margin = T::lit(1e-3) * g2_lo;
    }

    /// Smallest constants for which the growth sandwich holds for every `a`.
    ///
    /// Upper: `½γ₂a² − γ₁a + γ₀ ≤ ½(γ₂ + γ₁)a² + ½γ₁ + γ₀`. For the benchmark this is
    /// sharpened to `sup_a (a − σ₀)²/(1 + a²) = 1 + σ₀²`.
    /// Lower: `γ₁|a| ≤ ¼γ₂a² + γ₁²/γ₂` gives `G ≥ ¼γ₂a² − γ₁²/γ₂`.
    pub fn default_bounds(&self) -> (T, T) {
        let two = T::lit(2.0);
        let four = T::lit(4.0);
        let (g2_lo, g2_hi) = self.gamma2_bounds();
        let g1_hi = self.gamma1_bounds().1;
        let c_upper = match &self.cost {
            None => {
                let s_hi = self.sigma0.bounds().1;
                let f_lo = self.impact.bounds().0;
                (T::one() + s_hi * s_hi) / (two * f_lo)
            }
            Some(c) => {
                let (_, g0_hi) = c.gamma0.bounds();
                ((g2_hi + g1_hi) / two).max(g1_hi / two + g0_hi)
            }
        };
        let c_lower = (four / g2_lo).max(g1_hi * g1_hi / g2_lo);
        (c_lower, c_upper)
    }

    pub fn c_upper(&self) -> T {
        self.c_upper
    }

    pub fn c_lower(&self) -> T {
        self.c_lower
    }

    pub fn eps_margin(&self) -> T {
        self.eps_margin
    }

    pub fn is_benchmark(&self) -> bool {
        self.cost.is_none()
    }

    /// True when every coefficient is constant (then `λ_G ≡ 0`).
    pub fn has_constant_coefficients(&self) -> bool {
        match &self.cost {
            None => self.sigma0.is_constant() && self.impact.is_constant(),
            Some(c) => c.gamma0.is_constant() && c.gamma1.is_constant() && c.gamma2.is_constant(),
        }
    }

    pub fn sigma0(&self, _t: T, x: T) -> T {
        self.sigma0.value(x)
    }

    pub fn impact(&self, x: T) -> T {
        self.impact.value(x)
    }

    pub fn sigma0_bounds(&self) -> (T, T) {
        self.sigma0.bounds()
    }

    pub fn impact_bounds(&self) -> (T, T) {
        self.impact.bounds()
    }

    pub fn cost(&self) -> Option<&QuadraticCost<T>> {
        self.cost.as_ref()
    }

    /// Constraint level on the curvature: `1/f` for the benchmark, `γ₂` in general.
    pub fn gamma2(&self, _t: T, x: T) -> T {
        match &self.cost {
            None => T::one() / self.impact.value(x),
            Some(c) => c.gamma2.value(x),
        }
    }

    pub fn gamma1(&self, t: T, x: T) -> T {
        match &self.cost {
            None => self.sigma0(t, x) / self.impact.value(x),
            Some(c) => c.gamma1.value(x),
        }
    }

    pub fn gamma0(&self, t: T, x: T) -> T {
        match &self.cost {
            None => {
                let s = self.sigma0(t, x);
                s * s / (T::lit(2.0) * self.impact.value(x))
            }
            Some(c) => c.gamma0.value(x),
        }
    }

    pub fn gamma2_bounds(&self) -> (T, T) {
        match &self.cost {
            None => {
                let (f_lo, f_hi) = self.impact.bounds();
                (T::one() / f_hi, T::one() / f_lo)
            }
            Some(c) => c.gamma2.bounds(),
        }
    }

    fn gamma1_bounds(&self) -> (T, T) {
        match &self.cost {
            None => {
                let (s_lo, s_hi) = self.sigma0.bounds();
                let (f_lo, f_hi) = self.impact.bounds();
                (s_lo / f_hi, s_hi / f_lo)
            }
            Some(c) => c.gamma1.bounds(),
        }
    }

    /// Unconstrained volatility `σ(0)`: `σ₀` for the benchmark, `γ₁/γ₂` in general.
    pub fn base_volatility(&self, t: T, x: T) -> T {
        match &self.cost {
            None => self.sigma0(t, x),
            Some(_) => self.gamma1(t, x) / self.gamma2(t, x),
        }
    }

    /// Largest unconstrained volatility over the state space.
    pub fn sup_base_volatility(&self) -> T {
        match &self.cost {
            None => self.sigma0.bounds().1,
            Some(_) => self.gamma1_bounds().1 / self.gamma2_bounds().0,
        }
    }

    /// Impacted volatility for a portfolio gamma; `+∞` off the admissible set.
    pub fn sigma_impacted(&self, t: T, x: T, gamma: T) -> Extended<T> {
        match &self.cost {
            None => {
                let f = self.impact.value(x);
                let denom = T::one() - f * gamma;
                if denom <= T::zero() {
                    Extended::PosInf
                } else {
                    Extended::Finite(self.sigma0(t, x) / denom)
                }
            }
            Some(_) => {
                let g2 = self.gamma2(t, x);
                if gamma >= g2 {
                    Extended::PosInf
                } else {
                    Extended::Finite(self.gamma1(t, x) / (g2 - gamma))
                }
            }
        }
    }

    /// Gamma producing volatility `a`; `−∞` at `a = 0`.
    pub fn sigma_inverse(&self, t: T, x: T, a: T) -> Result<Extended<T>> {
        if a < T::zero() || a.is_nan() {
            return Err(Error::Domain(format!("sigma_inverse needs a >= 0, got {a}")));
        }
        if a.is_zero() {
            return Ok(Extended::NegInf);
        }
        Ok(Extended::Finite(match &self.cost {
            None => {
                let f = self.impact.value(x);
                (a - self.sigma0(t, x)) / (f * a)
            }
            Some(_) => self.gamma2(t, x) - self.gamma1(t, x) / a,
        }))
    }

    /// Running cost `G(t, x, a)`.
    pub fn running_cost(&self, t: T, x: T, a: T) -> T {
        match &self.cost {
            None => {
                let d = a - self.sigma0(t, x);
                d * d / (T::lit(2.0) * self.impact.value(x))
            }
            Some(c) => T::lit(0.5) * c.gamma2.value(x) * a * a - c.gamma1.value(x) * a + c.gamma0.value(x),
        }
    }

    /// Marginal cost `∂ₐG(t, x, a)`.
    pub fn dg_da(&self, t: T, x: T, a: T) -> Result<T> {
        if !(a > T::zero()) {
            return Err(Error::Domain(format!("dG/da needs a > 0, got {a}")));
        }
        Ok(match &self.cost {
            None => (a - self.sigma0(t, x)) / self.impact.value(x),
            Some(c) => c.gamma2.value(x) * a - c.gamma1.value(x),
        })
    }

    /// State sensitivity `∂ₓG(t, x, a)`; zero for constant coefficients.
    pub fn dg_dx(&self, t: T, x: T, a: T) -> T {
        match &self.cost {
            None => {
                let s = self.sigma0(t, x);
                let ds = self.sigma0.derivative(x);
                let f = self.impact.value(x);
                let df = self.impact.derivative(x);
                let d = a - s;
                -d * ds / f - d * d * df / (T::lit(2.0) * f * f)
            }
            Some(c) => {
                T::lit(0.5) * c.gamma2.derivative(x) * a * a - c.gamma1.derivative(x) * a + c.gamma0.derivative(x)
            }
        }
    }

    /// Cost in gamma units, `F(t, x, γ) = G(t, x, σ(γ))`; `+∞` off the admissible set.
    pub fn impact_cost(&self, t: T, x: T, gamma: T) -> Extended<T> {
        match self.sigma_impacted(t, x, gamma) {
            Extended::Finite(a) => Extended::Finite(self.running_cost(t, x, a)),
            other => other,
        }
    }

    /// `sup_a {½a²z − G(t, x, a)}` with its maximizer. Needs `z < γ₂(t, x)`.
    pub fn fenchel(&self, t: T, x: T, z: T) -> Result<Fenchel<T>> {
        let g2 = self.gamma2(t, x);
        if !(z < g2) {
            return Err(Error::Degenerate { z: z.as_f64(), limit: g2.as_f64() });
        }
        Ok(self.fenchel_unchecked(t, x, z))
    }

    fn fenchel_unchecked(&self, t: T, x: T, z: T) -> Fenchel<T> {
        let two = T::lit(2.0);
        match &self.cost {
            None => {
                let s = self.sigma0(t, x);
                let f = self.impact.value(x);
                let denom = T::one() - f * z;
                Fenchel { value: s * s * z / (two * denom), argmax: s / denom }
            }
            Some(c) => {
                let g1 = c.gamma1.value(x);
                let gap = c.gamma2.value(x) - z;
                Fenchel { value: g1 * g1 / (two * gap) - c.gamma0.value(x), argmax: g1 / gap }
            }
        }
    }

    /// Clamps `z` to `γ₂ − ε_margin` before evaluating the transform.
    /// The flag reports whether the clamp was active.
    pub fn fenchel_clamped(&self, t: T, x: T, z: T) -> (Fenchel<T>, bool) {
        let cap = self.gamma2(t, x) - self.eps_margin;
        if z > cap {
            (self.fenchel_unchecked(t, x, cap), true)
        } else {
            (self.fenchel_unchecked(t, x, z), false)
        }
    }

    /// Largest optimal volatility reachable when curvature is clamped at `γ₂ − ε_margin`.
    pub fn clamped_argmax_bound(&self) -> T {
        self.gamma1_bounds().1 / self.eps_margin
    }

    /// Evaluates the `(H3)` sandwich over the product of `xs` and `controls` at time `t`.
    pub fn check_growth(&self, t: T, xs: &[T], controls: &[T]) -> GrowthReport<T> {
        let mut upper = T::neg_infinity();
        let mut lower = T::neg_infinity();
        for &x in xs {
            for &a in controls {
                let g = self.running_cost(t, x, a);
                upper = upper.max(g - self.c_upper * (T::one() + a * a));
                lower = lower.max(a * a / self.c_lower - self.c_lower - g);
            }
        }
        GrowthReport { upper_excess: upper, lower_excess: lower }
    }
}
