//! Path functionals on a uniform time grid: Fréchet derivatives of payoffs, the
//! compensating process `A`, discrete vertical derivatives and Itô residuals.
//!
//! A discrete path is `x_0, …, x_N` with step `Δt`. A functional evaluated at
//! step `k` only reads `x_0, …, x_k`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ImpactModel;
use crate::payoff::{AsianFn, PayoffSpec, TerminalPayoff};
use crate::scalar::Scalar;

/// `∫ h(u) λ_Φ(du, x)` on the grid of `path`.
pub fn eval_frechet<T: Scalar>(payoff: &PayoffSpec<T>, path: &[T], h: &[T]) -> Result<T> {
    if path.len() != h.len() || path.len() < 2 {
        return Err(Error::Domain(format!("perturbation has {} nodes, path has {}", h.len(), path.len())));
    }
    let masses = payoff.frechet_masses(path);
    Ok(masses.iter().zip(h).fold(T::zero(), |acc, (m, h)| acc + *m * *h))
}

fn terminal_lipschitz<T: Scalar>(g: &TerminalPayoff<T>) -> T {
    match g {
        TerminalPayoff::Call { .. } | TerminalPayoff::Put { .. } | TerminalPayoff::Butterfly { .. } => T::one(),
        TerminalPayoff::Digital { .. } => T::zero(),
        TerminalPayoff::Affine { slope, .. } => slope.abs(),
        TerminalPayoff::Tabulated { xs, ys } => {
            xs.windows(2).zip(ys.windows(2)).fold(T::zero(), |m, (x, y)| m.max(((y[1] - y[0]) / (x[1] - x[0])).abs()))
        }
    }
}

/// Uniform bound on the total variation of `λ_Φ(·, x)` over paths.
///
/// Digital payoffs carry no mass away from the strike and get 0.
pub fn frechet_bound<T: Scalar>(payoff: &PayoffSpec<T>) -> T {
    match payoff {
        PayoffSpec::Markovian(g) => terminal_lipschitz(g),
        PayoffSpec::Asian { phi, .. } => match phi {
            AsianFn::Average | AsianFn::AverageCall { .. } => T::one(),
            AsianFn::Terminal(g) => terminal_lipschitz(g),
        },
    }
}

/// Representation of the cost derivative `λ_G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostFrechet {
    /// Constant coefficients: the cost does not depend on the path.
    Zero,
    /// A single atom at the current time with mass `∂ₓG(s, x_s, a)`.
    Diagonal,
}

impl CostFrechet {
    pub fn for_model<T: Scalar>(model: &ImpactModel<T>) -> Self {
        if model.has_constant_coefficients() {
            CostFrechet::Zero
        } else {
            CostFrechet::Diagonal
        }
    }
}

/// `A_k = Σ_{j<k} (λ_Φ mass_j − ∂ₓG(t_j, x_j, α_j)Δt)`, plus the terminal atom at `k = N`.
pub fn compute_a<T: Scalar>(
    payoff: &PayoffSpec<T>,
    cost: CostFrechet,
    model: &ImpactModel<T>,
    path: &[T],
    controls: &[T],
    dt: T,
) -> Result<Vec<T>> {
    let n = path.len().saturating_sub(1);
    if n == 0 || controls.len() != n {
        return Err(Error::Domain(format!("{} controls for a path of {} nodes", controls.len(), path.len())));
    }
    let masses = payoff.frechet_masses(path);
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = T::zero();
    out.push(acc);
    for j in 0..n {
        acc = acc + masses[j];
        if cost == CostFrechet::Diagonal {
            let t = T::from_usize_lossy(j) * dt;
            acc = acc - model.dg_dx(t, path[j], controls[j]) * dt;
        }
        out.push(acc);
    }
    out[n] = acc + masses[n];
    Ok(out)
}

/// Functional of a path prefix: `value(k, path)` reads `path[..=k]`.
pub trait PathFunctional<T: Scalar>: Sync {
    fn value(&self, k: usize, path: &[T]) -> T;

    /// Vertical derivative at step `k`, by default a central bump of size `1e-4`.
    fn vertical(&self, k: usize, path: &[T]) -> T {
        dupire_vertical(self, k, path, T::lit(1e-4))
    }
}

/// `[F(x ⊕_k ε) − F(x ⊕_k (−ε))] / 2ε` where `x ⊕_k y` adds `y` to nodes `k..`.
pub fn dupire_vertical<T: Scalar, F: PathFunctional<T> + ?Sized>(f: &F, k: usize, path: &[T], eps: T) -> T {
    let mut up = path.to_vec();
    let mut dn = path.to_vec();
    for j in k..path.len() {
        up[j] = up[j] + eps;
        dn[j] = dn[j] - eps;
    }
    (f.value(k, &up) - f.value(k, &dn)) / (eps + eps)
}

/// Smooth correction for functionals that are concave only up to `R` and a time map `ℓ`.
pub struct Correction<'a, T> {
    /// `∇²ₓR(t_k, x)`
    pub r_hessian: &'a (dyn Fn(usize, &[T]) -> T + Sync),
    /// `ℓ(t_k)`, allowed to read the path prefix.
    pub ell: &'a (dyn Fn(usize, &[T]) -> T + Sync),
}

/// `K_k = F(t_k) − F(t_0) − Σ_{j<k} ∇ₓF(t_j)·ΔZ_j − [Σ_{j<k} ½∇²ₓR(t_j)(ΔZ_j)² + ℓ(t_k) − ℓ(t_0)]`.
pub fn ito_residual<T: Scalar, F: PathFunctional<T> + ?Sized>(
    f: &F,
    correction: Option<&Correction<'_, T>>,
    z: &[T],
) -> Vec<T> {
    let n = z.len() - 1;
    let f0 = f.value(0, z);
    let ell0 = correction.map(|c| (c.ell)(0, z));
    let mut out = Vec::with_capacity(n + 1);
    out.push(T::zero());
    let mut integral = T::zero();
    let mut qv = T::zero();
    let half = T::lit(0.5);
    for j in 0..n {
        let dz = z[j + 1] - z[j];
        integral = integral + f.vertical(j, z) * dz;
        if let Some(c) = correction {
            qv = qv + half * (c.r_hessian)(j, z) * dz * dz;
        }
        let k = j + 1;
        let mut r = f.value(k, z) - f0 - integral;
        if let (Some(c), Some(l0)) = (correction, ell0) {
            r = r - qv - ((c.ell)(k, z) - l0);
        }
        out.push(r);
    }
    out
}

/// [`ito_residual`] over many paths in parallel.
pub fn ito_residuals<T: Scalar, F: PathFunctional<T> + ?Sized>(
    f: &F,
    correction: Option<&Correction<'_, T>>,
    paths: &[Vec<T>],
) -> Vec<Vec<T>> {
    paths.par_iter().map(|z| ito_residual(f, correction, z)).collect()
}

/// `3·a_max·√Δt·scale`: increments above this count as monotonicity violations.
pub fn ito_tolerance<T: Scalar>(a_max: T, dt: T, scale: T) -> T {
    T::lit(3.0) * a_max * dt.sqrt() * scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub increments: usize,
    pub positive: usize,
    pub exceeding: usize,
    pub fraction_exceeding: f64,
    pub max_increment: f64,
    pub tolerance: f64,
}

/// Counts strictly positive increments of `K` and those above `tolerance`.
pub fn monotonicity_report<T: Scalar>(residuals: &[Vec<T>], tolerance: T) -> MonotonicityReport {
    let mut rep = MonotonicityReport {
        increments: 0,
        positive: 0,
        exceeding: 0,
        fraction_exceeding: 0.0,
        max_increment: f64::NEG_INFINITY,
        tolerance: tolerance.as_f64(),
    };
    for k in residuals {
        for w in k.windows(2) {
            let d = w[1] - w[0];
            rep.increments += 1;
            rep.positive += (d > T::zero()) as usize;
            rep.exceeding += (d > tolerance) as usize;
            rep.max_increment = rep.max_increment.max(d.as_f64());
        }
    }
    rep.fraction_exceeding = rep.exceeding as f64 / rep.increments.max(1) as f64;
    rep
}

/// `F(t, x) = −½x_t² − λ∫₀ᵗ x_s² ds − c·t`, with the integral by the trapezoid rule.
///
/// Concave in the path and non-increasing in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcaveFamily<T> {
    pub lambda: T,
    pub c: T,
    pub dt: T,
}

impl<T: Scalar> ConcaveFamily<T> {
    fn integral(&self, k: usize, path: &[T]) -> T {
        let half = T::lit(0.5);
        (0..k).fold(T::zero(), |acc, j| acc + half * (path[j] * path[j] + path[j + 1] * path[j + 1])) * self.dt
    }

    /// Exact vertical derivative of the discrete functional.
    pub fn exact_vertical(&self, k: usize, path: &[T]) -> T {
        let end = if k == 0 { T::zero() } else { self.lambda * path[k] * self.dt };
        -path[k] - end
    }
}

impl<T: Scalar> PathFunctional<T> for ConcaveFamily<T> {
    fn value(&self, k: usize, path: &[T]) -> T {
        let x = path[k];
        -T::lit(0.5) * x * x - self.lambda * self.integral(k, path) - self.c * T::from_usize_lossy(k) * self.dt
    }
}

/// Wraps a value map and a gradient map.
pub struct WithGradient<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<T, V, G> PathFunctional<T> for WithGradient<V, G>
where
    T: Scalar,
    V: Fn(usize, &[T]) -> T + Sync,
    G: Fn(usize, &[T]) -> T + Sync,
{
    fn value(&self, k: usize, path: &[T]) -> T {
        (self.value)(k, path)
    }

    fn vertical(&self, k: usize, path: &[T]) -> T {
        (self.gradient)(k, path)
    }
}

/// Value map only; the vertical derivative comes from a central bump.
pub struct Numeric<V>(pub V);

impl<T, V> PathFunctional<T> for Numeric<V>
where
    T: Scalar,
    V: Fn(usize, &[T]) -> T + Sync,
{
    fn value(&self, k: usize, path: &[T]) -> T {
        (self.0)(k, path)
    }
}

/// Paths of `Z = x₀ + a·W` on `n_steps` steps over `[0, maturity]`, one random
/// substream per path.
pub fn martingale_paths<T: Scalar>(n_paths: usize, n_steps: usize, maturity: T, a: T, x0: T, seed: u64) -> Vec<Vec<T>> {
    let s = a * (maturity / T::from_usize_lossy(n_steps)).sqrt();
    (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut z = Vec::with_capacity(n_steps + 1);
            z.push(x0);
            for (j, xi) in crate::hedge::normals(seed, p, n_steps).into_iter().enumerate() {
                z.push(z[j] + s * T::lit(xi));
            }
            z
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficient::Coefficient;
    use proptest::prelude::*;

    fn uniform_average() -> PayoffSpec<f64> {
        PayoffSpec::Asian { phi: AsianFn::Average, terminal_weight: 0.0 }
    }

    #[test]
    fn frechet_examples() {
        let call = PayoffSpec::Markovian(TerminalPayoff::Call { strike: 1.0 });
        let path = [1.0, 1.2, 0.9, 1.1];
        assert_eq!(eval_frechet(&call, &path, &[1.0, 1.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(eval_frechet(&call, &path, &[0.0, 0.0, 0.0, 2.0]).unwrap(), 2.0);
        let avg = uniform_average();
        assert!((eval_frechet(&avg, &path, &[1.0; 4]).unwrap() - 1.0).abs() < 1e-15);
        assert!(eval_frechet(&avg, &path, &[1.0; 3]).is_err());
    }

    #[test]
    fn first_order_residual_vanishes_faster_than_bump() {
        let payoff = PayoffSpec::Asian { phi: AsianFn::AverageCall { strike: 0.9 }, terminal_weight: 0.25 };
        let path: Vec<f64> = (0..=16).map(|k| 1.0 + 0.1 * (k as f64 * 0.7).sin()).collect();
        let h: Vec<f64> = (0..=16).map(|k| (k as f64 * 0.3).cos()).collect();
        let lin = eval_frechet(&payoff, &path, &h).unwrap();
        let resid = |eps: f64| {
            let bumped: Vec<f64> = path.iter().zip(&h).map(|(x, h)| x + eps * h).collect();
            (payoff.evaluate(&bumped) - payoff.evaluate(&path) - eps * lin).abs()
        };
        for eps in [1e-2, 1e-3, 1e-4] {
            assert!(resid(eps) <= 1e-12 * eps.max(1e-3), "{eps}: {}", resid(eps));
        }
    }

    #[test]
    fn a_process_examples() {
        let m = ImpactModel::constant(0.2, 0.1).unwrap();
        let call = PayoffSpec::Markovian(TerminalPayoff::Call { strike: 1.0 });
        let path = [1.0, 1.1, 1.05, 1.2];
        let a = compute_a(&call, CostFrechet::for_model(&m), &m, &path, &[0.2; 3], 1.0 / 3.0).unwrap();
        assert_eq!(a, vec![0.0, 0.0, 0.0, 1.0]);
        let avg = uniform_average();
        let a = compute_a(&avg, CostFrechet::Zero, &m, &path, &[0.2; 3], 1.0 / 3.0).unwrap();
        for (k, ak) in a.iter().enumerate() {
            assert!((ak - k as f64 / 3.0).abs() < 1e-15);
        }
        assert!(compute_a(&avg, CostFrechet::Zero, &m, &path, &[0.2; 2], 0.1).is_err());
    }

    /// Three binomial steps with open-loop volatilities: shifting `x₀` shifts every
    /// path, so `dJ/dx₀` is an expectation over the eight leaves.
    #[test]
    fn a_matches_tree_derivative_with_state_dependent_impact() {
        let impact = Coefficient::Affine { intercept: 0.1, slope: 0.05, floor: 0.05, cap: 0.2 };
        let m = ImpactModel::benchmark(Coefficient::Constant(0.2), impact).unwrap();
        assert_eq!(CostFrechet::for_model(&m), CostFrechet::Diagonal);
        let call = PayoffSpec::Markovian(TerminalPayoff::Call { strike: 1.0 });
        let dt: f64 = 1.0 / 3.0;
        let alphas = [0.2, 0.25, 0.3];
        let f = |x: f64| (0.1 + 0.05 * x).clamp(0.05, 0.2);
        let g = |x: f64, a: f64| (a - 0.2) * (a - 0.2) / (2.0 * f(x));
        let paths = |x0: f64| {
            (0..8)
                .map(|b| {
                    let mut p = vec![x0];
                    for (j, a) in alphas.iter().enumerate() {
                        let s = if (b >> j) & 1 == 1 { 1.0 } else { -1.0 };
                        p.push(p[j] + s * a * dt.sqrt());
                    }
                    p
                })
                .collect::<Vec<_>>()
        };
        let j = |x0: f64| {
            paths(x0)
                .iter()
                .map(|p| (p[3] - 1.0f64).max(0.0) - (0..3).map(|k| g(p[k], alphas[k]) * dt).sum::<f64>())
                .sum::<f64>()
                / 8.0
        };
        let bump = 1e-6;
        let fd = (j(1.05 + bump) - j(1.05 - bump)) / (2.0 * bump);
        let ea = paths(1.05)
            .iter()
            .map(|p| *compute_a(&call, CostFrechet::Diagonal, &m, p, &alphas, dt).unwrap().last().unwrap())
            .sum::<f64>()
            / 8.0;
        assert!((ea - fd).abs() < 1e-8, "{ea} vs {fd}");
        // adding the cost term instead of subtracting it misses the derivative
        let plus = paths(1.05)
            .iter()
            .map(|p| {
                let terminal = if p[3] > 1.0 { 1.0 } else { 0.0 };
                terminal + (0..3).map(|k| m.dg_dx(k as f64 * dt, p[k], alphas[k]) * dt).sum::<f64>()
            })
            .sum::<f64>()
            / 8.0;
        assert!((plus - fd).abs() > 1e-4);
    }

    #[test]
    fn vertical_derivative_examples() {
        let sq = Numeric(|k: usize, p: &[f64]| p[k] * p[k]);
        let path = [1.0, 2.0, 3.0];
        assert!((dupire_vertical(&sq, 2, &path, 1e-4) - 6.0).abs() < 1e-6);
        let dt = 0.25;
        let integral = ConcaveFamily { lambda: -1.0, c: 0.0, dt };
        let running = Numeric(|k: usize, p: &[f64]| integral.value(k, p) + 0.5 * p[k] * p[k]);
        let path = [0.3, 0.5, 0.2, 0.9];
        // only the trapezoid end weight of the last node moves with the bump
        for k in 1..4 {
            let d = dupire_vertical(&running, k, &path, 1e-4);
            assert!((d - dt * path[k]).abs() < 1e-9, "{k}: {d}");
        }
        assert!(dupire_vertical(&running, 0, &path, 1e-4).abs() < 1e-12);
        let fam = ConcaveFamily { lambda: 0.7, c: 0.3, dt };
        for k in 0..4 {
            assert!((fam.vertical(k, &path) - fam.exact_vertical(k, &path)).abs() < 1e-8);
        }
    }

    fn brownian_paths(n_paths: usize, n: usize, a: f64, seed: u64) -> Vec<Vec<f64>> {
        martingale_paths(n_paths, n, 1.0, a, 1.0, seed)
    }

    #[test]
    fn affine_functional_has_zero_residual() {
        let f = WithGradient { value: |k: usize, p: &[f64]| 2.0 * p[k] + 1.0, gradient: |_: usize, _: &[f64]| 2.0 };
        for k in ito_residuals(&f, None, &brownian_paths(20, 64, 0.3, 1)) {
            assert!(k.iter().all(|r| r.abs() < 1e-12));
        }
    }

    #[test]
    fn quadratic_residual_is_minus_quadratic_variation() {
        let (a, c) = (0.3, 0.5);
        let n = 64;
        let dt = 1.0 / n as f64;
        let f = WithGradient {
            value: move |k: usize, p: &[f64]| -p[k] * p[k] - c * k as f64 * dt,
            gradient: |k: usize, p: &[f64]| -2.0 * p[k],
        };
        let paths = brownian_paths(4000, n, a, 2);
        let ks = ito_residuals(&f, None, &paths);
        let rep = monotonicity_report(&ks, 0.0);
        assert_eq!(rep.positive, 0);
        let finals: Vec<f64> = ks.iter().map(|k| k[n]).collect();
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        let sd = (finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (finals.len() - 1) as f64).sqrt();
        let expected = -a * a - c;
        assert!((mean - expected).abs() < 3.0 * sd / (finals.len() as f64).sqrt());
    }

    #[test]
    fn concave_family_residual_never_increases() {
        let n = 256;
        let fam = ConcaveFamily { lambda: 0.5, c: 0.1, dt: 1.0 / n as f64 };
        let paths = brownian_paths(200, n, 0.4, 3);
        let tol = ito_tolerance(0.4, fam.dt, 1e-8);
        let exact = WithGradient {
            value: |k: usize, p: &[f64]| fam.value(k, p),
            gradient: |k: usize, p: &[f64]| fam.exact_vertical(k, p),
        };
        assert_eq!(monotonicity_report(&ito_residuals(&exact, None, &paths), 0.0).positive, 0);
        let numeric = monotonicity_report(&ito_residuals(&fam, None, &paths), tol);
        assert_eq!(numeric.exceeding, 0, "{numeric:?}");
    }

    #[test]
    fn correction_removes_convexity() {
        // F = +x² is convex; with R = 2x² (∇²R = 4) F − R is concave and K is non-increasing
        let n = 128;
        let f = WithGradient { value: |k: usize, p: &[f64]| p[k] * p[k], gradient: |k: usize, p: &[f64]| 2.0 * p[k] };
        let hess = |_: usize, _: &[f64]| 4.0;
        let ell = |_: usize, _: &[f64]| 0.0;
        let corr = Correction { r_hessian: &hess, ell: &ell };
        let paths = brownian_paths(50, n, 0.3, 4);
        assert!(monotonicity_report(&ito_residuals(&f, None, &paths), 0.0).positive > 0);
        assert_eq!(monotonicity_report(&ito_residuals(&f, Some(&corr), &paths), 0.0).positive, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn frechet_is_linear_in_the_perturbation(
            path in prop::collection::vec(0.5f64..1.5, 9),
            h1 in prop::collection::vec(-1.0f64..1.0, 9),
            h2 in prop::collection::vec(-1.0f64..1.0, 9),
            strike in 0.5f64..1.5,
            p in 0.0f64..1.0,
        ) {
            let payoff = PayoffSpec::Asian { phi: AsianFn::AverageCall { strike }, terminal_weight: p };
            let sum: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| a + b).collect();
            let lhs = eval_frechet(&payoff, &path, &sum).unwrap();
            let rhs = eval_frechet(&payoff, &path, &h1).unwrap() + eval_frechet(&payoff, &path, &h2).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-14 * (1.0 + lhs.abs()));
        }

        #[test]
        fn total_variation_within_bound(
            path in prop::collection::vec(0.0f64..2.0, 2..12),
            strike in 0.0f64..2.0,
            p in 0.0f64..1.0,
            family in 0usize..4,
        ) {
            let payoff = match family {
                0 => PayoffSpec::Markovian(TerminalPayoff::Call { strike }),
                1 => PayoffSpec::Markovian(TerminalPayoff::Butterfly { k1: strike, k2: strike + 0.3 }),
                2 => PayoffSpec::Asian { phi: AsianFn::AverageCall { strike }, terminal_weight: p },
                _ => PayoffSpec::Asian { phi: AsianFn::Average, terminal_weight: p },
            };
            prop_assert!(payoff.frechet_total_variation(&path) <= frechet_bound(&payoff) + 1e-12);
        }
    }
}
