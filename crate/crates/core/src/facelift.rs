//! Face-lift of terminal payoffs: the smallest majorant `Φ̂` of `Φ` such that
//! `Φ̂ − Γ` is concave, computed as `(Φ − Γ)^conc + Γ` on a grid.

use crate::error::{Error, Result};
use crate::model::ImpactModel;
use crate::scalar::Scalar;

/// Convex function subtracted before taking the concave envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvexShift {
    /// `Γ₀(x) = C₀x²` with the model's upper growth constant.
    C0Quadratic,
    /// `Γ̄₀(x) = ∫₀ˣ∫₀^y γ₂(T, u) du dy`.
    ModelIntegrated,
    /// `Γ̄₀(x) ∓ ε·x²` with `ε` the model margin.
    #[default]
    EpsShiftedMinus,
    EpsShiftedPlus,
}

/// Payoff values and subtracted convex function on a strictly increasing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalGrid<T> {
    pub xs: Vec<T>,
    pub phi: Vec<T>,
    pub gamma: Vec<T>,
}

impl<T: Scalar> TerminalGrid<T> {
    pub fn new(xs: Vec<T>, phi: Vec<T>, gamma: Vec<T>) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::Domain("terminal grid needs at least 2 nodes".into()));
        }
        if phi.len() != xs.len() || gamma.len() != xs.len() {
            return Err(Error::Domain("terminal grid columns differ in length".into()));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("terminal grid abscissae must be strictly increasing".into()));
        }
        if phi.iter().chain(gamma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("terminal grid values must be finite".into()));
        }
        Ok(TerminalGrid { xs, phi, gamma })
    }

    /// Builds the grid with `Γ` taken from the model at maturity `t`.
    pub fn from_model(model: &ImpactModel<T>, t: T, xs: Vec<T>, phi: Vec<T>, shift: ConvexShift) -> Result<Self> {
        let gamma = convex_shift_values(model, t, &xs, shift);
        Self::new(xs, phi, gamma)
    }
}

/// Evaluates the chosen convex function on `xs`.
///
/// For non-constant `γ₂` the double integral is accumulated by the trapezoid rule
/// from `xs[0]` rather than from 0; the two differ by an affine function, which
/// the face-lift ignores.
pub fn convex_shift_values<T: Scalar>(model: &ImpactModel<T>, t: T, xs: &[T], shift: ConvexShift) -> Vec<T> {
    let half = T::lit(0.5);
    let integrated = || -> Vec<T> {
        let (lo, hi) = model.gamma2_bounds();
        if lo == hi {
            return xs.iter().map(|&x| half * lo * x * x).collect();
        }
        let mut out = vec![T::zero(); xs.len()];
        let mut slope = T::zero();
        for i in 1..xs.len() {
            let h = xs[i] - xs[i - 1];
            let (g0, g1) = (model.gamma2(t, xs[i - 1]), model.gamma2(t, xs[i]));
            // exact for piecewise-linear γ₂ on the grid
            out[i] = out[i - 1] + slope * h + h * h * (g0 / T::lit(3.0) + g1 / T::lit(6.0));
            slope = slope + half * h * (g0 + g1);
        }
        out
    };
    match shift {
        ConvexShift::C0Quadratic => xs.iter().map(|&x| model.c_upper() * x * x).collect(),
        ConvexShift::ModelIntegrated => integrated(),
        ConvexShift::EpsShiftedMinus | ConvexShift::EpsShiftedPlus => {
            let eps = model.eps_margin();
            let eps = if shift == ConvexShift::EpsShiftedMinus { -eps } else { eps };
            integrated().into_iter().zip(xs).map(|(g, &x)| g + eps * x * x).collect()
        }
    }
}

/// Value at `x` of the chord through `(xa, va)` and `(xb, vb)`.
#[inline]
pub fn chord<T: Scalar>(xa: T, va: T, xb: T, vb: T, x: T) -> T {
    va + (vb - va) * (x - xa) / (xb - xa)
}

/// Indices of the upper hull vertices (monotone chain, single left-to-right pass).
pub fn upper_hull_vertices<T: Scalar>(xs: &[T], values: &[T]) -> Vec<usize> {
    let mut hull: Vec<usize> = Vec::with_capacity(xs.len());
    for k in 0..xs.len() {
        while hull.len() >= 2 {
            let (o, a) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (xs[a] - xs[o]) * (values[k] - values[o]) - (values[a] - values[o]) * (xs[k] - xs[o]);
            if cross >= T::zero() {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(k);
    }
    hull
}

/// Smallest concave function above `values` on the grid `xs`, evaluated at the nodes.
pub fn concave_envelope<T: Scalar>(xs: &[T], values: &[T]) -> Result<Vec<T>> {
    if xs.len() < 2 {
        return Err(Error::Domain("concave envelope needs at least 2 nodes".into()));
    }
    if xs.len() != values.len() {
        return Err(Error::Domain("abscissae and values differ in length".into()));
    }
    if xs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain("abscissae must be strictly increasing".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("values must be finite".into()));
    }
    let hull = upper_hull_vertices(xs, values);
    let mut out = values.to_vec();
    for e in hull.windows(2) {
        let (a, b) = (e[0], e[1]);
        for i in a + 1..b {
            out[i] = chord(xs[a], values[a], xs[b], values[b], xs[i]);
        }
    }
    Ok(out)
}

/// `(Φ − Γ)^conc + Γ` on the grid nodes.
pub fn facelift_payoff<T: Scalar>(tg: &TerminalGrid<T>) -> Result<Vec<T>> {
    let diff: Vec<T> = tg.phi.iter().zip(&tg.gamma).map(|(&p, &g)| p - g).collect();
    let env = concave_envelope(&tg.xs, &diff)?;
    Ok(env.into_iter().zip(&tg.gamma).map(|(e, &g)| e + g).collect())
}

/// Face-lift that additionally rejects domains where the envelope spans from a
/// boundary node over modified interior nodes; then the truncated hull differs
/// from the envelope over ℝ.
pub fn facelift_checked<T: Scalar>(tg: &TerminalGrid<T>) -> Result<Vec<T>> {
    let out = facelift_payoff(tg)?;
    let n = out.len();
    if n >= 3 {
        let scale = tg.phi.iter().chain(&tg.gamma).fold(T::one(), |m, v| m.max(v.abs()));
        let tol = T::lit(1e-12) * scale;
        for &i in &[1, n - 2] {
            if out[i] - tg.phi[i] > tol {
                return Err(Error::DomainTooSmall(format!(
                    "face-lift modifies the payoff next to the boundary (x = {})",
                    tg.xs[i]
                )));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// O(n³) chord maximization: the envelope at `xᵢ` is the largest chord value over
    /// all pairs bracketing `xᵢ`.
    pub(crate) fn brute_force_envelope(xs: &[f64], v: &[f64]) -> Vec<f64> {
        let n = xs.len();
        (0..n)
            .map(|i| {
                let mut best = v[i];
                for j in 0..=i {
                    for k in i..n {
                        if j < k {
                            best = best.max(chord(xs[j], v[j], xs[k], v[k], xs[i]));
                        }
                    }
                }
                best
            })
            .collect()
    }

    #[test]
    fn examples_from_three_and_five_nodes() {
        let xs = [-1.0, 0.0, 1.0];
        let neg_abs: Vec<f64> = xs.iter().map(|x: &f64| -x.abs()).collect();
        assert_eq!(concave_envelope(&xs, &neg_abs).unwrap(), vec![-1.0, 0.0, -1.0]);
        let abs: Vec<f64> = xs.iter().map(|x: &f64| x.abs()).collect();
        assert_eq!(concave_envelope(&xs, &abs).unwrap(), vec![1.0, 1.0, 1.0]);

        let xs5 = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let step: Vec<f64> = xs5.iter().map(|&x| if x >= 0.0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(concave_envelope(&xs5, &step).unwrap(), vec![0.0, 0.5, 1.0, 1.0, 1.0]);
        assert_eq!(brute_force_envelope(&xs5, &step), vec![0.0, 0.5, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_short_or_unsorted_grids() {
        assert!(concave_envelope(&[0.0], &[1.0]).is_err());
        assert!(concave_envelope(&[0.0, 0.0], &[1.0, 2.0]).is_err());
        assert!(TerminalGrid::new(vec![0.0, 1.0], vec![0.0, f64::NAN], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn affine_payoff_unchanged() {
        let m = ImpactModel::constant(0.2, 0.1).unwrap();
        let xs: Vec<f64> = (0..201).map(|i| -1.0 + 0.015 * i as f64).collect();
        let phi: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let tg = TerminalGrid::from_model(&m, 1.0, xs, phi.clone(), ConvexShift::default()).unwrap();
        let hat = facelift_checked(&tg).unwrap();
        for (a, b) in hat.iter().zip(&phi) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn call_facelift_matches_closed_form_and_oracle() {
        // (x−1)⁺ − x²/(2f) with f = 0.1: the common tangent touches at 0.95 and 1.05,
        // so Φ̂ = (x − 0.95)²/(2f) in between.
        let f = 0.1;
        let xs: Vec<f64> = (0..401).map(|i| i as f64 * 0.005).collect();
        let phi: Vec<f64> = xs.iter().map(|x| (x - 1.0f64).max(0.0)).collect();
        let gamma: Vec<f64> = xs.iter().map(|x| x * x / (2.0 * f)).collect();
        let tg = TerminalGrid::new(xs.clone(), phi.clone(), gamma.clone()).unwrap();
        let hat = facelift_checked(&tg).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            let expect = if (0.95..=1.05).contains(&x) { (x - 0.95) * (x - 0.95) / (2.0 * f) } else { phi[i] };
            assert!((hat[i] - expect).abs() < 1e-11, "x={x}: {} vs {expect}", hat[i]);
        }
        assert!((hat[200] - 0.0125).abs() < 1e-12);
        let diff: Vec<f64> = phi.iter().zip(&gamma).map(|(p, g)| p - g).collect();
        let oracle = brute_force_envelope(&xs, &diff);
        for i in 0..xs.len() {
            assert!((hat[i] - (oracle[i] + gamma[i])).abs() < 1e-11);
        }
    }

    #[test]
    fn idempotent_and_majorant_and_minimal() {
        let f = 0.1;
        let xs: Vec<f64> = (0..161).map(|i| -1.0 + i as f64 * 0.0125).collect();
        let phi: Vec<f64> = xs.iter().map(|&x| if x >= 0.0 { 1.0 } else { 0.0 }).collect();
        let gamma: Vec<f64> = xs.iter().map(|x| x * x / (2.0 * f)).collect();
        let tg = TerminalGrid::new(xs.clone(), phi.clone(), gamma.clone()).unwrap();
        let hat = facelift_checked(&tg).unwrap();
        assert!(hat.iter().zip(&phi).all(|(h, p)| h >= p));
        let again = facelift_payoff(&TerminalGrid::new(xs.clone(), hat.clone(), gamma.clone()).unwrap()).unwrap();
        // exact up to the rounding of (Φ̂ − Γ) + Γ
        for (a, b) in again.iter().zip(&hat) {
            assert!((a - b).abs() <= 1e-13, "{a} vs {b}");
        }

        let h = xs[1] - xs[0];
        for i in 1..xs.len() - 1 {
            let d2 = (hat[i + 1] - 2.0 * hat[i] + hat[i - 1]) / (h * h);
            assert!(d2 <= 1.0 / f + 1e-6, "curvature {d2} at {}", xs[i]);
        }
        // lowering any node that was lifted breaks concavity of Φ̂ − Γ
        for i in 1..xs.len() - 1 {
            if hat[i] > phi[i] + 1e-12 {
                let mut low = hat.clone();
                low[i] -= 1e-6;
                let w: Vec<f64> = low.iter().zip(&gamma).map(|(a, g)| a - g).collect();
                assert!(w[i + 1] - 2.0 * w[i] + w[i - 1] > 0.0, "node {i} not minimal");
            }
        }
    }

    #[test]
    fn eps_shift_tightens_curvature() {
        let m = ImpactModel::constant(0.2, 0.1).unwrap();
        let xs: Vec<f64> = (0..401).map(|i| i as f64 * 0.005).collect();
        let phi: Vec<f64> = xs.iter().map(|x| (x - 1.0f64).max(0.0)).collect();
        let h = 0.005;
        let max_d2 = |shift| {
            let tg = TerminalGrid::from_model(&m, 1.0, xs.clone(), phi.clone(), shift).unwrap();
            let hat = facelift_payoff(&tg).unwrap();
            (1..400).map(|i| (hat[i + 1] - 2.0 * hat[i] + hat[i - 1]) / (h * h)).fold(f64::MIN, f64::max)
        };
        let eps = m.eps_margin();
        assert!((max_d2(ConvexShift::EpsShiftedMinus) - (10.0 - 2.0 * eps)).abs() < 1e-6);
        assert!((max_d2(ConvexShift::ModelIntegrated) - 10.0).abs() < 1e-6);
        assert!((max_d2(ConvexShift::EpsShiftedPlus) - (10.0 + 2.0 * eps)).abs() < 1e-6);
    }

    #[test]
    fn model_integrated_shift_has_gamma2_curvature() {
        use crate::coefficient::Coefficient;
        let m = ImpactModel::benchmark(
            Coefficient::Constant(0.2),
            Coefficient::Affine { intercept: 0.1, slope: 0.02, floor: 0.05, cap: 0.2 },
        )
        .unwrap();
        let xs: Vec<f64> = (0..101).map(|i| i as f64 * 0.02).collect();
        let g = convex_shift_values(&m, 1.0, &xs, ConvexShift::ModelIntegrated);
        let h = 0.02;
        for i in 1..100 {
            let d2 = (g[i + 1] - 2.0 * g[i] + g[i - 1]) / (h * h);
            let expect = m.gamma2(1.0, xs[i]);
            assert!((d2 - expect).abs() < 0.05 * expect, "{d2} vs {expect}");
        }
    }

    #[test]
    fn narrow_domain_is_rejected() {
        let xs: Vec<f64> = (0..21).map(|i| 0.97 + i as f64 * 0.003).collect();
        let phi: Vec<f64> = xs.iter().map(|x| (x - 1.0f64).max(0.0)).collect();
        let gamma: Vec<f64> = xs.iter().map(|x| x * x / 0.2).collect();
        let tg = TerminalGrid::new(xs, phi, gamma).unwrap();
        assert!(matches!(facelift_checked(&tg), Err(Error::DomainTooSmall(_))));
    }
}
