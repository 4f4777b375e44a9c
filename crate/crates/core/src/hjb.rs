//! Explicit monotone scheme for the Markovian HJB equation
//! `∂ₜv + F̄(t, x, ∂²ₓₓv) = 0`, `v(T, ·) = Φ̂`.
//!
//! Each backward step is `v ← v + h·F̄(t_k, x, clamp(D²v))` with
//! `clamp(z) = min(z, γ₂ − ε)`. The scheme is monotone while
//! `h·a*² ≤ Δx²`, with `a*` the Fenchel maximizer. Near maturity `a*` can be
//! orders of magnitude above `σ₀` (the face-lifted curvature sits just under the
//! constraint), so each recorded interval is split into as many sub-steps as
//! that bound requires. Coefficients are frozen at the left endpoint `t_k`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{first_difference, second_difference, UniformGrid};
use crate::model::ImpactModel;
use crate::scalar::Scalar;

/// Uniform time grid `0 = t₀ < … < t_N = T` and uniform space grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverGrid<T> {
    pub maturity: T,
    pub n_steps: usize,
    pub space: UniformGrid<T>,
}

impl<T: Scalar> SolverGrid<T> {
    pub fn new(maturity: T, n_steps: usize, space: UniformGrid<T>) -> Result<Self> {
        if n_steps < 1 || !(maturity > T::zero()) {
            return Err(Error::Config("time grid needs T > 0 and at least one step".into()));
        }
        Ok(SolverGrid { maturity, n_steps, space })
    }

    pub fn dt(&self) -> T {
        self.maturity / T::from_usize_lossy(self.n_steps)
    }

    pub fn time(&self, k: usize) -> T {
        if k == self.n_steps {
            self.maturity
        } else {
            T::from_usize_lossy(k) * self.dt()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HjbOptions<T> {
    /// Fraction of the monotonicity bound `Δx²/a*²` used per sub-step.
    pub cfl_safety: T,
    /// Split recorded steps to honour the bound; otherwise a violation is an error.
    pub adaptive: bool,
    pub max_substeps: usize,
    /// Largest tolerated fraction of interior nodes with an active clamp in one layer.
    pub max_clamp_fraction: T,
    pub strict: bool,
}

impl<T: Scalar> Default for HjbOptions<T> {
    fn default() -> Self {
        HjbOptions {
            cfl_safety: T::lit(0.9),
            adaptive: true,
            max_substeps: 50_000_000,
            max_clamp_fraction: T::lit(0.05),
            strict: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveStats {
    pub substeps: usize,
    /// Interior node evaluations with an active clamp, over all sub-steps.
    pub clamp_active: usize,
    /// Interior clamp activations at the recorded layers (excluding maturity).
    pub clamp_active_recorded: usize,
    pub max_clamp_fraction: f64,
    pub max_a_star: f64,
    pub warnings: Vec<String>,
}

/// Value function and optimal feedback on the `(t, x)` grid, row-major in time.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface<T> {
    pub grid: SolverGrid<T>,
    pub v: Vec<T>,
    pub dv: Vec<T>,
    pub d2v: Vec<T>,
    pub a_star: Vec<T>,
    pub gamma_hat: Vec<T>,
    pub stats: SolveStats,
}

impl<T: Scalar> ValueSurface<T> {
    pub fn n_x(&self) -> usize {
        self.grid.space.len()
    }

    pub fn n_layers(&self) -> usize {
        self.grid.n_steps + 1
    }

    fn row<'a>(&self, data: &'a [T], k: usize) -> &'a [T] {
        let n = self.n_x();
        &data[k * n..(k + 1) * n]
    }

    pub fn v_layer(&self, k: usize) -> &[T] {
        self.row(&self.v, k)
    }

    pub fn dv_layer(&self, k: usize) -> &[T] {
        self.row(&self.dv, k)
    }

    pub fn d2v_layer(&self, k: usize) -> &[T] {
        self.row(&self.d2v, k)
    }

    pub fn a_star_layer(&self, k: usize) -> &[T] {
        self.row(&self.a_star, k)
    }

    pub fn gamma_hat_layer(&self, k: usize) -> &[T] {
        self.row(&self.gamma_hat, k)
    }

    pub fn value(&self, k: usize, x: T) -> T {
        self.grid.space.interpolate(self.v_layer(k), x)
    }

    pub fn gradient(&self, k: usize, x: T) -> T {
        self.grid.space.interpolate(self.dv_layer(k), x)
    }

    pub fn control(&self, k: usize, x: T) -> T {
        self.grid.space.interpolate(self.a_star_layer(k), x)
    }

    pub fn terminal(&self) -> &[T] {
        self.v_layer(self.grid.n_steps)
    }
}

struct LayerEval<T> {
    flux: Vec<T>,
    a_star: Vec<T>,
    clamped: usize,
    a_max: T,
}

const PAR_THRESHOLD: usize = 2048;

fn evaluate_layer<T: Scalar>(model: &ImpactModel<T>, t: T, xs: &[T], d2: &[T]) -> LayerEval<T> {
    let n = xs.len();
    let eval = |i: usize| {
        let (fen, clamped) = model.fenchel_clamped(t, xs[i], d2[i]);
        (fen.value, fen.argmax, clamped && i > 0 && i + 1 < n)
    };
    let results: Vec<(T, T, bool)> = if n >= PAR_THRESHOLD {
        (0..n).into_par_iter().with_min_len(512).map(eval).collect()
    } else {
        (0..n).map(eval).collect()
    };
    let mut out =
        LayerEval { flux: Vec::with_capacity(n), a_star: Vec::with_capacity(n), clamped: 0, a_max: T::zero() };
    for (f, a, c) in results {
        out.flux.push(f);
        out.a_max = out.a_max.max(a);
        out.a_star.push(a);
        out.clamped += c as usize;
    }
    out
}

/// Largest optimal volatility implied by the curvature of `terminal`.
pub fn terminal_a_max<T: Scalar>(model: &ImpactModel<T>, terminal: &[T], grid: &SolverGrid<T>) -> T {
    let xs = grid.space.nodes();
    let mut d2 = vec![T::zero(); xs.len()];
    second_difference(terminal, grid.space.step(), &mut d2);
    evaluate_layer(model, grid.maturity, &xs, &d2).a_max
}

/// Checks the monotonicity bound for the un-split grid against the terminal curvature.
pub fn check_cfl<T: Scalar>(model: &ImpactModel<T>, terminal: &[T], grid: &SolverGrid<T>) -> Result<()> {
    let a_max = terminal_a_max(model, terminal, grid);
    let dx = grid.space.step();
    if grid.dt() * a_max * a_max > dx * dx {
        return Err(Error::Cfl { dt: grid.dt().as_f64(), a_max: a_max.as_f64(), dx: dx.as_f64() });
    }
    Ok(())
}

/// Solves backward from `terminal` (nodal values at `T` on `grid.space`).
pub fn solve<T: Scalar>(
    model: &ImpactModel<T>,
    terminal: &[T],
    grid: &SolverGrid<T>,
    opts: &HjbOptions<T>,
) -> Result<ValueSurface<T>> {
    let nx = grid.space.len();
    if terminal.len() != nx {
        return Err(Error::Domain(format!("terminal has {} values for {nx} grid nodes", terminal.len())));
    }
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("terminal values must be finite".into()));
    }
    let n_layers = grid.n_steps + 1;
    let xs = grid.space.nodes();
    let dx = grid.space.step();
    let dt = grid.dt();
    let interior = nx.saturating_sub(2).max(1);

    let mut v = vec![T::zero(); n_layers * nx];
    let mut a_star = vec![T::zero(); n_layers * nx];
    let mut stats = SolveStats::default();

    let mut cur = terminal.to_vec();
    let mut d2 = vec![T::zero(); nx];
    second_difference(&cur, dx, &mut d2);
    let top = evaluate_layer(model, grid.maturity, &xs, &d2);
    v[grid.n_steps * nx..].copy_from_slice(&cur);
    a_star[grid.n_steps * nx..].copy_from_slice(&top.a_star);
    stats.max_a_star = top.a_max.as_f64();
    stats.max_clamp_fraction = top.clamped as f64 / interior as f64;

    let tiny = dt * T::lit(1e-12);
    for k in (0..grid.n_steps).rev() {
        let t = grid.time(k);
        let mut remaining = dt;
        let mut layer_clamped = 0;
        let mut last_a = Vec::new();
        while remaining > tiny {
            second_difference(&cur, dx, &mut d2);
            let ev = evaluate_layer(model, t, &xs, &d2);
            let bound =
                if ev.a_max > T::zero() { opts.cfl_safety * dx * dx / (ev.a_max * ev.a_max) } else { remaining };
            if !opts.adaptive && bound < dt {
                return Err(Error::Cfl { dt: dt.as_f64(), a_max: ev.a_max.as_f64(), dx: dx.as_f64() });
            }
            // avoid leaving a sliver shorter than 1% of the bound
            let h = if bound >= remaining {
                remaining
            } else if remaining < bound * T::lit(1.01) {
                remaining * T::lit(0.5)
            } else {
                bound
            };
            for (c, f) in cur.iter_mut().zip(&ev.flux) {
                *c = *c + h * *f;
            }
            remaining = remaining - h;
            stats.substeps += 1;
            stats.clamp_active += ev.clamped;
            stats.max_a_star = stats.max_a_star.max(ev.a_max.as_f64());
            layer_clamped = ev.clamped;
            last_a = ev.a_star;
            if stats.substeps > opts.max_substeps {
                return Err(Error::Cfl { dt: h.as_f64(), a_max: ev.a_max.as_f64(), dx: dx.as_f64() });
            }
        }
        stats.clamp_active_recorded += layer_clamped;
        let frac = layer_clamped as f64 / interior as f64;
        stats.max_clamp_fraction = stats.max_clamp_fraction.max(frac);
        v[k * nx..(k + 1) * nx].copy_from_slice(&cur);
        a_star[k * nx..(k + 1) * nx].copy_from_slice(&last_a);
    }

    if stats.max_clamp_fraction > opts.max_clamp_fraction.as_f64() {
        let msg = format!(
            "curvature clamp active on {:.2}% of interior nodes in some layer",
            100.0 * stats.max_clamp_fraction
        );
        if opts.strict {
            return Err(Error::Health(msg));
        }
        stats.warnings.push(msg);
    }

    let mut dv = vec![T::zero(); n_layers * nx];
    let mut d2v = vec![T::zero(); n_layers * nx];
    let mut gamma_hat = vec![T::zero(); n_layers * nx];
    for k in 0..n_layers {
        let r = k * nx..(k + 1) * nx;
        first_difference(&v[r.clone()], dx, &mut dv[r.clone()]);
        second_difference(&v[r.clone()], dx, &mut d2v[r.clone()]);
        let t = grid.time(k);
        for i in 0..nx {
            let j = k * nx + i;
            gamma_hat[j] = model.sigma_inverse(t, xs[i], a_star[j])?.to_float();
        }
    }

    Ok(ValueSurface { grid: grid.clone(), v, dv, d2v, a_star, gamma_hat, stats })
}

/// Property checks on a solved surface.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceDiagnostics {
    /// `C_v` with `|v(t, x)| ≤ C_v(1 + |x|)` over the fit window.
    pub growth_constant: f64,
    /// Largest excess of `|v|` over the fitted bound inside the window.
    pub growth_violation: f64,
    /// `C` in `v(t + Δt, x) − v(t, x) ≤ C·Δt`.
    pub monotonicity_constant: f64,
    pub monotonicity_violation: f64,
    /// Bound `2C₀` on the second difference (concavity of `v − C₀x²`).
    pub concavity_bound: f64,
    pub concavity_violation: f64,
    pub max_d2v: f64,
    /// Largest `d2v − (γ₂ − ε)` over interior nodes (positive means violated).
    pub parabolicity_excess: f64,
    pub clamp_active_recorded: usize,
    pub max_clamp_fraction: f64,
    pub max_a_star: f64,
    pub substeps: usize,
}

/// `fit_window` restricts the growth fit to `[lo, hi]`; `tol` is added to the
/// monotonicity constant.
pub fn diagnostics<T: Scalar>(
    vs: &ValueSurface<T>,
    model: &ImpactModel<T>,
    fit_window: (T, T),
    tol: T,
) -> SurfaceDiagnostics {
    let xs = vs.grid.space.nodes();
    let nx = xs.len();
    let dt = vs.grid.dt();
    let in_window: Vec<bool> = xs.iter().map(|&x| x >= fit_window.0 && x <= fit_window.1).collect();

    let mut growth = T::zero();
    for k in 0..vs.n_layers() {
        for (i, &val) in vs.v_layer(k).iter().enumerate() {
            if in_window[i] {
                growth = growth.max(val.abs() / (T::one() + xs[i].abs()));
            }
        }
    }
    let mut growth_violation = T::zero();
    for k in 0..vs.n_layers() {
        for (i, &val) in vs.v_layer(k).iter().enumerate() {
            if in_window[i] {
                growth_violation = growth_violation.max(val.abs() - growth * (T::one() + xs[i].abs()));
            }
        }
    }

    let mut mono_c = T::zero();
    for k in 0..vs.grid.n_steps {
        let t = vs.grid.time(k);
        for &x in &xs {
            mono_c = mono_c.max(model.running_cost(t, x, T::zero()));
        }
    }
    mono_c = mono_c + tol;
    let mut mono_violation = T::zero();
    for k in 0..vs.grid.n_steps {
        let (now, next) = (vs.v_layer(k), vs.v_layer(k + 1));
        for i in 0..nx {
            mono_violation = mono_violation.max(next[i] - now[i] - mono_c * dt);
        }
    }

    let conc_bound = T::lit(2.0) * model.c_upper();
    let mut conc_violation = T::zero();
    let mut max_d2 = T::neg_infinity();
    let mut parab = T::neg_infinity();
    for k in 0..vs.n_layers() {
        let t = vs.grid.time(k);
        let d2 = vs.d2v_layer(k);
        for i in 1..nx - 1 {
            conc_violation = conc_violation.max(d2[i] - conc_bound);
            max_d2 = max_d2.max(d2[i]);
            parab = parab.max(d2[i] - (model.gamma2(t, xs[i]) - model.eps_margin()));
        }
    }

    SurfaceDiagnostics {
        growth_constant: growth.as_f64(),
        growth_violation: growth_violation.as_f64(),
        monotonicity_constant: mono_c.as_f64(),
        monotonicity_violation: mono_violation.as_f64(),
        concavity_bound: conc_bound.as_f64(),
        concavity_violation: conc_violation.as_f64(),
        max_d2v: max_d2.as_f64(),
        parabolicity_excess: parab.as_f64(),
        clamp_active_recorded: vs.stats.clamp_active_recorded,
        max_clamp_fraction: vs.stats.max_clamp_fraction,
        max_a_star: vs.stats.max_a_star,
        substeps: vs.stats.substeps,
    }
}
