//! Monte Carlo reconstruction of the primal hedge from a solved value surface.
//!
//! Paths follow the Euler scheme `X_{k+1} = X_k + a_k√Δt·ξ_k` with `a_k` read
//! from the surface (or fixed, for stress tests). The portfolio is rolled as
//! `V_{k+1} = V_k + Y_k·ΔX_k + G(t_k, X_k, a_k)Δt` with `Y_k = ∇ₓv(t_k, X_k)`.
//!
//! Normals come from a ChaCha8 stream keyed by `(seed, unit)`, so results do not
//! depend on the number of worker threads. With antithetic sampling a unit is a
//! pair of paths sharing `±ξ`, and standard errors are computed over units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hjb::ValueSurface;
use crate::model::ImpactModel;
use crate::scalar::{pairwise_sum, Scalar};

const UNITS_PER_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig<T> {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub x0: T,
    pub antithetic: bool,
    /// Full trajectories are kept for the first `record_paths` paths.
    pub record_paths: usize,
    /// Largest tolerated fraction of paths leaving the surface domain.
    pub max_excluded_fraction: f64,
}

impl<T: Scalar> SimConfig<T> {
    pub fn new(n_paths: usize, n_steps: usize, seed: u64, x0: T) -> Self {
        SimConfig { n_paths, n_steps, seed, x0, antithetic: true, record_paths: 0, max_excluded_fraction: 0.01 }
    }

    fn unit_size(&self) -> usize {
        if self.antithetic {
            2
        } else {
            1
        }
    }

    /// Surface layers per simulation step.
    fn stride(&self, vs: &ValueSurface<T>) -> Result<usize> {
        let n = vs.grid.n_steps;
        if self.n_steps == 0 || !n.is_multiple_of(self.n_steps) {
            return Err(Error::Config(format!(
                "{} simulation steps do not divide the {n} surface steps",
                self.n_steps
            )));
        }
        if self.n_paths == 0 || (self.antithetic && !self.n_paths.is_multiple_of(2)) {
            return Err(Error::Config("antithetic sampling needs an even, positive path count".into()));
        }
        Ok(n / self.n_steps)
    }
}

/// Control followed by the simulated paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy<T> {
    /// Feedback `a*(t, x)` from the surface.
    Optimal,
    Constant(T),
}

/// One recorded trajectory, `n_steps + 1` nodes per field (`b_resid` and `alpha` have `n_steps`).
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord<T> {
    pub path_id: usize,
    pub t: Vec<T>,
    pub x: Vec<T>,
    pub alpha: Vec<T>,
    pub v_rollout: Vec<T>,
    pub v_surface: Vec<T>,
    pub y: Vec<T>,
    pub gamma: Vec<T>,
    pub b_resid: Vec<T>,
    pub cost: Vec<T>,
    pub excluded: bool,
}

/// Aggregated output of a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct HedgeLedger<T> {
    pub n_steps: usize,
    pub dt: T,
    pub v0: T,
    pub y0: T,
    /// Replication errors `V_N − Φ̂(X_N)` of included paths, in path order.
    pub errors: Vec<T>,
    /// Unit means of the replication error, used for standard errors.
    pub unit_errors: Vec<T>,
    pub n_paths: usize,
    pub excluded: usize,
    /// Sample mean and variance of the unit means of `M_k = v(t_k, X_k) − Σ G Δt`.
    pub martingale_mean: Vec<T>,
    pub martingale_var: Vec<T>,
    /// `mean |V_k − v(t_k, X_k)|` per step.
    pub tracking: Vec<T>,
    /// `mean (V_k − v(t_k, X_k))` per step.
    pub tracking_bias: Vec<T>,
    pub mean_abs_b_resid: T,
    pub mean_abs_dx: T,
    pub min_cost: T,
    pub zero_alpha_nodes: usize,
    pub records: Vec<PathRecord<T>>,
}

impl<T: Scalar> HedgeLedger<T> {
    pub fn included_units(&self) -> usize {
        self.unit_errors.len()
    }

    pub fn mean_error(&self) -> T {
        mean(&self.unit_errors)
    }

    /// Standard error of [`Self::mean_error`].
    pub fn error_se(&self) -> T {
        let n = self.unit_errors.len();
        if n < 2 {
            return T::zero();
        }
        let m = self.mean_error();
        let dev: Vec<T> = self.unit_errors.iter().map(|&e| (e - m) * (e - m)).collect();
        (pairwise_sum(&dev) / T::from_usize_lossy(n - 1) / T::from_usize_lossy(n)).sqrt()
    }

    pub fn error_std(&self) -> T {
        let n = self.errors.len();
        if n < 2 {
            return T::zero();
        }
        let m = mean(&self.errors);
        let dev: Vec<T> = self.errors.iter().map(|&e| (e - m) * (e - m)).collect();
        (pairwise_sum(&dev) / T::from_usize_lossy(n - 1)).sqrt()
    }

    pub fn mean_abs_error(&self) -> T {
        let abs: Vec<T> = self.errors.iter().map(|e| e.abs()).collect();
        mean(&abs)
    }

    /// Empirical quantiles of the replication error (nearest rank).
    pub fn error_quantiles(&self, probs: &[f64]) -> Vec<T> {
        let mut sorted = self.errors.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
        probs
            .iter()
            .map(|&p| {
                if sorted.is_empty() {
                    return T::nan();
                }
                let idx = ((p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64).round()) as usize;
                sorted[idx]
            })
            .collect()
    }

    pub fn excluded_fraction(&self) -> f64 {
        self.excluded as f64 / self.n_paths.max(1) as f64
    }

    pub fn max_tracking(&self) -> T {
        self.tracking.iter().fold(T::zero(), |m, &v| m.max(v))
    }
}

fn mean<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        T::nan()
    } else {
        pairwise_sum(xs) / T::from_usize_lossy(xs.len())
    }
}

struct PathOutcome<T> {
    excluded: bool,
    error: T,
    m: Vec<T>,
    tracking: Vec<T>,
    gap: Vec<T>,
    abs_b: T,
    abs_dx: T,
    cost: T,
    zero_alpha: usize,
    record: Option<PathRecord<T>>,
}

pub(crate) fn normals(seed: u64, unit: usize, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(unit as u64);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[allow(clippy::too_many_arguments)]
fn run_path<T: Scalar>(
    vs: &ValueSurface<T>,
    model: &ImpactModel<T>,
    cfg: &SimConfig<T>,
    policy: Policy<T>,
    stride: usize,
    path_id: usize,
    xi: &[f64],
    sign: f64,
) -> PathOutcome<T> {
    let n = cfg.n_steps;
    let dt = vs.grid.maturity / T::from_usize_lossy(n);
    let sq = dt.sqrt();
    let space = &vs.grid.space;
    let record = path_id < cfg.record_paths;

    let mut x = cfg.x0;
    let v0 = vs.value(0, x);
    let mut v_roll = v0;
    let mut y = vs.gradient(0, x);
    let mut cost = T::zero();
    let mut m = Vec::with_capacity(n + 1);
    let mut tracking = Vec::with_capacity(n + 1);
    let mut gap = Vec::with_capacity(n + 1);
    m.push(v0);
    tracking.push(T::zero());
    gap.push(T::zero());
    let (mut abs_b, mut abs_dx) = (T::zero(), T::zero());
    let mut zero_alpha = 0;
    let mut rec = record.then(|| PathRecord {
        path_id,
        t: vec![T::zero()],
        x: vec![x],
        alpha: Vec::with_capacity(n),
        v_rollout: vec![v0],
        v_surface: vec![v0],
        y: vec![y],
        gamma: Vec::with_capacity(n),
        b_resid: Vec::with_capacity(n),
        cost: vec![T::zero()],
        excluded: false,
    });

    for k in 0..n {
        let ks = k * stride;
        let t = vs.grid.time(ks);
        let a = match policy {
            Policy::Optimal => vs.control(ks, x).max(T::zero()),
            Policy::Constant(c) => c,
        };
        if a.is_zero() {
            zero_alpha += 1;
        }
        let gamma = model.sigma_inverse(t, x, a).map(|g| g.to_float()).unwrap_or(T::nan());
        let dx = a * sq * T::lit(sign * xi[k]);
        let x_next = x + dx;
        if !space.contains(x_next) {
            if let Some(r) = rec.as_mut() {
                r.excluded = true;
            }
            return PathOutcome {
                excluded: true,
                error: T::nan(),
                m,
                tracking,
                gap,
                abs_b,
                abs_dx,
                cost,
                zero_alpha,
                record: rec,
            };
        }
        let g = model.running_cost(t, x, a) * dt;
        v_roll = v_roll + y * dx + g;
        cost = cost + g;
        let y_next = vs.gradient(ks + stride, x_next);
        let b = y + gamma * dx - y_next;
        if b.is_finite() {
            abs_b = abs_b + b.abs();
        }
        abs_dx = abs_dx + dx.abs();
        let v_surf = vs.value(ks + stride, x_next);
        m.push(v_surf - cost);
        tracking.push((v_roll - v_surf).abs());
        gap.push(v_roll - v_surf);
        if let Some(r) = rec.as_mut() {
            r.t.push(vs.grid.time(ks + stride));
            r.x.push(x_next);
            r.alpha.push(a);
            r.v_rollout.push(v_roll);
            r.v_surface.push(v_surf);
            r.y.push(y_next);
            r.gamma.push(gamma);
            r.b_resid.push(b);
            r.cost.push(cost);
        }
        x = x_next;
        y = y_next;
    }
    let error = v_roll - vs.value(vs.grid.n_steps, x);
    PathOutcome { excluded: false, error, m, tracking, gap, abs_b, abs_dx, cost, zero_alpha, record: rec }
}

struct PathSummary<T> {
    excluded: bool,
    error: T,
    abs_b: T,
    abs_dx: T,
    cost: T,
    zero_alpha: usize,
    record: Option<PathRecord<T>>,
}

struct ChunkSums<T> {
    m_sum: Vec<T>,
    m_sq: Vec<T>,
    tracking: Vec<T>,
    gap: Vec<T>,
}

impl<T: Scalar> ChunkSums<T> {
    fn new(n: usize) -> Self {
        ChunkSums {
            m_sum: vec![T::zero(); n + 1],
            m_sq: vec![T::zero(); n + 1],
            tracking: vec![T::zero(); n + 1],
            gap: vec![T::zero(); n + 1],
        }
    }

    fn add_unit(&mut self, paths: &[PathOutcome<T>]) {
        let w = T::one() / T::from_usize_lossy(paths.len());
        for k in 0..self.m_sum.len() {
            let mk = paths.iter().fold(T::zero(), |acc, p| acc + p.m[k]) * w;
            self.m_sum[k] = self.m_sum[k] + mk;
            self.m_sq[k] = self.m_sq[k] + mk * mk;
            for p in paths {
                self.tracking[k] = self.tracking[k] + p.tracking[k];
                self.gap[k] = self.gap[k] + p.gap[k];
            }
        }
    }
}

/// Simulates `cfg.n_paths` paths under `policy` and rolls the hedge forward.
pub fn simulate<T: Scalar>(
    vs: &ValueSurface<T>,
    model: &ImpactModel<T>,
    cfg: &SimConfig<T>,
    policy: Policy<T>,
) -> Result<HedgeLedger<T>> {
    let stride = cfg.stride(vs)?;
    if !vs.grid.space.contains(cfg.x0) {
        return Err(Error::Domain(format!("x0 = {} outside the surface domain", cfg.x0)));
    }
    let n = cfg.n_steps;
    let g = cfg.unit_size();
    let n_units = cfg.n_paths / g;
    let n_chunks = n_units.div_ceil(UNITS_PER_CHUNK);

    // per-step vectors are folded into chunk sums immediately to bound memory
    let chunks: Vec<(Vec<Vec<PathSummary<T>>>, ChunkSums<T>)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut sums = ChunkSums::new(n);
            let units = (c * UNITS_PER_CHUNK..((c + 1) * UNITS_PER_CHUNK).min(n_units))
                .map(|u| {
                    let xi = normals(cfg.seed, u, n);
                    let paths: Vec<PathOutcome<T>> = (0..g)
                        .map(|j| {
                            let sign = if j == 1 { -1.0 } else { 1.0 };
                            run_path(vs, model, cfg, policy, stride, u * g + j, &xi, sign)
                        })
                        .collect();
                    if paths.iter().all(|p| !p.excluded) {
                        sums.add_unit(&paths);
                    }
                    paths
                        .into_iter()
                        .map(|p| PathSummary {
                            excluded: p.excluded,
                            error: p.error,
                            abs_b: p.abs_b,
                            abs_dx: p.abs_dx,
                            cost: p.cost,
                            zero_alpha: p.zero_alpha,
                            record: p.record,
                        })
                        .collect()
                })
                .collect();
            (units, sums)
        })
        .collect();

    let mut errors = Vec::new();
    let mut unit_errors = Vec::new();
    let mut abs_b = Vec::new();
    let mut abs_dx = Vec::new();
    let mut records = Vec::new();
    let mut excluded = 0;
    let mut min_cost = T::infinity();
    let mut zero_alpha_nodes = 0;
    for (units, _) in &chunks {
        for u in units {
            for p in u {
                zero_alpha_nodes += p.zero_alpha;
                if let Some(r) = &p.record {
                    records.push(r.clone());
                }
            }
            if u.iter().any(|p| p.excluded) {
                excluded += u.len();
                continue;
            }
            let mut ue = T::zero();
            for p in u {
                errors.push(p.error);
                abs_b.push(p.abs_b);
                abs_dx.push(p.abs_dx);
                min_cost = min_cost.min(p.cost);
                ue = ue + p.error;
            }
            unit_errors.push(ue / T::from_usize_lossy(u.len()));
        }
    }
    let n_units_in = unit_errors.len();
    let frac = excluded as f64 / cfg.n_paths as f64;
    if frac > cfg.max_excluded_fraction {
        return Err(Error::DomainTooSmall(format!("{:.2}% of paths left the surface domain", 100.0 * frac)));
    }
    let per_step = |f: &dyn Fn(&ChunkSums<T>) -> &Vec<T>, k: usize| -> T {
        let parts: Vec<T> = chunks.iter().map(|(_, s)| f(s)[k]).collect();
        pairwise_sum(&parts)
    };
    let nu = T::from_usize_lossy(n_units_in.max(1));
    let n_in = T::from_usize_lossy(errors.len().max(1));
    let mut martingale_mean = Vec::with_capacity(n + 1);
    let mut martingale_var = Vec::with_capacity(n + 1);
    let mut tracking = Vec::with_capacity(n + 1);
    let mut tracking_bias = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let s = per_step(&|c| &c.m_sum, k);
        let q = per_step(&|c| &c.m_sq, k);
        let mu = s / nu;
        let var = if n_units_in > 1 { ((q - nu * mu * mu) / (nu - T::one())).max(T::zero()) } else { T::zero() };
        martingale_mean.push(mu);
        martingale_var.push(var);
        tracking.push(per_step(&|c| &c.tracking, k) / n_in);
        tracking_bias.push(per_step(&|c| &c.gap, k) / n_in);
    }
    let steps = T::from_usize_lossy(n);
    Ok(HedgeLedger {
        n_steps: n,
        dt: vs.grid.maturity / steps,
        v0: vs.value(0, cfg.x0),
        y0: vs.gradient(0, cfg.x0),
        mean_abs_b_resid: mean(&abs_b) / steps,
        mean_abs_dx: mean(&abs_dx) / steps,
        errors,
        unit_errors,
        n_paths: cfg.n_paths,
        excluded,
        martingale_mean,
        martingale_var,
        tracking,
        tracking_bias,
        min_cost,
        zero_alpha_nodes,
        records,
    })
}

/// [`simulate`] under the surface's optimal feedback control.
pub fn simulate_optimal<T: Scalar>(
    vs: &ValueSurface<T>,
    model: &ImpactModel<T>,
    cfg: &SimConfig<T>,
) -> Result<HedgeLedger<T>> {
    simulate(vs, model, cfg, Policy::Optimal)
}

/// Maps every simulated path `(x_0..x_N, a_0..a_{N−1})` through `stat` without storing it.
///
/// Returns one value per sampling unit (the mean over an antithetic pair), in unit
/// order, and the number of excluded paths.
pub fn path_statistic<T, F>(
    vs: &ValueSurface<T>,
    cfg: &SimConfig<T>,
    policy: Policy<T>,
    stat: F,
) -> Result<(Vec<T>, usize)>
where
    T: Scalar,
    F: Fn(&[T], &[T]) -> T + Sync,
{
    let stride = cfg.stride(vs)?;
    let n = cfg.n_steps;
    let g = cfg.unit_size();
    let dt = vs.grid.maturity / T::from_usize_lossy(n);
    let sq = dt.sqrt();
    let units: Vec<Option<T>> = (0..cfg.n_paths / g)
        .into_par_iter()
        .with_min_len(UNITS_PER_CHUNK)
        .map(|u| {
            let xi = normals(cfg.seed, u, n);
            let mut acc = T::zero();
            for j in 0..g {
                let sign = if j == 1 { -1.0 } else { 1.0 };
                let mut x = Vec::with_capacity(n + 1);
                let mut a = Vec::with_capacity(n);
                x.push(cfg.x0);
                for k in 0..n {
                    let xk = x[k];
                    let ak = match policy {
                        Policy::Optimal => vs.control(k * stride, xk).max(T::zero()),
                        Policy::Constant(c) => c,
                    };
                    let next = xk + ak * sq * T::lit(sign * xi[k]);
                    if !vs.grid.space.contains(next) {
                        return None;
                    }
                    a.push(ak);
                    x.push(next);
                }
                acc = acc + stat(&x, &a);
            }
            Some(acc / T::from_usize_lossy(g))
        })
        .collect();
    let excluded = units.iter().filter(|u| u.is_none()).count() * g;
    if excluded as f64 > cfg.max_excluded_fraction * cfg.n_paths as f64 {
        return Err(Error::DomainTooSmall(format!("{excluded} of {} paths left the surface domain", cfg.n_paths)));
    }
    Ok((units.into_iter().flatten().collect(), excluded))
}

/// Sample mean and its standard error.
pub fn mean_and_se<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return (m, T::zero());
    }
    let dev: Vec<T> = xs.iter().map(|&x| (x - m) * (x - m)).collect();
    (m, (pairwise_sum(&dev) / T::from_usize_lossy(n - 1) / T::from_usize_lossy(n)).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport {
    /// `max_k |mean(M_k) − v(0, x₀)|` and the standard error at that step.
    pub max_deviation: f64,
    pub se_at_max: f64,
    pub step_at_max: usize,
    /// Most negative `(mean(M_k) − v(0, x₀)) / SE_k` over steps with positive SE.
    pub min_z: f64,
    /// Time-discretisation allowance `Δt·sup G(·, 0)`.
    pub allowance: f64,
    pub passes: bool,
    pub supermartingale_detected: bool,
}

/// Tests whether `v(t, X) − ∫G` behaves as a martingale along simulated paths.
pub fn martingale_check<T: Scalar>(
    vs: &ValueSurface<T>,
    model: &ImpactModel<T>,
    cfg: &SimConfig<T>,
    policy: Policy<T>,
) -> Result<(MartingaleReport, HedgeLedger<T>)> {
    let ledger = simulate(vs, model, cfg, policy)?;
    Ok((martingale_report(&ledger, vs, model), ledger))
}

pub fn martingale_report<T: Scalar>(
    ledger: &HedgeLedger<T>,
    vs: &ValueSurface<T>,
    model: &ImpactModel<T>,
) -> MartingaleReport {
    let n_units = ledger.included_units().max(1) as f64;
    let mut sup_g0 = T::zero();
    for k in 0..vs.grid.n_steps {
        let t = vs.grid.time(k);
        for x in vs.grid.space.nodes() {
            sup_g0 = sup_g0.max(model.running_cost(t, x, T::zero()));
        }
    }
    let allowance = (ledger.dt * sup_g0).as_f64();
    let v0 = ledger.v0.as_f64();
    let mut rep = MartingaleReport {
        max_deviation: 0.0,
        se_at_max: 0.0,
        step_at_max: 0,
        min_z: 0.0,
        allowance,
        passes: true,
        supermartingale_detected: false,
    };
    for k in 0..=ledger.n_steps {
        let dev = ledger.martingale_mean[k].as_f64() - v0;
        let se = (ledger.martingale_var[k].as_f64() / n_units).sqrt();
        if dev.abs() > rep.max_deviation {
            rep.max_deviation = dev.abs();
            rep.se_at_max = se;
            rep.step_at_max = k;
        }
        if dev.abs() > 3.0 * se + allowance {
            rep.passes = false;
        }
        if se > 0.0 {
            rep.min_z = rep.min_z.min(dev / se);
        }
    }
    rep.supermartingale_detected = rep.min_z <= -5.0;
    rep
}

/// Identity checks between the volatility `α`, the trading rate `a = (α − σ₀)/f`
/// and the gamma `γ̂ = a/α`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalReport {
    pub nodes: usize,
    pub max_identity_error: f64,
    pub max_gamma_error: f64,
    pub zero_alpha_nodes: usize,
}

pub fn primal_consistency<T: Scalar>(ledger: &HedgeLedger<T>, model: &ImpactModel<T>) -> Result<PrimalReport> {
    if !model.is_benchmark() {
        return Err(Error::InvalidModel("the trading-rate identities need the benchmark cost".into()));
    }
    let mut rep = PrimalReport {
        nodes: 0,
        max_identity_error: 0.0,
        max_gamma_error: 0.0,
        zero_alpha_nodes: ledger.zero_alpha_nodes,
    };
    for r in &ledger.records {
        for k in 0..r.alpha.len() {
            let (t, x, alpha) = (r.t[k], r.x[k], r.alpha[k]);
            let (s, f) = (model.sigma0(t, x), model.impact(x));
            let a = (alpha - s) / f;
            rep.max_identity_error = rep.max_identity_error.max((s + a * f - alpha).abs().as_f64());
            if !alpha.is_zero() {
                let g = a / alpha;
                rep.max_gamma_error = rep.max_gamma_error.max((g - r.gamma[k]).abs().as_f64());
            }
            rep.nodes += 1;
        }
    }
    Ok(rep)
}

/// Slope of `log y` against `log Δt` between two resolutions.
pub fn scaling_exponent(dt_coarse: f64, y_coarse: f64, dt_fine: f64, y_fine: f64) -> f64 {
    (y_coarse / y_fine).ln() / (dt_coarse / dt_fine).ln()
}
