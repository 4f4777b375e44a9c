//! Markov-chain dynamic programming for the weak dual control problem.
//!
//! One step moves the price by `±a√Δt` with probability ½ each (a martingale
//! with exact variance `a²Δt`) and charges `G(t_k, x, a)Δt`:
//!
//! ```text
//! v_k(x, m) = max_a { ½[v_{k+1}(x + a√Δt, m') + v_{k+1}(x − a√Δt, m')] − G(t_k, x, a)Δt }
//! ```
//!
//! with `m' = m + x·μ([t_k, t_{k+1}))` for Asian payoffs. Off-grid values are
//! interpolated linearly (bilinearly with an average axis). Leaving the price
//! grid extrapolates linearly and is counted; the average axis is clipped.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::facelift::{convex_shift_values, facelift_checked, ConvexShift, TerminalGrid};
use crate::grid::UniformGrid;
use crate::model::ImpactModel;
use crate::payoff::PayoffSpec;
use crate::scalar::Scalar;

/// Admissible volatilities, sorted, non-negative, containing 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid<T> {
    values: Vec<T>,
}

impl<T: Scalar> ControlGrid<T> {
    pub fn new(mut values: Vec<T>) -> Result<Self> {
        if values.iter().any(|a| !(*a >= T::zero()) || !a.is_finite()) {
            return Err(Error::Domain("controls must be finite and non-negative".into()));
        }
        if !values.iter().any(|a| a.is_zero()) {
            values.push(T::zero());
        }
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite controls"));
        values.dedup();
        Ok(ControlGrid { values })
    }

    /// `n_fine` uniform values on `[0, a_fine]` followed by `n_tail` geometric values up to `a_max`.
    pub fn layered(a_fine: T, n_fine: usize, a_max: T, n_tail: usize) -> Result<Self> {
        if n_fine < 2 || !(a_fine > T::zero()) {
            return Err(Error::Config("control grid needs a_fine > 0 and n_fine >= 2".into()));
        }
        let mut values: Vec<T> =
            (0..n_fine).map(|i| a_fine * T::from_usize_lossy(i) / T::from_usize_lossy(n_fine - 1)).collect();
        if a_max > a_fine && n_tail > 0 {
            let ratio = (a_max / a_fine).ln() / T::from_usize_lossy(n_tail);
            values.extend((1..=n_tail).map(|j| a_fine * (ratio * T::from_usize_lossy(j)).exp()));
        }
        Self::new(values)
    }

    /// Default grid for a model: fine part up to `5·sup σ₀`, geometric tail up to
    /// `5·sup σ₀ / (f·ε)`.
    pub fn for_model(model: &ImpactModel<T>, n_fine: usize, n_tail: usize) -> Result<Self> {
        let five = T::lit(5.0);
        let a_fine = five * model.sup_base_volatility();
        let a_max = five * model.clamped_argmax_bound();
        Self::layered(a_fine, n_fine, a_max, n_tail)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn a_max(&self) -> T {
        *self.values.last().expect("non-empty")
    }

    /// Largest gap between consecutive controls not exceeding `upto`.
    pub fn spacing_below(&self, upto: T) -> T {
        self.values.windows(2).filter(|w| w[1] <= upto).fold(T::zero(), |m, w| m.max(w[1] - w[0]))
    }
}

/// Time grid, price grid and number of average nodes (1 for Markovian payoffs).
#[derive(Debug, Clone, PartialEq)]
pub struct DpGrid<T> {
    pub maturity: T,
    pub n_steps: usize,
    pub space: UniformGrid<T>,
    pub n_avg: usize,
}

impl<T: Scalar> DpGrid<T> {
    pub fn new(maturity: T, n_steps: usize, space: UniformGrid<T>, n_avg: usize) -> Result<Self> {
        if n_steps < 1 || !(maturity > T::zero()) {
            return Err(Error::Config("dp time grid needs T > 0 and at least one step".into()));
        }
        Ok(DpGrid { maturity, n_steps, space, n_avg: n_avg.max(1) })
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
pub struct DpOptions<T> {
    /// Add `σ₀(t_k, x)` to the candidate set at every node.
    pub include_base_volatility: bool,
    /// Largest tolerated fraction of optimal transitions leaving the price grid.
    pub max_extrapolation_fraction: T,
    pub shift: ConvexShift,
}

impl<T: Scalar> Default for DpOptions<T> {
    fn default() -> Self {
        DpOptions {
            include_base_volatility: true,
            max_extrapolation_fraction: T::lit(0.05),
            shift: ConvexShift::default(),
        }
    }
}

/// Value and policy tables, indexed `[layer][avg][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DpSolution<T> {
    pub grid: DpGrid<T>,
    /// Average axis, `None` when the payoff has no running average.
    pub avg_axis: Option<UniformGrid<T>>,
    pub values: Vec<T>,
    pub policy: Vec<T>,
    pub extrapolations: usize,
    pub clipped_averages: usize,
    pub saturated: usize,
    pub evaluations: usize,
}

impl<T: Scalar> DpSolution<T> {
    fn layer_len(&self) -> usize {
        self.grid.n_avg * self.grid.space.len()
    }

    pub fn value_layer(&self, k: usize) -> &[T] {
        let n = self.layer_len();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn policy_layer(&self, k: usize) -> &[T] {
        let n = self.layer_len();
        &self.policy[k * n..(k + 1) * n]
    }

    /// Value at layer `k`, price `x`, average `m` (ignored without an average axis).
    pub fn value_at(&self, k: usize, x: T, m: T) -> T {
        interp2(&self.grid.space, self.avg_axis.as_ref(), self.value_layer(k), x, m).0
    }

    pub fn policy_at(&self, k: usize, x: T, m: T) -> T {
        interp2(&self.grid.space, self.avg_axis.as_ref(), self.policy_layer(k), x, m).0
    }

    pub fn extrapolation_fraction(&self) -> f64 {
        self.extrapolations as f64 / self.evaluations.max(1) as f64
    }
}

/// Bilinear interpolation on `[avg][x]` data; linear extrapolation in `x`, clipping in `m`.
/// Returns the value and whether `m` was clipped.
fn interp2<T: Scalar>(space: &UniformGrid<T>, avg: Option<&UniformGrid<T>>, data: &[T], x: T, m: T) -> (T, bool) {
    let nx = space.len();
    let (i, w) = space.locate(x);
    let row = |j: usize| {
        let r = &data[j * nx..(j + 1) * nx];
        r[i] + w * (r[i + 1] - r[i])
    };
    match avg {
        None => (row(0), false),
        Some(ax) => {
            let clipped = m < ax.lo() || m > ax.hi();
            let mc = m.max(ax.lo()).min(ax.hi());
            let (j, u) = ax.locate(mc);
            let (a, b) = (row(j), row(j + 1));
            (a + u * (b - a), clipped)
        }
    }
}

/// Average axis for a payoff: `[min(0, M·x_lo), max(0, M·x_hi)]` with `M = μ([0, T))`.
pub fn average_axis<T: Scalar>(
    payoff: &PayoffSpec<T>,
    space: &UniformGrid<T>,
    n_avg: usize,
) -> Result<Option<UniformGrid<T>>> {
    let mass = T::one() - payoff.terminal_weight();
    if payoff.is_markovian() || mass <= T::zero() || n_avg < 2 {
        return Ok(None);
    }
    let lo = (mass * space.lo()).min(T::zero());
    let hi = (mass * space.hi()).max(T::zero());
    Ok(Some(UniformGrid::new(lo, hi, n_avg)?))
}

/// Face-lifted terminal layer `[avg][x]`.
pub fn terminal_layer<T: Scalar>(
    model: &ImpactModel<T>,
    payoff: &PayoffSpec<T>,
    grid: &DpGrid<T>,
    avg_axis: Option<&UniformGrid<T>>,
    shift: ConvexShift,
) -> Result<Vec<T>> {
    let xs = grid.space.nodes();
    let gamma = convex_shift_values(model, grid.maturity, &xs, shift);
    let ms: Vec<T> = match avg_axis {
        Some(ax) => ax.nodes(),
        None => vec![T::zero()],
    };
    let mut out = Vec::with_capacity(ms.len() * xs.len());
    for &m in &ms {
        let phi: Vec<T> = xs.iter().map(|&x| payoff.evaluate_augmented(m, x)).collect();
        let tg = TerminalGrid::new(xs.clone(), phi, gamma.clone())?;
        out.extend(facelift_checked(&tg)?);
    }
    Ok(out)
}

struct StepOutcome<T> {
    values: Vec<T>,
    policy: Vec<T>,
    extrapolations: usize,
    clipped: usize,
    saturated: usize,
}

/// One backward step from `next` (layer `k + 1`) to layer `k`.
fn backward_step<T: Scalar>(
    model: &ImpactModel<T>,
    grid: &DpGrid<T>,
    avg_axis: Option<&UniformGrid<T>>,
    controls: &ControlGrid<T>,
    opts: &DpOptions<T>,
    interval_weight: T,
    k: usize,
    next: &[T],
) -> StepOutcome<T> {
    let nx = grid.space.len();
    let n_avg = grid.n_avg;
    let dt = grid.dt();
    let sq = dt.sqrt();
    let t = grid.time(k);
    let half = T::lit(0.5);
    let a_max = controls.a_max();
    let ms: Vec<T> = match avg_axis {
        Some(ax) => ax.nodes(),
        None => vec![T::zero()],
    };
    let (lo, hi) = (grid.space.lo(), grid.space.hi());

    let node = |idx: usize| -> (T, T, bool, bool, bool) {
        let (j, i) = (idx / nx, idx % nx);
        let x = grid.space.node(i);
        let m_next = ms[j] + x * interval_weight;
        let mut best = T::neg_infinity();
        let mut best_a = T::zero();
        let mut best_clip = false;
        let mut consider = |a: T| {
            let (up, c1) = interp2(&grid.space, avg_axis, next, x + a * sq, m_next);
            let (dn, c2) = interp2(&grid.space, avg_axis, next, x - a * sq, m_next);
            let val = half * (up + dn) - model.running_cost(t, x, a) * dt;
            if val > best {
                best = val;
                best_a = a;
                best_clip = c1 || c2;
            }
        };
        for &a in controls.values() {
            consider(a);
        }
        if opts.include_base_volatility {
            consider(model.sigma0(t, x));
        }
        let spread = best_a * sq;
        let out = x + spread > hi || x - spread < lo;
        (best, best_a, out, best_clip, best_a >= a_max)
    };

    let total = nx * n_avg;
    let results: Vec<(T, T, bool, bool, bool)> = (0..total).into_par_iter().with_min_len(64).map(node).collect();
    let mut outcome = StepOutcome {
        values: Vec::with_capacity(total),
        policy: Vec::with_capacity(total),
        extrapolations: 0,
        clipped: 0,
        saturated: 0,
    };
    for (v, a, out, clip, sat) in results {
        outcome.values.push(v);
        outcome.policy.push(a);
        outcome.extrapolations += out as usize;
        outcome.clipped += clip as usize;
        outcome.saturated += sat as usize;
    }
    outcome
}

/// Backward recursion over layers `k_end − 1, …, k_start` starting from `terminal` at `k_end`.
fn recurse<T: Scalar>(
    model: &ImpactModel<T>,
    payoff: &PayoffSpec<T>,
    grid: &DpGrid<T>,
    avg_axis: Option<UniformGrid<T>>,
    controls: &ControlGrid<T>,
    opts: &DpOptions<T>,
    terminal: Vec<T>,
    k_start: usize,
    k_end: usize,
) -> Result<DpSolution<T>> {
    let layer = grid.n_avg * grid.space.len();
    let n_layers = grid.n_steps + 1;
    let mut values = vec![T::zero(); n_layers * layer];
    let policy = vec![T::zero(); n_layers * layer];
    values[k_end * layer..(k_end + 1) * layer].copy_from_slice(&terminal);
    let w = payoff.interval_weight(grid.n_steps);
    let mut sol = DpSolution {
        grid: grid.clone(),
        avg_axis,
        values,
        policy,
        extrapolations: 0,
        clipped_averages: 0,
        saturated: 0,
        evaluations: 0,
    };
    for k in (k_start..k_end).rev() {
        let next = sol.values[(k + 1) * layer..(k + 2) * layer].to_vec();
        let step = backward_step(model, grid, sol.avg_axis.as_ref(), controls, opts, w, k, &next);
        sol.values[k * layer..(k + 1) * layer].copy_from_slice(&step.values);
        sol.policy[k * layer..(k + 1) * layer].copy_from_slice(&step.policy);
        sol.extrapolations += step.extrapolations;
        sol.clipped_averages += step.clipped;
        sol.saturated += step.saturated;
        sol.evaluations += layer;
    }
    if sol.extrapolation_fraction() > opts.max_extrapolation_fraction.as_f64() {
        return Err(Error::DomainTooSmall(format!(
            "{:.2}% of optimal transitions leave the price grid",
            100.0 * sol.extrapolation_fraction()
        )));
    }
    Ok(sol)
}

/// Solves the dual problem on `grid` with the face-lifted payoff as terminal layer.
pub fn solve_dp<T: Scalar>(
    model: &ImpactModel<T>,
    payoff: &PayoffSpec<T>,
    grid: &DpGrid<T>,
    controls: &ControlGrid<T>,
    opts: &DpOptions<T>,
) -> Result<DpSolution<T>> {
    payoff.validate()?;
    let axis = average_axis(payoff, &grid.space, grid.n_avg)?;
    let grid = DpGrid { n_avg: axis.as_ref().map_or(1, |a| a.len()), ..grid.clone() };
    let terminal = terminal_layer(model, payoff, &grid, axis.as_ref(), opts.shift)?;
    recurse(model, payoff, &grid, axis, controls, opts, terminal, 0, grid.n_steps)
}

/// Dynamic-programming residual at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DppResidual {
    pub split_step: usize,
    pub handover_shift: f64,
    pub residual: f64,
    pub compared_nodes: usize,
}

/// Solves on `[t_split, T]`, hands the `t_split` layer over as terminal data for a
/// solve on `[0, t_split]`, and compares with the one-shot `t = 0` layer.
///
/// `handover_shift` (in cells) moves the price grid of the second leg, so that the
/// hand-over goes through interpolation; with 0 the composition reuses the grid.
pub fn check_dpp<T: Scalar>(
    model: &ImpactModel<T>,
    payoff: &PayoffSpec<T>,
    grid: &DpGrid<T>,
    controls: &ControlGrid<T>,
    opts: &DpOptions<T>,
    split_step: usize,
    handover_shift: T,
) -> Result<DppResidual> {
    if split_step > grid.n_steps {
        return Err(Error::Domain(format!("split step {split_step} beyond {}", grid.n_steps)));
    }
    let one_shot = solve_dp(model, payoff, grid, controls, opts)?;
    let grid = one_shot.grid.clone();
    let axis = one_shot.avg_axis.clone();
    let terminal = terminal_layer(model, payoff, &grid, axis.as_ref(), opts.shift)?;
    let late = recurse(model, payoff, &grid, axis.clone(), controls, opts, terminal, split_step, grid.n_steps)?;
    let handover = late.value_layer(split_step);

    let shift = handover_shift * grid.space.step();
    let space2 = UniformGrid::new(grid.space.lo() + shift, grid.space.hi() + shift, grid.space.len())?;
    let grid2 = DpGrid { space: space2.clone(), ..grid.clone() };
    let ms: Vec<T> = axis.as_ref().map_or(vec![T::zero()], |a| a.nodes());
    let start = if handover_shift.is_zero() {
        handover.to_vec()
    } else {
        let mut start = Vec::with_capacity(handover.len());
        for &m in &ms {
            for x in space2.nodes() {
                start.push(interp2(&grid.space, axis.as_ref(), handover, x, m).0);
            }
        }
        start
    };
    let early = recurse(model, payoff, &grid2, axis.clone(), controls, opts, start, 0, split_step)?;

    let mut residual = T::zero();
    let mut compared = 0;
    for &m in &ms {
        for x in space2.nodes() {
            if !grid.space.contains(x) {
                continue;
            }
            let a = early.value_at(0, x, m);
            let b = one_shot.value_at(0, x, m);
            residual = residual.max((a - b).abs());
            compared += 1;
        }
    }
    Ok(DppResidual {
        split_step,
        handover_shift: handover_shift.as_f64(),
        residual: residual.as_f64(),
        compared_nodes: compared,
    })
}
