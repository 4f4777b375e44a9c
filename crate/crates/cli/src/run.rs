//! Command pipelines. Each stage writes its artifacts; `all` runs every stage in
//! order and shares the solved surfaces between them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use impakt_core::dp::{check_dpp, solve_dp, ControlGrid, DpGrid, DpOptions, DpSolution};
use impakt_core::facelift::{facelift_checked, TerminalGrid};
use impakt_core::functional::{
    compute_a, frechet_bound, ito_residuals, ito_tolerance, martingale_paths, monotonicity_report, ConcaveFamily,
    CostFrechet, MonotonicityReport, PathFunctional, WithGradient,
};
use impakt_core::grid::UniformGrid;
use impakt_core::hedge::{
    martingale_check, martingale_report, mean_and_se, path_statistic, primal_consistency, scaling_exponent,
    simulate_optimal, MartingaleReport, Policy, SimConfig,
};
use impakt_core::hjb::{check_cfl, diagnostics, solve, HjbOptions, SolverGrid, ValueSurface};
use impakt_core::payoff::{PayoffSpec, TerminalPayoff};

use crate::config::ExperimentConfig;
use crate::output::{thin_layers, ArtifactDir};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Facelift,
    SolveHjb,
    SolveDp,
    DualityCheck,
    Hedge,
    FunctionalCheck,
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Facelift => "facelift",
            Command::SolveHjb => "solve-hjb",
            Command::SolveDp => "solve-dp",
            Command::DualityCheck => "duality-check",
            Command::Hedge => "hedge",
            Command::FunctionalCheck => "functional-check",
            Command::All => "all",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub command: Command,
    pub config: PathBuf,
    pub strict: bool,
    pub out: Option<PathBuf>,
}

const DEFAULT_OUT: &str = "impakt-out";
const DPP_THRESHOLD: f64 = 5e-3;
const LAW_TOLERANCE: f64 = 1e-8;
const AFFINE_TOLERANCE: f64 = 1e-12;
const MAX_EXCEEDING_FRACTION: f64 = 0.01;
const PRIMAL_PATHS: usize = 64;

#[derive(Serialize)]
struct Seeds {
    sim: Option<u64>,
    functional: Option<u64>,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    code_version: &'static str,
    config_path: String,
    config_sha256: Option<String>,
    strict: bool,
    status: &'static str,
    exit_code: i32,
    error: Option<String>,
    seeds: Seeds,
    health_failures: Vec<String>,
    skipped: Vec<String>,
    artifacts: Vec<String>,
    summary: BTreeMap<String, f64>,
    wall_times: BTreeMap<String, f64>,
}

fn status(err: Option<&CliError>) -> &'static str {
    match err {
        None => "ok",
        Some(CliError::Config(_)) => "config-error",
        Some(CliError::Precondition(_)) => "precondition-violation",
        Some(CliError::Health(_)) => "health-failure",
        Some(CliError::Io(_)) => "io-error",
    }
}

fn functional_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15)
}

/// Runs `opts.command`; returns the artifact directory. `manifest.json` is written
/// whenever the directory can be created, also on failure.
pub fn run(opts: &RunOptions) -> Result<PathBuf, CliError> {
    let bytes = std::fs::read(&opts.config);
    let hash = bytes.as_ref().ok().map(|b| Sha256::digest(b).iter().map(|x| format!("{x:02x}")).collect::<String>());
    let base = opts.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let parsed = match &bytes {
        Ok(b) => std::str::from_utf8(b)
            .map_err(|_| CliError::Config("config is not valid UTF-8".into()))
            .and_then(|text| ExperimentConfig::parse(text, &base)),
        Err(e) => Err(CliError::Config(format!("cannot read {}: {e}", opts.config.display()))),
    };
    let out_dir = opts
        .out
        .clone()
        .or_else(|| parsed.as_ref().ok().and_then(|c| c.outputs.dir.clone()))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let mut out = ArtifactDir::create(&out_dir)?;

    let mut manifest = Manifest {
        command: opts.command.name().into(),
        code_version: env!("CARGO_PKG_VERSION"),
        config_path: opts.config.display().to_string(),
        config_sha256: hash,
        strict: opts.strict,
        status: "ok",
        exit_code: 0,
        error: None,
        seeds: Seeds { sim: None, functional: None },
        health_failures: Vec::new(),
        skipped: Vec::new(),
        artifacts: Vec::new(),
        summary: BTreeMap::new(),
        wall_times: BTreeMap::new(),
    };

    let result = match parsed {
        Err(e) => Err(e),
        Ok(cfg) => {
            manifest.seeds = Seeds { sim: Some(cfg.sim.seed), functional: Some(functional_seed(cfg.sim.seed)) };
            let mut p = Pipeline::new(&cfg, opts.strict, &mut out);
            let r = p.execute(opts.command);
            manifest.summary = std::mem::take(&mut p.summary);
            manifest.wall_times = std::mem::take(&mut p.times);
            manifest.skipped = std::mem::take(&mut p.skipped);
            manifest.health_failures = std::mem::take(&mut p.failures);
            r.and_then(|_| {
                if opts.strict && !manifest.health_failures.is_empty() {
                    Err(CliError::Health(manifest.health_failures.join("; ")))
                } else {
                    Ok(())
                }
            })
        }
    };
    manifest.status = status(result.as_ref().err());
    manifest.exit_code = result.as_ref().err().map_or(0, CliError::exit_code);
    manifest.error = result.as_ref().err().map(ToString::to_string);
    manifest.artifacts = out.written().to_vec();
    manifest.artifacts.push("manifest.json".into());
    out.json("manifest.json", &manifest)?;
    result.map(|_| out_dir)
}

struct Pipeline<'a> {
    cfg: &'a ExperimentConfig,
    strict: bool,
    out: &'a mut ArtifactDir,
    lifted: Option<Vec<f64>>,
    surface: Option<ValueSurface<f64>>,
    dp: Option<DpSolution<f64>>,
    summary: BTreeMap<String, f64>,
    times: BTreeMap<String, f64>,
    failures: Vec<String>,
    skipped: Vec<String>,
}

#[derive(Serialize)]
struct SurfaceDiagnosticsJson {
    nx: usize,
    nt: usize,
    x_min: f64,
    x_max: f64,
    fit_window: (f64, f64),
    growth_constant: f64,
    growth_violation: f64,
    monotonicity_constant: f64,
    monotonicity_violation: f64,
    concavity_bound: f64,
    concavity_violation: f64,
    max_d2v: f64,
    curvature_limit: f64,
    parabolicity_excess: f64,
    clamp_active_recorded: usize,
    clamp_active_substeps: usize,
    max_clamp_fraction: f64,
    max_a_star: f64,
    substeps: usize,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct DppJson {
    split_step: usize,
    t_split: f64,
    handover_shift: f64,
    residual: f64,
    compared_nodes: usize,
    threshold: f64,
    passes: bool,
    extrapolation_fraction: f64,
    saturated: usize,
    clipped_averages: usize,
}

#[derive(Serialize)]
struct DualityJson {
    x0: f64,
    v_hjb: f64,
    v_dp: f64,
    abs_diff: f64,
    threshold: f64,
    passes: bool,
    hjb_nodes: (usize, usize),
    dp_nodes: (usize, usize),
    dp_controls: usize,
}

#[derive(Serialize)]
struct MartingaleJson {
    max_deviation: f64,
    se_at_max: f64,
    step_at_max: usize,
    min_z: f64,
    allowance: f64,
    passes: bool,
    supermartingale_detected: bool,
}

impl From<&MartingaleReport> for MartingaleJson {
    fn from(r: &MartingaleReport) -> Self {
        MartingaleJson {
            max_deviation: r.max_deviation,
            se_at_max: r.se_at_max,
            step_at_max: r.step_at_max,
            min_z: r.min_z,
            allowance: r.allowance,
            passes: r.passes,
            supermartingale_detected: r.supermartingale_detected,
        }
    }
}

#[derive(Serialize)]
struct Quantiles {
    p01: f64,
    p05: f64,
    p50: f64,
    p95: f64,
    p99: f64,
}

#[derive(Serialize)]
struct PrimalJson {
    nodes: usize,
    max_identity_error: f64,
    max_gamma_error: f64,
    zero_alpha_nodes: usize,
}

#[derive(Serialize)]
struct ScalingJson {
    coarse_steps: usize,
    coarse_mean_abs_error: f64,
    mean_abs_error_ratio: f64,
    b_resid_exponent: f64,
    dx_exponent: f64,
}

#[derive(Serialize)]
struct HedgeJson {
    paths: usize,
    steps: usize,
    seed: u64,
    antithetic: bool,
    v0: f64,
    y0: f64,
    mean_error: f64,
    error_se: f64,
    error_z: f64,
    error_std: f64,
    mean_abs_error: f64,
    error_quantiles: Quantiles,
    excluded: usize,
    excluded_fraction: f64,
    min_cost: f64,
    max_tracking: f64,
    mean_abs_b_resid: f64,
    mean_abs_dx: f64,
    martingale: MartingaleJson,
    suboptimal_volatility: f64,
    suboptimal_martingale: MartingaleJson,
    scaling: Option<ScalingJson>,
    primal: Option<PrimalJson>,
}

#[derive(Serialize)]
struct MonotonicityJson {
    steps: usize,
    increments: usize,
    positive: usize,
    exceeding: usize,
    fraction_exceeding: f64,
    max_increment: f64,
    tolerance: f64,
}

impl MonotonicityJson {
    fn new(steps: usize, r: &MonotonicityReport) -> Self {
        MonotonicityJson {
            steps,
            increments: r.increments,
            positive: r.positive,
            exceeding: r.exceeding,
            fraction_exceeding: r.fraction_exceeding,
            max_increment: r.max_increment,
            tolerance: r.tolerance,
        }
    }
}

#[derive(Serialize)]
struct GradientIdentityJson {
    paths: usize,
    steps: usize,
    mean_a_t: f64,
    se: f64,
    surface_dv: f64,
    z: f64,
    passes: bool,
}

#[derive(Serialize)]
struct FunctionalJson {
    paths: usize,
    seed: u64,
    volatility: f64,
    lambda: f64,
    c: f64,
    monotonicity: MonotonicityJson,
    monotonicity_coarse: MonotonicityJson,
    exact_gradient_positive_increments: usize,
    affine_max_abs_residual: f64,
    frechet_bound: f64,
    frechet_max_total_variation: f64,
    gradient_identity: Option<GradientIdentityJson>,
}

fn terminal_payoff(payoff: &PayoffSpec<f64>) -> Result<&TerminalPayoff<f64>, CliError> {
    match payoff {
        PayoffSpec::Markovian(g) => Ok(g),
        PayoffSpec::Asian { .. } => Err(CliError::Precondition(
            "this command needs a payoff of the terminal price; path-dependent payoffs run through solve-dp".into(),
        )),
    }
}

impl<'a> Pipeline<'a> {
    fn new(cfg: &'a ExperimentConfig, strict: bool, out: &'a mut ArtifactDir) -> Self {
        Pipeline {
            cfg,
            strict,
            out,
            lifted: None,
            surface: None,
            dp: None,
            summary: BTreeMap::new(),
            times: BTreeMap::new(),
            failures: Vec::new(),
            skipped: Vec::new(),
        }
    }

    fn execute(&mut self, command: Command) -> Result<(), CliError> {
        match command {
            Command::Facelift => self.timed("facelift", Self::facelift),
            Command::SolveHjb => self.timed("solve-hjb", Self::solve_hjb),
            Command::SolveDp => self.timed("solve-dp", Self::solve_dp),
            Command::DualityCheck => self.timed("duality-check", Self::duality),
            Command::Hedge => self.timed("hedge", Self::hedge),
            Command::FunctionalCheck => self.timed("functional-check", Self::functional),
            Command::All => {
                let markovian = self.cfg.payoff.is_markovian();
                for c in [
                    Command::Facelift,
                    Command::SolveHjb,
                    Command::SolveDp,
                    Command::DualityCheck,
                    Command::Hedge,
                    Command::FunctionalCheck,
                ] {
                    let needs_surface =
                        matches!(c, Command::Facelift | Command::SolveHjb | Command::DualityCheck | Command::Hedge);
                    if needs_surface && !markovian {
                        self.skipped.push(c.name().into());
                        continue;
                    }
                    self.execute(c)?;
                }
                Ok(())
            }
        }
    }

    fn timed(&mut self, name: &str, stage: fn(&mut Self) -> Result<(), CliError>) -> Result<(), CliError> {
        let start = Instant::now();
        let r = stage(self);
        self.times.insert(name.into(), start.elapsed().as_secs_f64());
        r
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(what());
        }
    }

    fn space(&self) -> Result<UniformGrid<f64>, CliError> {
        let g = &self.cfg.grid;
        Ok(UniformGrid::new(g.x_min, g.x_max, g.nx)?)
    }

    fn terminal_grid(&self) -> Result<TerminalGrid<f64>, CliError> {
        let g = terminal_payoff(&self.cfg.payoff)?;
        let xs = self.space()?.nodes();
        let phi: Vec<f64> = xs.iter().map(|&x| g.value(x)).collect();
        Ok(TerminalGrid::from_model(&self.cfg.model, self.cfg.grid.maturity, xs, phi, self.cfg.shift)?)
    }

    fn lifted(&mut self) -> Result<Vec<f64>, CliError> {
        if self.lifted.is_none() {
            self.lifted = Some(facelift_checked(&self.terminal_grid()?)?);
        }
        Ok(self.lifted.clone().unwrap_or_default())
    }

    fn facelift(&mut self) -> Result<(), CliError> {
        let tg = self.terminal_grid()?;
        let hat = self.lifted()?;
        let lift = tg.phi.iter().zip(&hat).map(|(p, h)| h - p).fold(0.0, f64::max);
        let touched = tg.phi.iter().zip(&hat).filter(|(p, h)| (*h - *p).abs() <= 1e-12).count();
        self.summary.insert("facelift.max_lift".into(), lift);
        self.summary.insert("facelift.contact_nodes".into(), touched as f64);
        let rows = (0..tg.xs.len()).map(|i| vec![tg.xs[i], tg.phi[i], tg.gamma[i], hat[i]]);
        self.out.csv("facelift.csv", &["x", "phi", "gamma", "phi_hat"], rows)
    }

    fn surface(&mut self) -> Result<&ValueSurface<f64>, CliError> {
        if self.surface.is_none() {
            let hat = self.lifted()?;
            let g = &self.cfg.grid;
            let grid = SolverGrid::new(g.maturity, g.nt, self.space()?)?;
            if !g.adaptive {
                check_cfl(&self.cfg.model, &hat, &grid)?;
            }
            let opts = HjbOptions { adaptive: g.adaptive, strict: self.strict, ..HjbOptions::default() };
            self.surface = Some(solve(&self.cfg.model, &hat, &grid, &opts)?);
        }
        Ok(self.surface.as_ref().expect("surface solved above"))
    }

    fn solve_hjb(&mut self) -> Result<(), CliError> {
        self.surface()?;
        let vs = self.surface.as_ref().expect("surface solved above");
        let (cfg, model) = (self.cfg, &self.cfg.model);
        let g = &cfg.grid;
        let quarter = 0.25 * (g.x_max - g.x_min);
        let window = (g.x_min + quarter, g.x_max - quarter);
        let d = diagnostics(vs, model, window, 0.0);
        let limit = model.gamma2_bounds().0 - model.eps_margin();
        let json = SurfaceDiagnosticsJson {
            nx: g.nx,
            nt: g.nt,
            x_min: g.x_min,
            x_max: g.x_max,
            fit_window: window,
            growth_constant: d.growth_constant,
            growth_violation: d.growth_violation,
            monotonicity_constant: d.monotonicity_constant,
            monotonicity_violation: d.monotonicity_violation,
            concavity_bound: d.concavity_bound,
            concavity_violation: d.concavity_violation,
            max_d2v: d.max_d2v,
            curvature_limit: limit,
            parabolicity_excess: d.parabolicity_excess,
            clamp_active_recorded: d.clamp_active_recorded,
            clamp_active_substeps: vs.stats.clamp_active,
            max_clamp_fraction: d.max_clamp_fraction,
            max_a_star: d.max_a_star,
            substeps: d.substeps,
            warnings: vs.stats.warnings.clone(),
        };
        let xs = vs.grid.space.nodes();
        let mut rows = Vec::new();
        for k in thin_layers(g.nt, cfg.outputs.layers) {
            let t = vs.grid.time(k);
            let (v, dv, d2v, a, gh) =
                (vs.v_layer(k), vs.dv_layer(k), vs.d2v_layer(k), vs.a_star_layer(k), vs.gamma_hat_layer(k));
            for i in 0..xs.len() {
                rows.push(vec![t, xs[i], v[i], dv[i], d2v[i], a[i], gh[i]]);
            }
        }
        let v0 = vs.value(0, g.x0);
        let dv0 = vs.gradient(0, g.x0);
        self.out.csv("value_surface.csv", &["t", "x", "v", "dv", "d2v", "a_star", "gamma_hat"], rows)?;
        self.out.json("diagnostics.json", &json)?;
        self.summary.insert("hjb.v0".into(), v0);
        self.summary.insert("hjb.dv0".into(), dv0);
        self.summary.insert("hjb.growth_constant".into(), d.growth_constant);
        self.check(d.monotonicity_violation <= LAW_TOLERANCE, || {
            format!("time monotonicity violated by {:.3e}", d.monotonicity_violation)
        });
        self.check(d.concavity_violation <= LAW_TOLERANCE, || {
            format!("concavity of v - C0 x^2 violated by {:.3e}", d.concavity_violation)
        });
        self.check(d.parabolicity_excess <= 0.0, || {
            format!("d2v exceeds the curvature limit by {:.3e}", d.parabolicity_excess)
        });
        self.check(d.clamp_active_recorded == 0, || format!("{} interior clamp activations", d.clamp_active_recorded));
        Ok(())
    }

    fn dp_parts(&self) -> Result<(DpGrid<f64>, ControlGrid<f64>, DpOptions<f64>), CliError> {
        let (g, d) = (&self.cfg.grid, &self.cfg.dp);
        let grid = DpGrid::new(g.maturity, d.nt, UniformGrid::new(g.x_min, g.x_max, d.nx)?, d.n_avg)?;
        let controls = ControlGrid::for_model(&self.cfg.model, d.n_fine, d.n_tail)?;
        let opts = DpOptions { shift: self.cfg.shift, ..DpOptions::default() };
        Ok((grid, controls, opts))
    }

    fn dp_solution(&mut self) -> Result<&DpSolution<f64>, CliError> {
        if self.dp.is_none() {
            let (grid, controls, opts) = self.dp_parts()?;
            self.dp = Some(solve_dp(&self.cfg.model, &self.cfg.payoff, &grid, &controls, &opts)?);
        }
        Ok(self.dp.as_ref().expect("dp solved above"))
    }

    fn solve_dp(&mut self) -> Result<(), CliError> {
        self.dp_solution()?;
        let cfg = self.cfg;
        let sol = self.dp.as_ref().expect("dp solved above");
        let (grid, controls, opts) = self.dp_parts()?;
        let res =
            check_dpp(&cfg.model, &cfg.payoff, &grid, &controls, &opts, cfg.dp.split_step, cfg.dp.handover_shift)?;
        let xs = sol.grid.space.nodes();
        let ms = sol.avg_axis.as_ref().map(UniformGrid::nodes);
        let mut rows = Vec::new();
        for k in thin_layers(sol.grid.n_steps, cfg.outputs.layers) {
            let t = sol.grid.time(k);
            let (v, a) = (sol.value_layer(k), sol.policy_layer(k));
            match &ms {
                None => rows.extend((0..xs.len()).map(|i| vec![t, xs[i], v[i], a[i]])),
                Some(ms) => {
                    for (j, &m) in ms.iter().enumerate() {
                        for (i, &x) in xs.iter().enumerate() {
                            let idx = j * xs.len() + i;
                            rows.push(vec![t, x, m, v[idx], a[idx]]);
                        }
                    }
                }
            }
        }
        let header: &[&str] = if ms.is_some() { &["t", "x", "m", "v", "a_star"] } else { &["t", "x", "v", "a_star"] };
        let json = DppJson {
            split_step: res.split_step,
            t_split: sol.grid.time(res.split_step),
            handover_shift: res.handover_shift,
            residual: res.residual,
            compared_nodes: res.compared_nodes,
            threshold: DPP_THRESHOLD,
            passes: res.residual <= DPP_THRESHOLD,
            extrapolation_fraction: sol.extrapolation_fraction(),
            saturated: sol.saturated,
            clipped_averages: sol.clipped_averages,
        };
        let v0 = sol.value_at(0, cfg.grid.x0, 0.0);
        let saturated = sol.saturated;
        self.out.csv("dp_value.csv", header, rows)?;
        self.out.json("dpp_residual.json", &json)?;
        self.summary.insert("dp.v0".into(), v0);
        self.summary.insert("dp.dpp_residual".into(), res.residual);
        self.check(json.passes, || format!("DPP residual {:.3e} above {DPP_THRESHOLD:e}", res.residual));
        self.check(saturated == 0, || format!("{saturated} nodes chose the largest control"));
        Ok(())
    }

    fn duality(&mut self) -> Result<(), CliError> {
        terminal_payoff(&self.cfg.payoff)?;
        let x0 = self.cfg.grid.x0;
        let v_hjb = self.surface()?.value(0, x0);
        let v_dp = self.dp_solution()?.value_at(0, x0, 0.0);
        let controls = self.dp_parts()?.1.values().len();
        let diff = (v_hjb - v_dp).abs();
        let threshold = self.cfg.duality_threshold;
        let json = DualityJson {
            x0,
            v_hjb,
            v_dp,
            abs_diff: diff,
            threshold,
            passes: diff <= threshold,
            hjb_nodes: (self.cfg.grid.nx, self.cfg.grid.nt),
            dp_nodes: (self.cfg.dp.nx, self.cfg.dp.nt),
            dp_controls: controls,
        };
        self.out.json("duality.json", &json)?;
        self.summary.insert("duality.abs_diff".into(), diff);
        self.check(diff <= threshold, || format!("|v_hjb - v_dp| = {diff:.3e} above {threshold:e}"));
        Ok(())
    }

    fn sim_config(&self, steps: usize, record: usize) -> SimConfig<f64> {
        let s = &self.cfg.sim;
        let mut c = SimConfig::new(s.paths, steps, s.seed, self.cfg.grid.x0);
        c.antithetic = s.antithetic;
        c.record_paths = record;
        c.max_excluded_fraction = s.max_excluded_fraction;
        c
    }

    fn hedge(&mut self) -> Result<(), CliError> {
        terminal_payoff(&self.cfg.payoff)?;
        self.surface()?;
        let vs = self.surface.as_ref().expect("surface solved above");
        let (cfg, model) = (self.cfg, &self.cfg.model);
        let steps = cfg.sim.steps;
        // recorded paths feed the primal consistency check; only `outputs.thin` are dumped
        let record = cfg.outputs.thin.max(PRIMAL_PATHS).min(cfg.sim.paths);
        let ledger = simulate_optimal(vs, model, &self.sim_config(steps, record))?;
        let mart = martingale_report(&ledger, vs, model);
        let bad_vol = 2.0 * model.sigma0_bounds().1;
        let (bad, _) = martingale_check(vs, model, &self.sim_config(steps, 0), Policy::Constant(bad_vol))?;
        let coarse_steps = steps / 4;
        let scaling = if steps % 4 == 0 && coarse_steps > 0 && cfg.grid.nt % coarse_steps == 0 {
            let coarse = simulate_optimal(vs, model, &self.sim_config(coarse_steps, 0))?;
            Some(ScalingJson {
                coarse_steps,
                coarse_mean_abs_error: coarse.mean_abs_error(),
                mean_abs_error_ratio: coarse.mean_abs_error() / ledger.mean_abs_error(),
                b_resid_exponent: scaling_exponent(
                    coarse.dt,
                    coarse.mean_abs_b_resid,
                    ledger.dt,
                    ledger.mean_abs_b_resid,
                ),
                dx_exponent: scaling_exponent(coarse.dt, coarse.mean_abs_dx, ledger.dt, ledger.mean_abs_dx),
            })
        } else {
            None
        };
        let primal = if model.is_benchmark() {
            let p = primal_consistency(&ledger, model)?;
            Some(PrimalJson {
                nodes: p.nodes,
                max_identity_error: p.max_identity_error,
                max_gamma_error: p.max_gamma_error,
                zero_alpha_nodes: p.zero_alpha_nodes,
            })
        } else {
            None
        };
        let q = ledger.error_quantiles(&[0.01, 0.05, 0.5, 0.95, 0.99]);
        let (mean, se) = (ledger.mean_error(), ledger.error_se());
        let z = if se > 0.0 { mean / se } else { 0.0 };
        let json = HedgeJson {
            paths: cfg.sim.paths,
            steps,
            seed: cfg.sim.seed,
            antithetic: cfg.sim.antithetic,
            v0: ledger.v0,
            y0: ledger.y0,
            mean_error: mean,
            error_se: se,
            error_z: z,
            error_std: ledger.error_std(),
            mean_abs_error: ledger.mean_abs_error(),
            error_quantiles: Quantiles { p01: q[0], p05: q[1], p50: q[2], p95: q[3], p99: q[4] },
            excluded: ledger.excluded,
            excluded_fraction: ledger.excluded_fraction(),
            min_cost: ledger.min_cost,
            max_tracking: ledger.max_tracking(),
            mean_abs_b_resid: ledger.mean_abs_b_resid,
            mean_abs_dx: ledger.mean_abs_dx,
            martingale: (&mart).into(),
            suboptimal_volatility: bad_vol,
            suboptimal_martingale: (&bad).into(),
            scaling,
            primal,
        };
        let mut rows = Vec::new();
        for r in ledger.records.iter().take(cfg.outputs.thin) {
            for k in 0..r.t.len() {
                // gamma and b_resid belong to steps; the terminal node leaves them empty
                let step = |v: &[f64]| v.get(k).copied().unwrap_or(f64::NAN);
                rows.push(vec![
                    r.path_id as f64,
                    r.t[k],
                    r.x[k],
                    r.v_rollout[k],
                    r.v_surface[k],
                    r.y[k],
                    step(&r.gamma),
                    step(&r.b_resid),
                ]);
            }
        }
        self.out.json("hedge_summary.json", &json)?;
        if !rows.is_empty() {
            let header = ["path_id", "t", "x", "v_rollout", "v_surface", "y", "gamma", "b_resid"];
            self.out.csv("hedge_paths.csv", &header, rows)?;
        }
        self.summary.insert("hedge.mean_error".into(), mean);
        self.summary.insert("hedge.error_se".into(), se);
        self.summary.insert("hedge.mean_abs_error".into(), json.mean_abs_error);
        self.summary.insert("hedge.martingale_max_deviation".into(), mart.max_deviation);
        self.check(z.abs() <= 3.0, || format!("mean replication error {mean:.3e} is {z:.2} standard errors from 0"));
        self.check(mart.passes, || {
            format!("martingale deviation {:.3e} beyond 3 standard errors plus allowance", mart.max_deviation)
        });
        self.check(bad.supermartingale_detected, || "constant overtrading went undetected".into());
        if let Some(p) = &json.primal {
            let zero = p.zero_alpha_nodes;
            self.check(zero == 0, || format!("{zero} nodes with zero volatility"));
        }
        if model.is_benchmark() {
            self.check(ledger.min_cost >= 0.0, || "negative accumulated cost".into());
        }
        Ok(())
    }

    fn functional(&mut self) -> Result<(), CliError> {
        let cfg = self.cfg;
        let fc = &cfg.functional;
        let seed = functional_seed(cfg.sim.seed);
        let t = cfg.grid.maturity;
        let paths = martingale_paths(fc.paths, fc.steps, t, fc.a, cfg.grid.x0, seed);
        let dt = t / fc.steps as f64;
        let fam = ConcaveFamily { lambda: fc.lambda, c: fc.c, dt };
        let fine = monotonicity_report(&ito_residuals(&fam, None, &paths), ito_tolerance(fc.a, dt, fc.scale));
        let coarse_paths: Vec<Vec<f64>> = paths.iter().map(|p| p.iter().step_by(4).copied().collect()).collect();
        let coarse_fam = ConcaveFamily { dt: 4.0 * dt, ..fam };
        let coarse = monotonicity_report(
            &ito_residuals(&coarse_fam, None, &coarse_paths),
            ito_tolerance(fc.a, 4.0 * dt, fc.scale),
        );
        let exact = WithGradient {
            value: |k: usize, p: &[f64]| PathFunctional::value(&fam, k, p),
            gradient: |k: usize, p: &[f64]| fam.exact_vertical(k, p),
        };
        let exact_positive = monotonicity_report(&ito_residuals(&exact, None, &paths), 0.0).positive;
        let affine =
            WithGradient { value: |k: usize, p: &[f64]| 2.0 * p[k] + 1.0, gradient: |_: usize, _: &[f64]| 2.0 };
        let affine_max = ito_residuals(&affine, None, &paths).iter().flatten().fold(0.0f64, |m, r| m.max(r.abs()));
        let bound = frechet_bound(&cfg.payoff);
        let tv = paths.iter().map(|p| cfg.payoff.frechet_total_variation(p)).fold(0.0, f64::max);

        let identity = if cfg.payoff.is_markovian() {
            self.surface()?;
            let vs = self.surface.as_ref().expect("surface solved above");
            let sim = self.sim_config(cfg.sim.steps, 0);
            let sdt = t / cfg.sim.steps as f64;
            let cost = CostFrechet::for_model(&cfg.model);
            let (units, _) = path_statistic(vs, &sim, Policy::Optimal, |x, a| {
                compute_a(&cfg.payoff, cost, &cfg.model, x, a, sdt).map_or(f64::NAN, |a| a[a.len() - 1])
            })?;
            let (mean, se) = mean_and_se(&units);
            let dv = vs.gradient(0, cfg.grid.x0);
            // antithetic pairs can cancel exactly (x0 at a symmetry point of the payoff)
            let z = if se > 0.0 {
                (mean - dv) / se
            } else if (mean - dv).abs() <= 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            Some(GradientIdentityJson {
                paths: cfg.sim.paths,
                steps: cfg.sim.steps,
                mean_a_t: mean,
                se,
                surface_dv: dv,
                z,
                passes: z.abs() <= 3.0,
            })
        } else {
            None
        };

        let json = FunctionalJson {
            paths: fc.paths,
            seed,
            volatility: fc.a,
            lambda: fc.lambda,
            c: fc.c,
            monotonicity: MonotonicityJson::new(fc.steps, &fine),
            monotonicity_coarse: MonotonicityJson::new(fc.steps / 4, &coarse),
            exact_gradient_positive_increments: exact_positive,
            affine_max_abs_residual: affine_max,
            frechet_bound: bound,
            frechet_max_total_variation: tv,
            gradient_identity: identity,
        };
        self.out.json("functional_checks.json", &json)?;
        self.summary.insert("functional.fraction_exceeding".into(), fine.fraction_exceeding);
        self.summary.insert("functional.affine_max_abs_residual".into(), affine_max);
        self.check(fine.fraction_exceeding <= MAX_EXCEEDING_FRACTION, || {
            format!("{:.2}% of residual increments exceed the tolerance", 100.0 * fine.fraction_exceeding)
        });
        self.check(fine.fraction_exceeding <= coarse.fraction_exceeding, || {
            "exceeding fraction grew under refinement".into()
        });
        self.check(affine_max <= AFFINE_TOLERANCE, || format!("affine residual {affine_max:.3e}"));
        self.check(tv <= bound + 1e-12, || format!("derivative total variation {tv} above bound {bound}"));
        if let Some(id) = &json.gradient_identity {
            self.summary.insert("functional.mean_a_t".into(), id.mean_a_t);
            let z = id.z;
            self.check(id.passes, || format!("E[A_T] is {z:.2} standard errors from dv(0, x0)"));
        }
        Ok(())
    }
}
