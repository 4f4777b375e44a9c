//! Flat `key = value` experiment configuration with dotted section prefixes.
//!
//! ```text
//! # benchmark call
//! model.sigma0.family = constant
//! model.sigma0.value = 0.2
//! model.f.family = constant
//! model.f.value = 0.1
//! payoff.family = call(1.0)
//! sim.seed = 7
//! ```
//!
//! Lines starting with `#` are comments. Keys may appear once. Unknown keys are
//! rejected so that typos surface as parse errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use impakt_core::coefficient::Coefficient;
use impakt_core::facelift::ConvexShift;
use impakt_core::model::{ImpactModel, QuadraticCost};
use impakt_core::payoff::{AsianFn, PayoffSpec, TerminalPayoff};

use crate::CliError;

const COEFF_FIELDS: &[&str] = &["family", "value", "intercept", "slope", "floor", "cap", "scale", "beta", "xs", "ys"];

const KEYS: &[&str] = &[
    "model.kind",
    "model.c_lower",
    "model.c_upper",
    "model.eps_margin",
    "model.shift",
    "payoff.family",
    "payoff.terminal_weight",
    "grid.maturity",
    "grid.x0",
    "grid.x_min",
    "grid.x_max",
    "grid.nx",
    "grid.nt",
    "grid.adaptive",
    "dp.nx",
    "dp.nt",
    "dp.n_fine",
    "dp.n_tail",
    "dp.n_avg",
    "dp.split_step",
    "dp.handover_shift",
    "duality.threshold",
    "sim.paths",
    "sim.steps",
    "sim.seed",
    "sim.antithetic",
    "sim.max_excluded_fraction",
    "functional.paths",
    "functional.steps",
    "functional.a",
    "functional.lambda",
    "functional.c",
    "functional.scale",
    "outputs.dir",
    "outputs.thin",
    "outputs.layers",
];

const COEFF_BLOCKS: &[&str] = &["model.sigma0", "model.f", "model.gamma0", "model.gamma1", "model.gamma2"];

fn known(key: &str) -> bool {
    KEYS.contains(&key)
        || COEFF_BLOCKS
            .iter()
            .any(|b| key.strip_prefix(b).and_then(|r| r.strip_prefix('.')).is_some_and(|f| COEFF_FIELDS.contains(&f)))
}

/// Raw key/value pairs with line numbers.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !known(k) {
                return Err(CliError::Config(format!("line {}: unknown key `{k}`", i + 1)));
            }
            if entries.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        Ok(RawConfig { entries })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    fn bad(&self, key: &str, what: &str) -> CliError {
        let line = self.entries.get(key).map_or(0, |(l, _)| *l);
        CliError::Config(format!("line {line}: `{key}` {what}"))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| self.bad(key, &format!("has invalid value `{v}`"))),
        }
    }

    fn num_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.num(key)?.unwrap_or(default))
    }

    fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        self.num(key)?.ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
    }

    fn list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let v = self.get(key).ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))?;
        v.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| self.bad(key, &format!("has invalid entry `{s}`"))))
            .collect()
    }

    fn coefficient(&self, block: &str) -> Result<Option<Coefficient<f64>>, CliError> {
        let key = |f: &str| format!("{block}.{f}");
        let Some(family) = self.get(&key("family")) else {
            return Ok(None);
        };
        let req = |f: &str| self.required::<f64>(&key(f));
        let c = match family {
            "constant" => Coefficient::Constant(req("value")?),
            "affine" => Coefficient::Affine {
                intercept: req("intercept")?,
                slope: req("slope")?,
                floor: req("floor")?,
                cap: req("cap")?,
            },
            "cev-clamped" => Coefficient::CevClamped {
                scale: req("scale")?,
                beta: req("beta")?,
                floor: req("floor")?,
                cap: req("cap")?,
            },
            "tabulated" => Coefficient::Tabulated { xs: self.list(&key("xs"))?, ys: self.list(&key("ys"))? },
            other => return Err(self.bad(&key("family"), &format!("names unknown family `{other}`"))),
        };
        Ok(Some(c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub maturity: f64,
    pub x0: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub nt: usize,
    pub adaptive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpConfig {
    pub nx: usize,
    pub nt: usize,
    pub n_fine: usize,
    pub n_tail: usize,
    pub n_avg: usize,
    pub split_step: usize,
    pub handover_shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimBlock {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub antithetic: bool,
    pub max_excluded_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalBlock {
    pub paths: usize,
    pub steps: usize,
    /// Volatility of the simulated martingale.
    pub a: f64,
    pub lambda: f64,
    pub c: f64,
    /// Gradient error scale in the monotonicity tolerance.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputBlock {
    pub dir: Option<PathBuf>,
    /// Number of simulated paths dumped to `hedge_paths.csv`.
    pub thin: usize,
    /// Largest number of time layers written to the surface CSVs.
    pub layers: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ImpactModel<f64>,
    pub shift: ConvexShift,
    pub payoff: PayoffSpec<f64>,
    pub grid: GridConfig,
    pub dp: DpConfig,
    pub duality_threshold: f64,
    pub sim: SimBlock,
    pub functional: FunctionalBlock,
    pub outputs: OutputBlock,
}

fn parse_shift(raw: &RawConfig) -> Result<ConvexShift, CliError> {
    Ok(match raw.get("model.shift").unwrap_or("eps-minus") {
        "eps-minus" => ConvexShift::EpsShiftedMinus,
        "eps-plus" => ConvexShift::EpsShiftedPlus,
        "c0" => ConvexShift::C0Quadratic,
        "model" => ConvexShift::ModelIntegrated,
        other => return Err(raw.bad("model.shift", &format!("names unknown shift `{other}`"))),
    })
}

fn parse_model(raw: &RawConfig) -> Result<ImpactModel<f64>, CliError> {
    let need =
        |b: &str| raw.coefficient(b)?.ok_or_else(|| CliError::Config(format!("missing required key `{b}.family`")));
    let sigma0 = need("model.sigma0")?;
    let f = need("model.f")?;
    let mut model = match raw.get("model.kind").unwrap_or("benchmark") {
        "benchmark" => ImpactModel::benchmark(sigma0, f)?,
        "quadratic" => ImpactModel::quadratic(
            sigma0,
            f,
            QuadraticCost {
                gamma0: need("model.gamma0")?,
                gamma1: need("model.gamma1")?,
                gamma2: need("model.gamma2")?,
            },
        )?,
        other => return Err(raw.bad("model.kind", &format!("names unknown kind `{other}`"))),
    };
    match (raw.num::<f64>("model.c_lower")?, raw.num::<f64>("model.c_upper")?) {
        (None, None) => {}
        (lo, hi) => {
            let (dlo, dhi) = model.default_bounds();
            model = model.with_bounds(lo.unwrap_or(dlo), hi.unwrap_or(dhi))?;
        }
    }
    if let Some(eps) = raw.num("model.eps_margin")? {
        model = model.with_eps_margin(eps)?;
    }
    Ok(model)
}

/// Splits `name(a, b)` into `("name", ["a", "b"])`.
fn call_syntax(s: &str) -> Option<(&str, Vec<&str>)> {
    match s.split_once('(') {
        None => Some((s.trim(), Vec::new())),
        Some((name, rest)) => {
            let args = rest.trim().strip_suffix(')')?;
            let args = if args.trim().is_empty() { Vec::new() } else { args.split(',').map(str::trim).collect() };
            Some((name.trim(), args))
        }
    }
}

fn read_tabulated(path: &Path) -> Result<TerminalPayoff<f64>, CliError> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CliError::Config(format!("cannot read payoff table {}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| CliError::Config(e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "phi" {
        return Err(CliError::Config(format!("payoff table {} needs the header `x,phi`", path.display())));
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Config(e.to_string()))?;
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|_| {
                CliError::Config(format!("payoff table {} row {}: invalid number `{s}`", path.display(), i + 2))
            })
        };
        xs.push(parse(&rec[0])?);
        ys.push(parse(&rec[1])?);
    }
    Ok(TerminalPayoff::Tabulated { xs, ys })
}

fn parse_payoff(raw: &RawConfig, base: &Path) -> Result<PayoffSpec<f64>, CliError> {
    let key = "payoff.family";
    let spec = raw.get(key).ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))?;
    let (name, args) = call_syntax(spec).ok_or_else(|| raw.bad(key, &format!("has malformed value `{spec}`")))?;
    let nums = |n: usize| -> Result<Vec<f64>, CliError> {
        if args.len() != n {
            return Err(raw.bad(key, &format!("family `{name}` takes {n} argument(s)")));
        }
        args.iter()
            .map(|a| a.parse::<f64>().map_err(|_| raw.bad(key, &format!("has invalid argument `{a}`"))))
            .collect()
    };
    let weight = raw.num_or("payoff.terminal_weight", 0.0)?;
    let payoff = match name {
        "call" => PayoffSpec::Markovian(TerminalPayoff::Call { strike: nums(1)?[0] }),
        "put" => PayoffSpec::Markovian(TerminalPayoff::Put { strike: nums(1)?[0] }),
        "digital" => PayoffSpec::Markovian(TerminalPayoff::Digital { strike: nums(1)?[0] }),
        "butterfly" => {
            let k = nums(2)?;
            PayoffSpec::Markovian(TerminalPayoff::Butterfly { k1: k[0], k2: k[1] })
        }
        "affine" => {
            let k = nums(2)?;
            PayoffSpec::Markovian(TerminalPayoff::Affine { slope: k[0], intercept: k[1] })
        }
        "tabulated" => {
            if args.len() != 1 {
                return Err(raw.bad(key, "family `tabulated` takes a file path"));
            }
            PayoffSpec::Markovian(read_tabulated(&base.join(args[0]))?)
        }
        "asian-average" => {
            nums(0)?;
            PayoffSpec::Asian { phi: AsianFn::Average, terminal_weight: weight }
        }
        "asian-call" => {
            PayoffSpec::Asian { phi: AsianFn::AverageCall { strike: nums(1)?[0] }, terminal_weight: weight }
        }
        other => return Err(raw.bad(key, &format!("names unknown payoff family `{other}`"))),
    };
    payoff.validate()?;
    Ok(payoff)
}

impl ExperimentConfig {
    /// `base` resolves relative file references such as tabulated payoffs.
    pub fn from_raw(raw: &RawConfig, base: &Path) -> Result<Self, CliError> {
        let model = parse_model(raw)?;
        let shift = parse_shift(raw)?;
        let payoff = parse_payoff(raw, base)?;

        let maturity: f64 = raw.num_or("grid.maturity", 1.0)?;
        let x0: f64 = raw.num_or("grid.x0", 1.0)?;
        let half = 4.0 * model.sigma0_bounds().1 * maturity.sqrt();
        let nx = raw.num_or("grid.nx", 401)?;
        let nt = raw.num_or("grid.nt", 1024)?;
        let grid = GridConfig {
            maturity,
            x0,
            x_min: raw.num_or("grid.x_min", x0 - half)?,
            x_max: raw.num_or("grid.x_max", x0 + half)?,
            nx,
            nt,
            adaptive: raw.num_or("grid.adaptive", true)?,
        };
        if !(maturity > 0.0) {
            return Err(raw.bad("grid.maturity", "must be positive"));
        }
        if !(grid.x_min < x0 && x0 < grid.x_max) {
            return Err(CliError::Config(format!("grid.x0 = {x0} lies outside [{}, {}]", grid.x_min, grid.x_max)));
        }
        if nx < 3 || nt < 1 {
            return Err(CliError::Config("grid needs nx >= 3 and nt >= 1".into()));
        }

        let dp_nx = raw.num_or("dp.nx", nx)?;
        let dp_nt = raw.num_or("dp.nt", 128)?;
        let dp = DpConfig {
            nx: dp_nx,
            nt: dp_nt,
            n_fine: raw.num_or("dp.n_fine", 201)?,
            n_tail: raw.num_or("dp.n_tail", 80)?,
            n_avg: raw.num_or("dp.n_avg", dp_nx)?,
            split_step: raw.num_or("dp.split_step", dp_nt / 2)?,
            handover_shift: raw.num_or("dp.handover_shift", 0.5)?,
        };
        if dp.split_step > dp.nt {
            return Err(raw.bad("dp.split_step", "exceeds dp.nt"));
        }

        let sim = SimBlock {
            paths: raw.num_or("sim.paths", 10_000)?,
            steps: raw.num_or("sim.steps", 256)?,
            seed: raw.required("sim.seed")?,
            antithetic: raw.num_or("sim.antithetic", true)?,
            max_excluded_fraction: raw.num_or("sim.max_excluded_fraction", 0.01)?,
        };
        let functional = FunctionalBlock {
            paths: raw.num_or("functional.paths", 200)?,
            steps: raw.num_or("functional.steps", 4096)?,
            a: raw.num_or("functional.a", 0.3)?,
            lambda: raw.num_or("functional.lambda", 0.5)?,
            c: raw.num_or("functional.c", 0.1)?,
            scale: raw.num_or("functional.scale", 1e-8)?,
        };
        if functional.steps < 4 || !functional.steps.is_multiple_of(4) {
            return Err(raw.bad("functional.steps", "must be a positive multiple of 4"));
        }
        let outputs = OutputBlock {
            dir: raw.get("outputs.dir").map(PathBuf::from),
            thin: raw.num_or("outputs.thin", 0)?,
            layers: raw.num_or("outputs.layers", 65)?.max(2),
        };
        Ok(ExperimentConfig {
            model,
            shift,
            payoff,
            grid,
            dp,
            duality_threshold: raw.num_or("duality.threshold", 1e-2)?,
            sim,
            functional,
            outputs,
        })
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        Self::from_raw(&RawConfig::parse(text)?, base)
    }
}
