//! Problem definition: coefficients, feedback map, grids and solver settings,
//! read from a small line-oriented scenario format (see `docs/scenario-format.md`).
//!
//! Coefficients follow the separated structure
//! `b(t,i,x,rho;v) = b1(t,i,x;v) + b2(t,i,x,rho)` and
//! `g(tau;t,i,x,rho;v) = g1(t,i,x;v) + g2(tau;t,i,x,rho)`.
//! Measure arguments enter only through the first two moments `m1`, `m2`.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::expr::{Bindings, CoefficientExpr, EvalError, Var};
use crate::grid::{SpatialGrid, TimeGrid};
use crate::path_space::{PathError, PathTree};
use crate::regime_chain::Generator;

/// Smallest admissible `|sigma|` on the grid.
pub const ELLIPTICITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}, column {column}: {message}")]
    Expr { line: usize, column: usize, message: String },
    #[error("line {line}: unknown key `{key}` in section [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: variable `{var}` is not allowed in `{slot}` (allowed: {allowed})")]
    ForbiddenVariable { line: usize, slot: String, var: &'static str, allowed: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, PartialEq)]
#[error("evaluating `{slot}`: {source}")]
pub struct CoefficientError {
    pub slot: &'static str,
    #[source]
    pub source: EvalError,
}

/// Initial population law.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum InitialLaw {
    Gaussian { mean: f64, std: f64 },
    Point { x: f64 },
    Uniform { a: f64, b: f64 },
    Histogram(Vec<f64>),
}

impl InitialLaw {
    /// Cell masses on the grid, normalized to 1.
    pub fn discretize(&self, grid: &SpatialGrid) -> Result<Vec<f64>, ScenarioError> {
        let n = grid.len();
        let dx = grid.dx();
        let mut mass: Vec<f64> = match self {
            InitialLaw::Gaussian { mean, std } => {
                let cdf = |z: f64| 0.5 * (1.0 + libm::erf((z - mean) / (std * std::f64::consts::SQRT_2)));
                (0..n)
                    .map(|i| {
                        let x = grid.x(i);
                        cdf(x + dx / 2.0) - cdf(x - dx / 2.0)
                    })
                    .collect()
            }
            InitialLaw::Point { x } => {
                let mut v = vec![0.0; n];
                v[grid.cell_of(*x)] = 1.0;
                v
            }
            InitialLaw::Uniform { a, b } => (0..n)
                .map(|i| {
                    let x = grid.x(i);
                    let lo = (x - dx / 2.0).max(*a);
                    let hi = (x + dx / 2.0).min(*b);
                    (hi - lo).max(0.0)
                })
                .collect(),
            InitialLaw::Histogram(w) => {
                if w.len() != n {
                    return Err(ScenarioError::Invalid(format!(
                        "histogram has {} weights but the grid has {n} points",
                        w.len()
                    )));
                }
                w.clone()
            }
        };
        if mass.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(ScenarioError::Invalid("initial law has negative or non-finite mass".into()));
        }
        let total: f64 = mass.iter().sum();
        if total <= 0.0 {
            return Err(ScenarioError::Invalid("initial law puts no mass on the grid".into()));
        }
        mass.iter_mut().for_each(|m| *m /= total);
        Ok(mass)
    }
}

impl InitialLaw {
    /// Draws one initial state. Histograms are sampled cell-uniformly.
    pub fn sample<R: rand::Rng + ?Sized>(&self, grid: &SpatialGrid, rng: &mut R) -> f64 {
        use rand_distr::Distribution;
        match self {
            InitialLaw::Gaussian { mean, std } => {
                rand_distr::Normal::new(*mean, *std).expect("std > 0 checked at parse").sample(rng)
            }
            InitialLaw::Point { x } => *x,
            InitialLaw::Uniform { a, b } => a + (b - a) * rng.random::<f64>(),
            InitialLaw::Histogram(w) => {
                let total: f64 = w.iter().sum();
                let mut target = rng.random::<f64>() * total;
                let mut cell = w.len() - 1;
                for (i, &m) in w.iter().enumerate() {
                    if target < m {
                        cell = i;
                        break;
                    }
                    target -= m;
                }
                grid.x(cell) + grid.dx() * (rng.random::<f64>() - 0.5)
            }
        }
    }
}

/// One expression per regime.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeExprs(Vec<CoefficientExpr>);

impl RegimeExprs {
    pub fn uniform(e: CoefficientExpr, m: usize) -> Self {
        Self(vec![e; m])
    }

    #[inline]
    pub fn get(&self, regime: usize) -> &CoefficientExpr {
        &self.0[regime]
    }

    pub fn uses(&self, var: Var) -> bool {
        self.0.iter().any(|e| e.uses(var))
    }

    pub fn regime_independent(&self) -> bool {
        !self.uses(Var::I) && self.0.windows(2).all(|w| w[0].ast() == w[1].ast())
    }

    pub fn sources(&self) -> Vec<&str> {
        self.0.iter().map(|e| e.source()).collect()
    }
}

/// The feedback map `psi(t,i,x,p) = argmin_v <p, b1> + g1`.
#[derive(Debug, Clone, PartialEq)]
pub enum Psi {
    /// `b1 = v + f(t,i,x)`, `g1 = c v^2/2 + g(t,i,x)`: `psi = clamp(-p/c, U)`.
    Lq { c: f64 },
    Expr(RegimeExprs),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub inner_iters: usize,
    pub damping: f64,
    pub seed: u64,
    /// Sanity bound on `|D_x Theta|` and `|D_xx Theta|`; exceeding it is flagged.
    pub gradient_bound: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 50,
            inner_iters: 2,
            damping: 0.0,
            seed: 0,
            gradient_bound: 1e6,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    /// Reject scenarios whose `sigma` vanishes somewhere on the grid.
    pub require_ellipticity: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { require_ellipticity: true }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub generator: Generator,
    /// 0-based `alpha(0-)`.
    pub initial_regime: usize,
    pub jump_cap: usize,
    pub time: TimeGrid,
    pub space: SpatialGrid,
    pub mu0: InitialLaw,
    pub sigma: CoefficientExpr,
    pub b1: RegimeExprs,
    pub b2: RegimeExprs,
    pub g1: RegimeExprs,
    pub g2: RegimeExprs,
    pub h: RegimeExprs,
    pub running_discount: Option<CoefficientExpr>,
    pub terminal_discount: Option<CoefficientExpr>,
    pub psi: Psi,
    pub u_min: f64,
    pub u_max: f64,
    pub solver: SolverSettings,
    pub params: BTreeMap<String, f64>,
    /// Lint findings that do not invalidate the scenario.
    pub warnings: Vec<String>,
    source: String,
}

#[inline]
fn regime_label(i: usize) -> f64 {
    (i + 1) as f64
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        parse_scenario_with(text, ParseOptions::default())
    }

    /// Text the scenario was parsed from.
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn regimes(&self) -> usize {
        self.generator.regimes()
    }

    pub fn horizon(&self) -> f64 {
        self.time.horizon()
    }

    #[inline]
    pub fn sigma(&self, t: f64, x: f64) -> Result<f64, CoefficientError> {
        let b = Bindings::new().with(Var::T, t).with(Var::X, x);
        self.sigma.eval(&b).map_err(|source| CoefficientError { slot: "sigma", source })
    }

    #[inline]
    pub fn b1(&self, t: f64, i: usize, x: f64, v: f64) -> Result<f64, CoefficientError> {
        let b = Bindings::new().with(Var::T, t).with(Var::I, regime_label(i)).with(Var::X, x).with(Var::V, v);
        self.b1.get(i).eval(&b).map_err(|source| CoefficientError { slot: "b1", source })
    }

    #[inline]
    pub fn g1(&self, t: f64, i: usize, x: f64, v: f64) -> Result<f64, CoefficientError> {
        let b = Bindings::new().with(Var::T, t).with(Var::I, regime_label(i)).with(Var::X, x).with(Var::V, v);
        self.g1.get(i).eval(&b).map_err(|source| CoefficientError { slot: "g1", source })
    }

    #[inline]
    pub fn b2(&self, t: f64, i: usize, x: f64, moments: (f64, f64)) -> Result<f64, CoefficientError> {
        let b = Bindings::new()
            .with(Var::T, t)
            .with(Var::I, regime_label(i))
            .with(Var::X, x)
            .with(Var::M1, moments.0)
            .with(Var::M2, moments.1);
        self.b2.get(i).eval(&b).map_err(|source| CoefficientError { slot: "b2", source })
    }

    /// Running measure cost including the running discount factor.
    #[inline]
    pub fn g2(&self, tau: f64, t: f64, i: usize, x: f64, moments: (f64, f64)) -> Result<f64, CoefficientError> {
        Ok(self.g2_undiscounted(tau, t, i, x, moments)? * self.running_factor(tau, t)?)
    }

    /// `g2` without the `[discount] running` multiplier.
    #[inline]
    pub fn g2_undiscounted(&self, tau: f64, t: f64, i: usize, x: f64, moments: (f64, f64)) -> Result<f64, CoefficientError> {
        let b = Bindings::new()
            .with(Var::Tau, tau)
            .with(Var::T, t)
            .with(Var::I, regime_label(i))
            .with(Var::X, x)
            .with(Var::M1, moments.0)
            .with(Var::M2, moments.1);
        self.g2.get(i).eval(&b).map_err(|source| CoefficientError { slot: "g2", source })
    }

    /// The `[discount] running` multiplier, 1 when absent.
    #[inline]
    pub fn running_factor(&self, tau: f64, t: f64) -> Result<f64, CoefficientError> {
        match &self.running_discount {
            Some(d) => d
                .eval(&Bindings::new().with(Var::Tau, tau).with(Var::T, t))
                .map_err(|source| CoefficientError { slot: "running", source }),
            None => Ok(1.0),
        }
    }

    /// Terminal cost including the terminal discount factor.
    #[inline]
    pub fn h(&self, tau: f64, i: usize, x: f64, moments: (f64, f64)) -> Result<f64, CoefficientError> {
        Ok(self.h_undiscounted(tau, i, x, moments)? * self.terminal_factor(tau)?)
    }

    /// `h` without the `[discount] terminal` multiplier.
    #[inline]
    pub fn h_undiscounted(&self, tau: f64, i: usize, x: f64, moments: (f64, f64)) -> Result<f64, CoefficientError> {
        let b = Bindings::new()
            .with(Var::Tau, tau)
            .with(Var::I, regime_label(i))
            .with(Var::X, x)
            .with(Var::M1, moments.0)
            .with(Var::M2, moments.1);
        self.h.get(i).eval(&b).map_err(|source| CoefficientError { slot: "h", source })
    }

    /// The `[discount] terminal` multiplier evaluated at `t = T`, 1 when absent.
    #[inline]
    pub fn terminal_factor(&self, tau: f64) -> Result<f64, CoefficientError> {
        match &self.terminal_discount {
            Some(d) => d
                .eval(&Bindings::new().with(Var::Tau, tau).with(Var::T, self.horizon()))
                .map_err(|source| CoefficientError { slot: "terminal", source }),
            None => Ok(1.0),
        }
    }

    /// Feedback `psi(t,i,x,p)`, always inside `[u_min, u_max]`.
    #[inline]
    pub fn psi(&self, t: f64, i: usize, x: f64, p: f64) -> Result<f64, CoefficientError> {
        let raw = match &self.psi {
            Psi::Lq { c } => -p / c,
            Psi::Expr(e) => {
                let b = Bindings::new().with(Var::T, t).with(Var::I, regime_label(i)).with(Var::X, x).with(Var::P, p);
                e.get(i).eval(&b).map_err(|source| CoefficientError { slot: "psi", source })?
            }
        };
        Ok(raw.clamp(self.u_min, self.u_max))
    }

    /// Whether any cost reads the evaluation time `tau`.
    pub fn tau_dependent(&self) -> bool {
        self.g2.uses(Var::Tau)
            || self.h.uses(Var::Tau)
            || self.running_discount.as_ref().is_some_and(|d| d.uses(Var::Tau))
            || self.terminal_discount.as_ref().is_some_and(|d| d.uses(Var::Tau))
    }

    /// Whether the dynamics or costs read the population moments.
    pub fn measure_dependent(&self) -> bool {
        [&self.b2, &self.g2, &self.h].iter().any(|e| e.uses(Var::M1) || e.uses(Var::M2))
    }

    /// Whether every coefficient is the same in all regimes.
    pub fn regime_independent(&self) -> bool {
        let psi_ok = match &self.psi {
            Psi::Lq { .. } => true,
            Psi::Expr(e) => e.regime_independent(),
        };
        psi_ok && [&self.b1, &self.b2, &self.g1, &self.g2, &self.h].iter().all(|e| e.regime_independent())
    }

    /// Path tree on the scenario's time grid.
    pub fn tree(&self) -> Result<PathTree, PathError> {
        PathTree::enumerate(&self.time.times(), &self.generator, self.jump_cap, self.initial_regime)
    }

    pub fn initial_density(&self) -> Result<Vec<f64>, ScenarioError> {
        self.mu0.discretize(&self.space)
    }

    fn check_ellipticity(&self) -> Result<(), ScenarioError> {
        for k in 0..=self.time.steps() {
            let t = self.time.time(k);
            for i in 0..self.space.len() {
                let x = self.space.x(i);
                let s = self.sigma(t, x).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
                if s.abs() < ELLIPTICITY_FLOOR {
                    return Err(ScenarioError::Invalid(format!(
                        "ellipticity violated: sigma({t}, {x}) = {s}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Evaluates every coefficient on a coarse sample so domain errors surface at load time.
    fn smoke_evaluate(&self) -> Result<(), ScenarioError> {
        let wrap = |e: CoefficientError| ScenarioError::Invalid(e.to_string());
        let xs: Vec<f64> = (0..self.space.len()).step_by((self.space.len() / 16).max(1)).map(|i| self.space.x(i)).collect();
        let moments = [(0.0, 1.0), (self.space.x_min(), self.space.x_min().powi(2)), (self.space.x_max(), self.space.x_max().powi(2))];
        let controls = [self.u_min, 0.5 * (self.u_min + self.u_max), self.u_max];
        for &t in &[0.0, 0.5 * self.horizon(), self.horizon()] {
            for i in 0..self.regimes() {
                for &x in &xs {
                    for &v in &controls {
                        self.b1(t, i, x, v).map_err(wrap)?;
                        self.g1(t, i, x, v).map_err(wrap)?;
                    }
                    for &mo in &moments {
                        self.b2(t, i, x, mo).map_err(wrap)?;
                        self.g2(0.0, t, i, x, mo).map_err(wrap)?;
                        self.h(t, i, x, mo).map_err(wrap)?;
                    }
                    self.psi(t, i, x, 0.0).map_err(wrap)?;
                }
            }
        }
        Ok(())
    }

    /// Spot-checks that `psi` minimizes `p*b1 + g1` over a grid of `U`.
    pub fn lint_psi(&self) -> Vec<String> {
        let mut out = Vec::new();
        let nv = 401;
        let vs: Vec<f64> = (0..nv)
            .map(|n| self.u_min + (self.u_max - self.u_min) * n as f64 / (nv - 1) as f64)
            .collect();
        let step = (self.u_max - self.u_min) / (nv - 1) as f64;
        let mut worst = 0.0f64;
        let mut worst_at = None;
        for &t in &[0.0, self.horizon()] {
            for i in 0..self.regimes() {
                for &x in &[self.space.x_min() * 0.5, 0.0, self.space.x_max() * 0.5] {
                    for &p in &[-2.0, -0.5, 0.0, 0.7, 3.0] {
                        let objective = |v: f64| -> Option<f64> {
                            Some(p * self.b1(t, i, x, v).ok()? + self.g1(t, i, x, v).ok()?)
                        };
                        let Ok(u) = self.psi(t, i, x, p) else { continue };
                        let (Some(at_psi), Some(best)) = (
                            objective(u),
                            vs.iter().filter_map(|&v| objective(v)).reduce(f64::min),
                        ) else {
                            continue;
                        };
                        // grid search can only resolve the minimum to O(step^2)
                        let gap = at_psi - best - step * step * (1.0 + p.abs());
                        if gap > worst {
                            worst = gap;
                            worst_at = Some((t, i, x, p));
                        }
                    }
                }
            }
        }
        if let Some((t, i, x, p)) = worst_at {
            if worst > 1e-6 {
                out.push(format!(
                    "psi is not the minimizer of p*b1 + g1 at t={t}, regime {}, x={x}, p={p} (excess {worst:.3e})",
                    i + 1
                ));
            }
        }
        out
    }
}

/// Parses and validates scenario text.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    parse_scenario_with(text, ParseOptions::default())
}

struct Entry {
    section: String,
    key: String,
    index: Option<usize>,
    value: String,
    line: usize,
    value_col: usize,
}

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (n, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..n],
            _ => {}
        }
    }
    line
}

fn split_entries(text: &str) -> Result<Vec<Entry>, ScenarioError> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = strip_comment(raw);
        let trimmed = body.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('[') {
            if !trimmed.ends_with(']') {
                return Err(ScenarioError::Syntax { line, message: "unterminated section header".into() });
            }
            section = trimmed[1..trimmed.len() - 1].trim().to_string();
            continue;
        }
        let Some(eq) = body.find('=') else {
            return Err(ScenarioError::Syntax { line, message: "expected `key = value`".into() });
        };
        let key_part = body[..eq].trim();
        let (key, index) = match key_part.find('[') {
            Some(open) => {
                if !key_part.ends_with(']') {
                    return Err(ScenarioError::Syntax { line, message: format!("malformed key `{key_part}`") });
                }
                let idx: usize = key_part[open + 1..key_part.len() - 1].trim().parse().map_err(|_| {
                    ScenarioError::Syntax { line, message: format!("bad regime index in `{key_part}`") }
                })?;
                (key_part[..open].trim().to_string(), Some(idx))
            }
            None => (key_part.to_string(), None),
        };
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(ScenarioError::Syntax { line, message: format!("malformed key `{key_part}`") });
        }
        let after = &body[eq + 1..];
        let lead = after.len() - after.trim_start().len();
        let mut value = after.trim().to_string();
        let mut value_col = body[..eq + 1].chars().count() + lead + 1;
        if value.starts_with('"') {
            if value.len() < 2 || !value.ends_with('"') {
                return Err(ScenarioError::Syntax { line, message: "unterminated string".into() });
            }
            value = value[1..value.len() - 1].to_string();
            value_col += 1;
        }
        out.push(Entry { section: section.clone(), key, index, value, line, value_col });
    }
    Ok(out)
}

const KNOWN: &[(&str, &[&str])] = &[
    ("", &["name"]),
    ("chain", &["regimes", "generator", "initial", "jump_cap"]),
    ("grids", &["horizon", "time_steps", "x_min", "x_max", "x_points"]),
    ("dynamics", &["b1", "b2", "sigma", "mu0"]),
    ("cost", &["g1", "g2", "h", "psi", "u_min", "u_max"]),
    ("discount", &["running", "terminal"]),
    ("solver", &["tol", "max_iter", "inner_iters", "damping", "seed", "gradient_bound"]),
];

const INDEXED: &[&str] = &["b1", "b2", "g1", "g2", "h", "psi"];

fn allowed_vars(slot: &str) -> &'static [Var] {
    match slot {
        "sigma" => &[Var::T, Var::X],
        "b1" | "g1" => &[Var::T, Var::I, Var::X, Var::V],
        "b2" => &[Var::T, Var::I, Var::X, Var::M1, Var::M2],
        "g2" => &[Var::Tau, Var::T, Var::I, Var::X, Var::M1, Var::M2],
        "h" => &[Var::Tau, Var::I, Var::X, Var::M1, Var::M2],
        "psi" => &[Var::T, Var::I, Var::X, Var::P],
        "running" | "terminal" => &[Var::Tau, Var::T],
        _ => &[],
    }
}

struct Table {
    entries: Vec<Entry>,
    params: BTreeMap<String, f64>,
}

impl Table {
    fn find(&self, section: &str, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.section == section && e.key == key && e.index.is_none())
    }

    fn number(&self, section: &str, key: &str) -> Result<Option<f64>, ScenarioError> {
        let Some(e) = self.find(section, key) else { return Ok(None) };
        let v = CoefficientExpr::parse_with(&e.value, &self.params)
            .ok()
            .filter(|x| x.is_constant())
            .and_then(|x| x.eval(&Bindings::new()).ok())
            .ok_or_else(|| ScenarioError::Syntax {
                line: e.line,
                message: format!("`{key}` must be a number, got `{}`", e.value),
            })?;
        Ok(Some(v))
    }

    fn required_number(&self, section: &str, key: &str) -> Result<f64, ScenarioError> {
        self.number(section, key)?.ok_or_else(|| ScenarioError::Missing(format!("{section}.{key}")))
    }

    fn integer(&self, section: &str, key: &str) -> Result<Option<usize>, ScenarioError> {
        let Some(v) = self.number(section, key)? else { return Ok(None) };
        if v < 0.0 || v.fract() != 0.0 {
            let line = self.find(section, key).map_or(0, |e| e.line);
            return Err(ScenarioError::Syntax { line, message: format!("`{key}` must be a nonnegative integer") });
        }
        Ok(Some(v as usize))
    }

    fn expr(&self, e: &Entry, slot: &str) -> Result<CoefficientExpr, ScenarioError> {
        let parsed = CoefficientExpr::parse_with(&e.value, &self.params).map_err(|pe| ScenarioError::Expr {
            line: e.line,
            column: e.value_col + pe.column - 1,
            message: pe.message,
        })?;
        let allowed = allowed_vars(slot);
        if let Some(bad) = parsed.variables().into_iter().find(|v| !allowed.contains(v)) {
            return Err(ScenarioError::ForbiddenVariable {
                line: e.line,
                slot: slot.to_string(),
                var: bad.name(),
                allowed: allowed.iter().map(|v| v.name()).collect::<Vec<_>>().join(", "),
            });
        }
        Ok(parsed)
    }

    /// Default expression plus per-regime overrides.
    fn regime_exprs(
        &self,
        section: &str,
        slot: &str,
        m: usize,
        default: Option<&str>,
    ) -> Result<RegimeExprs, ScenarioError> {
        let base = match self.find(section, slot) {
            Some(e) => Some(self.expr(e, slot)?),
            None => default.map(|d| CoefficientExpr::parse(d).expect("built-in default parses")),
        };
        let mut out: Vec<Option<CoefficientExpr>> = vec![base; m];
        for e in self.entries.iter().filter(|e| e.section == section && e.key == slot && e.index.is_some()) {
            let idx = e.index.unwrap_or(0);
            if idx == 0 || idx > m {
                return Err(ScenarioError::Syntax {
                    line: e.line,
                    message: format!("regime index {idx} out of range 1..={m}"),
                });
            }
            out[idx - 1] = Some(self.expr(e, slot)?);
        }
        let exprs = out
            .into_iter()
            .enumerate()
            .map(|(i, e)| e.ok_or_else(|| ScenarioError::Missing(format!("{section}.{slot} (regime {})", i + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RegimeExprs(exprs))
    }
}

fn parse_call<'a>(value: &'a str, name: &str) -> Option<Vec<&'a str>> {
    let v = value.trim();
    let rest = v.strip_prefix(name)?.trim_start();
    let inner = rest.strip_prefix('(')?.strip_suffix(')')?;
    Some(inner.split(',').map(str::trim).collect())
}

fn parse_numbers(parts: &[&str], line: usize, what: &str) -> Result<Vec<f64>, ScenarioError> {
    parts
        .iter()
        .map(|p| {
            p.parse::<f64>().map_err(|_| ScenarioError::Syntax { line, message: format!("bad number `{p}` in {what}") })
        })
        .collect()
}

fn parse_matrix(value: &str, line: usize) -> Result<Vec<Vec<f64>>, ScenarioError> {
    let compact: String = value.chars().filter(|c| !c.is_whitespace()).collect();
    let inner = compact
        .strip_prefix("[[")
        .and_then(|s| s.strip_suffix("]]"))
        .ok_or_else(|| ScenarioError::Syntax { line, message: "generator must look like [[..], [..]]".into() })?;
    inner
        .split("],[")
        .map(|row| parse_numbers(&row.split(',').collect::<Vec<_>>(), line, "generator"))
        .collect()
}

fn parse_mu0(value: &str, line: usize) -> Result<InitialLaw, ScenarioError> {
    let bad = |msg: &str| ScenarioError::Syntax { line, message: msg.to_string() };
    if let Some(a) = parse_call(value, "gaussian") {
        let v = parse_numbers(&a, line, "mu0")?;
        if v.len() != 2 || v[1] <= 0.0 {
            return Err(bad("gaussian(mean, std) needs two numbers and std > 0"));
        }
        return Ok(InitialLaw::Gaussian { mean: v[0], std: v[1] });
    }
    if let Some(a) = parse_call(value, "point") {
        let v = parse_numbers(&a, line, "mu0")?;
        if v.len() != 1 {
            return Err(bad("point(x) needs one number"));
        }
        return Ok(InitialLaw::Point { x: v[0] });
    }
    if let Some(a) = parse_call(value, "uniform") {
        let v = parse_numbers(&a, line, "mu0")?;
        if v.len() != 2 || v[1] <= v[0] {
            return Err(bad("uniform(a, b) needs a < b"));
        }
        return Ok(InitialLaw::Uniform { a: v[0], b: v[1] });
    }
    if let Some(a) = parse_call(value, "histogram") {
        return Ok(InitialLaw::Histogram(parse_numbers(&a, line, "mu0")?));
    }
    Err(bad("mu0 must be gaussian(..), point(..), uniform(..) or histogram(..)"))
}

/// Parses scenario text with explicit validation options.
pub fn parse_scenario_with(text: &str, opts: ParseOptions) -> Result<Scenario, ScenarioError> {
    let all = split_entries(text)?;
    let mut params = BTreeMap::new();
    let mut entries = Vec::new();
    for e in all {
        if e.section == "params" {
            let v = CoefficientExpr::parse_with(&e.value, &params)
                .ok()
                .filter(|x| x.is_constant())
                .and_then(|x| x.eval(&Bindings::new()).ok())
                .ok_or_else(|| ScenarioError::Syntax {
                    line: e.line,
                    message: format!("parameter `{}` must be a constant", e.key),
                })?;
            if crate::expr::Var::ALL.iter().any(|var| var.name() == e.key) {
                return Err(ScenarioError::Syntax { line: e.line, message: format!("`{}` is a reserved variable", e.key) });
            }
            params.insert(e.key.clone(), v);
            continue;
        }
        let Some((_, keys)) = KNOWN.iter().find(|(s, _)| *s == e.section) else {
            return Err(ScenarioError::Syntax { line: e.line, message: format!("unknown section [{}]", e.section) });
        };
        if !keys.contains(&e.key.as_str()) || (e.index.is_some() && !INDEXED.contains(&e.key.as_str())) {
            return Err(ScenarioError::UnknownKey { line: e.line, section: e.section.clone(), key: e.key.clone() });
        }
        if entries.iter().any(|o: &Entry| o.section == e.section && o.key == e.key && o.index == e.index) {
            return Err(ScenarioError::Syntax { line: e.line, message: format!("duplicate key `{}`", e.key) });
        }
        entries.push(e);
    }
    let t = Table { entries, params };

    // chain
    let generator = match t.find("chain", "generator") {
        Some(e) => {
            let gen = if let Some(a) = parse_call(&e.value, "symmetric") {
                let rate = parse_numbers(&a, e.line, "generator")?;
                let m = t.integer("chain", "regimes")?.ok_or_else(|| ScenarioError::Missing("chain.regimes".into()))?;
                if rate.len() != 1 || m == 0 {
                    return Err(ScenarioError::Syntax { line: e.line, message: "symmetric(rate) needs regimes >= 1".into() });
                }
                Generator::symmetric(m, rate[0])
            } else {
                Generator::from_rows(&parse_matrix(&e.value, e.line)?)
                    .map_err(|err| ScenarioError::Syntax { line: e.line, message: err.to_string() })?
            };
            gen.validate().map_err(|v| ScenarioError::Invalid(format!("generator: {v}")))?;
            gen
        }
        None => match t.integer("chain", "regimes")? {
            Some(1) | None => Generator::from_rows(&[vec![0.0]]).expect("1x1"),
            Some(_) => return Err(ScenarioError::Missing("chain.generator".into())),
        },
    };
    let m = generator.regimes();
    if let Some(r) = t.integer("chain", "regimes")? {
        if r != m {
            return Err(ScenarioError::Invalid(format!("chain.regimes = {r} but the generator is {m}x{m}")));
        }
    }
    let initial = t.integer("chain", "initial")?.unwrap_or(1);
    if initial == 0 || initial > m {
        return Err(ScenarioError::Invalid(format!("chain.initial = {initial} outside 1..={m}")));
    }
    let jump_cap = t.integer("chain", "jump_cap")?.unwrap_or(2);

    // grids
    let horizon = t.required_number("grids", "horizon")?;
    let steps = t.integer("grids", "time_steps")?.ok_or_else(|| ScenarioError::Missing("grids.time_steps".into()))?;
    let x_min = t.required_number("grids", "x_min")?;
    let x_max = t.required_number("grids", "x_max")?;
    let x_points = t.integer("grids", "x_points")?.ok_or_else(|| ScenarioError::Missing("grids.x_points".into()))?;
    if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
        return Err(ScenarioError::Invalid("need horizon > 0 and time_steps >= 1".into()));
    }
    if !(x_max > x_min) || x_points < 3 {
        return Err(ScenarioError::Invalid("need x_max > x_min and x_points >= 3".into()));
    }

    // dynamics
    let b1 = t.regime_exprs("dynamics", "b1", m, None)?;
    let b2 = t.regime_exprs("dynamics", "b2", m, Some("0"))?;
    let sigma_entry = t.find("dynamics", "sigma").ok_or_else(|| ScenarioError::Missing("dynamics.sigma".into()))?;
    let sigma = t.expr(sigma_entry, "sigma")?;
    let mu0_entry = t.find("dynamics", "mu0").ok_or_else(|| ScenarioError::Missing("dynamics.mu0".into()))?;
    let mu0 = parse_mu0(&mu0_entry.value, mu0_entry.line)?;

    // cost
    let g1 = t.regime_exprs("cost", "g1", m, None)?;
    let g2 = t.regime_exprs("cost", "g2", m, Some("0"))?;
    let h = t.regime_exprs("cost", "h", m, Some("0"))?;
    let u_min = t.required_number("cost", "u_min")?;
    let u_max = t.required_number("cost", "u_max")?;
    if !(u_min.is_finite() && u_max.is_finite()) || u_min > u_max {
        return Err(ScenarioError::Invalid(format!("action set [{u_min}, {u_max}] is not a compact interval")));
    }
    let psi_entry = t.find("cost", "psi");
    let psi = match psi_entry.and_then(|e| parse_call(&e.value, "lq").map(|a| (e, a))) {
        Some((e, a)) => {
            let c = parse_numbers(&a, e.line, "psi")?;
            if c.len() != 1 || !(c[0] > 0.0) {
                return Err(ScenarioError::Invalid("built-in lq(c) requires c > 0".into()));
            }
            Psi::Lq { c: c[0] }
        }
        None => Psi::Expr(t.regime_exprs("cost", "psi", m, None)?),
    };

    // discount
    let running_discount = t.find("discount", "running").map(|e| t.expr(e, "running")).transpose()?;
    let terminal_discount = t.find("discount", "terminal").map(|e| t.expr(e, "terminal")).transpose()?;

    // solver
    let defaults = SolverSettings::default();
    let solver = SolverSettings {
        tol: t.number("solver", "tol")?.unwrap_or(defaults.tol),
        max_iter: t.integer("solver", "max_iter")?.unwrap_or(defaults.max_iter),
        inner_iters: t.integer("solver", "inner_iters")?.unwrap_or(defaults.inner_iters),
        damping: t.number("solver", "damping")?.unwrap_or(defaults.damping),
        seed: t.integer("solver", "seed")?.map_or(defaults.seed, |s| s as u64),
        gradient_bound: t.number("solver", "gradient_bound")?.unwrap_or(defaults.gradient_bound),
    };
    if !(solver.tol > 0.0) || !(0.0..1.0).contains(&solver.damping) {
        return Err(ScenarioError::Invalid("need tol > 0 and damping in [0, 1)".into()));
    }
    let name = t.find("", "name").map_or_else(|| "unnamed".to_string(), |e| e.value.clone());

    let mut scenario = Scenario {
        name,
        generator,
        initial_regime: initial - 1,
        jump_cap,
        time: TimeGrid::new(horizon, steps),
        space: SpatialGrid::new(x_min, x_max, x_points),
        mu0,
        sigma,
        b1,
        b2,
        g1,
        g2,
        h,
        running_discount,
        terminal_discount,
        psi,
        u_min,
        u_max,
        solver,
        params: t.params,
        warnings: Vec::new(),
        source: text.to_string(),
    };
    scenario.initial_density()?;
    if opts.require_ellipticity {
        scenario.check_ellipticity()?;
    }
    scenario.smoke_evaluate()?;
    scenario.warnings = scenario.lint_psi();
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
name = "minimal lq"
[chain]
regimes = 2
generator = [[-1, 1], [1, -1]]
initial = 1
jump_cap = 2

[grids]
horizon = 0.5
time_steps = 10
x_min = -4
x_max = 4
x_points = 41

[dynamics]
b1 = "v"
b2 = "0.2*m1"
sigma = "0.5"
mu0 = gaussian(1.0, 0.5)

[cost]
g1 = "v^2/2"
g2 = "x^2/2"
h = "x^2/2"
psi = lq(1)
u_min = -1
u_max = 1
"#;

    fn replace(key_line: &str, new_line: &str) -> String {
        MINIMAL.replace(key_line, new_line)
    }

    #[test]
    fn minimal_parses() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.name, "minimal lq");
        assert_eq!(s.psi, Psi::Lq { c: 1.0 });
        assert_eq!(s.regimes(), 2);
        assert!(!s.tau_dependent());
        assert!(s.measure_dependent());
        assert!(s.regime_independent());
        assert!(s.warnings.is_empty(), "{:?}", s.warnings);
        assert_eq!(s.solver, SolverSettings::default());
    }

    #[test]
    fn tau_in_b1_rejected() {
        let err = parse_scenario(&replace("b1 = \"v\"", "b1 = \"v + tau\"")).unwrap_err();
        assert!(matches!(err, ScenarioError::ForbiddenVariable { var: "tau", .. }), "{err}");
    }

    #[test]
    fn zero_sigma_rejected() {
        let err = parse_scenario(&replace("sigma = \"0.5\"", "sigma = \"0\"")).unwrap_err();
        assert!(err.to_string().contains("ellipticity"), "{err}");
        let ok = parse_scenario_with(
            &replace("sigma = \"0.5\"", "sigma = \"0\""),
            ParseOptions { require_ellipticity: false },
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn syntax_errors_cite_lines() {
        let err = parse_scenario(&replace("g1 = \"v^2/2\"", "g1 = \"v^2/*2\"")).unwrap_err();
        match err {
            ScenarioError::Expr { line, column, .. } => {
                assert_eq!(line, 23);
                assert!(column > 6);
            }
            other => panic!("unexpected {other}"),
        }
        let err = parse_scenario(&replace("x_points = 41", "x_points 41")).unwrap_err();
        assert!(matches!(err, ScenarioError::Syntax { line: 14, .. }), "{err}");
        let err = parse_scenario(&replace("x_points = 41", "x_pts = 41")).unwrap_err();
        assert!(matches!(err, ScenarioError::UnknownKey { line: 14, .. }), "{err}");
    }

    #[test]
    fn nonpositive_lq_cost_rejected() {
        let err = parse_scenario(&replace("psi = lq(1)", "psi = lq(0)")).unwrap_err();
        assert!(err.to_string().contains("c > 0"));
    }

    #[test]
    fn psi_lq_values() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.psi(0.0, 0, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(s.psi(0.0, 0, 0.0, 0.5).unwrap(), -0.5);
        assert_eq!(s.psi(0.0, 0, 0.0, 3.0).unwrap(), -1.0);
    }

    #[test]
    fn psi_lq_matches_grid_search() {
        let s = parse_scenario(MINIMAL).unwrap();
        let n = 10_000;
        for k in 0..100 {
            let p = -4.0 + 8.0 * (k as f64 + 0.37) / 100.0;
            let u = s.psi(0.0, 0, 0.0, p).unwrap();
            let f = |v: f64| p * v + v * v / 2.0;
            let best = (0..=n).map(|j| -1.0 + 2.0 * j as f64 / n as f64).map(f).fold(f64::INFINITY, f64::min);
            assert!(f(u) <= best + 1e-9, "p={p}");
        }
    }

    #[test]
    fn psi_lipschitz_in_p() {
        let s = parse_scenario(&replace("psi = lq(1)", "psi = lq(2)")).unwrap();
        let h = 1e-4;
        for k in 0..200 {
            let p = -6.0 + 12.0 * k as f64 / 200.0;
            let d = (s.psi(0.0, 0, 0.0, p + h).unwrap() - s.psi(0.0, 0, 0.0, p).unwrap()).abs() / h;
            assert!(d <= 0.5 + 1e-9);
        }
    }

    #[test]
    fn regime_indexed_overrides() {
        let text = replace("b2 = \"0.2*m1\"", "b2 = \"0.2*m1\"\nb2[2] = \"0.2*m1 + 0.1*i\"");
        let s = parse_scenario(&text).unwrap();
        assert_eq!(s.b2(0.0, 0, 0.0, (1.0, 0.0)).unwrap(), 0.2);
        assert!((s.b2(0.0, 1, 0.0, (1.0, 0.0)).unwrap() - 0.4).abs() < 1e-15);
        assert!(!s.regime_independent());
        let err = parse_scenario(&replace("b2 = \"0.2*m1\"", "b2[3] = \"0\"")).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn discount_and_params() {
        let text = format!(
            "{MINIMAL}\n[params]\nlambda = 0.5\n[discount]\nrunning = \"1/(1 + lambda*(t - tau))\"\n"
        );
        let s = parse_scenario(&text).unwrap();
        assert!(s.tau_dependent());
        let v = s.g2(0.0, 0.5, 0, 2.0, (0.0, 0.0)).unwrap();
        assert!((v - 2.0 / 1.25).abs() < 1e-14);
    }

    #[test]
    fn expression_psi_lint() {
        let good = replace("psi = lq(1)", "psi = \"clamp(-p, -1, 1)\"");
        assert!(parse_scenario(&good).unwrap().warnings.is_empty());
        let bad = replace("psi = lq(1)", "psi = \"clamp(p, -1, 1)\"");
        assert!(!parse_scenario(&bad).unwrap().warnings.is_empty());
    }

    #[test]
    fn gaussian_initial_density() {
        let s = parse_scenario(MINIMAL).unwrap();
        let d = s.initial_density().unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let mean: f64 = d.iter().enumerate().map(|(i, m)| s.space.x(i) * m).sum();
        assert!((mean - 1.0).abs() < 1e-6);
    }
}
