//! Outer fixed point `u -> T2(T1(u))` and its contraction diagnostics.

use serde::Serialize;
use thiserror::Error;

use crate::hjb::{hjb_backward_solve_with, HjbDiagnostics, HjbError, HjbOptions, ValueTensor};
use crate::meanfield_flow::{propagate_flow, DensityField, FlowError, StrategyField};
use crate::path_space::{PathError, PathTree, TreeStats};
use crate::scenario::Scenario;

/// Growth over the smallest distance seen that counts as divergence. A run
/// that exhausts its iterations with an empirical contraction of at least 1
/// is reported as diverged as well.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum EquilibriumError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("strategy shapes differ ({0} vs {1} nodes)")]
    Shape(usize, usize),
    #[error("invalid settings: {0}")]
    Settings(String),
}

/// Sup-norm distance over all decision nodes and grid points.
pub fn strategy_distance(a: &StrategyField, b: &StrategyField) -> Result<f64, EquilibriumError> {
    if a.len() != b.len() {
        return Err(EquilibriumError::Shape(a.len(), b.len()));
    }
    let mut d = 0.0f64;
    for (x, y) in a.values().iter().zip(b.values()) {
        if x.len() != y.len() {
            return Err(EquilibriumError::Shape(x.len(), y.len()));
        }
        for (p, q) in x.iter().zip(y) {
            d = d.max((p - q).abs());
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Outcome {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

impl IterationSettings {
    pub fn for_scenario(s: &Scenario) -> Self {
        Self { tol: s.solver.tol, max_iter: s.solver.max_iter, damping: s.solver.damping }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumResult {
    pub strategy: StrategyField,
    pub zeta: DensityField,
    pub theta: ValueTensor,
    pub iterations: usize,
    /// `|u_{i+1} - u_i|` after each composed step.
    pub distance_history: Vec<f64>,
    pub converged: bool,
    pub outcome: Outcome,
    /// Largest ratio of consecutive distances.
    pub empirical_contraction: f64,
    pub damping: f64,
    pub tree_stats: TreeStats,
    pub hjb: HjbDiagnostics,
}

/// Ratios of consecutive distances whose predecessor is above round-off.
fn ratios(history: &[f64]) -> Vec<f64> {
    history.windows(2).filter(|w| w[0] > 1e-13).map(|w| w[1] / w[0]).collect()
}

/// One composed application `T2(T1(u))`.
pub fn compose_step(
    s: &Scenario,
    tree: &PathTree,
    u: &StrategyField,
    opts: &HjbOptions<'_>,
) -> Result<(DensityField, crate::hjb::HjbSolution), EquilibriumError> {
    let zeta = propagate_flow(s, u, tree)?;
    let sol = hjb_backward_solve_with(s, &zeta, tree, opts)?;
    Ok((zeta, sol))
}

/// Iterates `u_{i+1} = (1-g) T2(T1(u_i)) + g u_i` from `u0` (zero-gradient
/// feedback by default) until the sup-norm step falls below `tol`.
pub fn fp_iteration(
    s: &Scenario,
    tree: &PathTree,
    u0: Option<StrategyField>,
    settings: &IterationSettings,
) -> Result<EquilibriumResult, EquilibriumError> {
    if !(settings.tol > 0.0) || !(0.0..1.0).contains(&settings.damping) || settings.max_iter == 0 {
        return Err(EquilibriumError::Settings(format!(
            "need tol > 0, damping in [0, 1) and max_iter >= 1 (got {settings:?})"
        )));
    }
    let opts = HjbOptions::for_scenario(s);
    let mut u = match u0 {
        Some(u) => u,
        None => StrategyField::zero_gradient(s, tree)?,
    };
    let mut history = Vec::new();
    let mut min_dist = f64::INFINITY;
    let mut outcome = Outcome::MaxIterations;
    let mut last = None;
    for _ in 0..settings.max_iter {
        let (zeta, sol) = compose_step(s, tree, &u, &opts)?;
        let mut next = sol.strategy.clone();
        if settings.damping > 0.0 {
            let g = settings.damping;
            let blended = next
                .values()
                .iter()
                .zip(u.values())
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (1.0 - g) * x + g * y).collect())
                .collect();
            let (lo, hi) = next.bounds();
            next = StrategyField::from_values(blended, lo, hi);
        }
        let d = strategy_distance(&next, &u)?;
        history.push(d);
        min_dist = min_dist.min(d);
        u = next;
        last = Some((zeta, sol));
        if d <= settings.tol {
            outcome = Outcome::Converged;
            break;
        }
        if d > DIVERGENCE_FACTOR * min_dist || !d.is_finite() {
            outcome = Outcome::Diverged;
            break;
        }
    }
    let (zeta, sol) = last.expect("at least one iteration");
    let empirical_contraction = ratios(&history).into_iter().fold(0.0, f64::max);
    // bounded action sets can cap the distances; an expanding map that never
    // settled is still a divergence
    if outcome == Outcome::MaxIterations && empirical_contraction >= 1.0 {
        outcome = Outcome::Diverged;
    }
    Ok(EquilibriumResult {
        strategy: u,
        zeta,
        theta: sol.theta,
        iterations: history.len(),
        distance_history: history,
        converged: outcome == Outcome::Converged,
        outcome,
        empirical_contraction,
        damping: settings.damping,
        tree_stats: tree.stats(),
        hjb: sol.diagnostics,
    })
}

/// Builds the tree and runs the fixed point with the scenario's settings.
pub fn solve(s: &Scenario) -> Result<(PathTree, EquilibriumResult), EquilibriumError> {
    let tree = s.tree()?;
    let result = fp_iteration(s, &tree, None, &IterationSettings::for_scenario(s))?;
    Ok((tree, result))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub distances: Vec<f64>,
    pub ratios: Vec<f64>,
    pub max_ratio: Option<f64>,
    /// `exp` of the least-squares slope of `log d_i`.
    pub geometric_rate: Option<f64>,
    pub insufficient_data: bool,
    pub non_monotone: bool,
    pub truncated_mass: Option<f64>,
    pub boundary_leakage: Option<f64>,
    pub damping: Option<f64>,
}

impl ContractionReport {
    pub fn from_history(history: &[f64]) -> Self {
        let r = ratios(history);
        let positive: Vec<(f64, f64)> =
            history.iter().enumerate().filter(|(_, d)| **d > 1e-13).map(|(i, d)| (i as f64, d.ln())).collect();
        let geometric_rate = (positive.len() >= 2).then(|| {
            let n = positive.len() as f64;
            let mx = positive.iter().map(|p| p.0).sum::<f64>() / n;
            let my = positive.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy: f64 = positive.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = positive.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
            (sxy / sxx).exp()
        });
        Self {
            distances: history.to_vec(),
            max_ratio: r.iter().copied().reduce(f64::max),
            non_monotone: history.windows(2).any(|w| w[1] > w[0]),
            insufficient_data: history.len() < 2,
            ratios: r,
            geometric_rate,
            truncated_mass: None,
            boundary_leakage: None,
            damping: None,
        }
    }
}

pub fn contraction_report(result: &EquilibriumResult) -> ContractionReport {
    let mut r = ContractionReport::from_history(&result.distance_history);
    r.truncated_mass = Some(result.tree_stats.truncated_mass);
    r.boundary_leakage = Some(result.zeta.boundary_leakage());
    r.damping = (result.damping > 0.0).then_some(result.damping);
    r
}
