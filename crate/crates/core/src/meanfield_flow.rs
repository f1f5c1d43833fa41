//! Forward propagation of the conditional population law along the path tree.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::grid::SpatialGrid;
use crate::path_space::{skorohod_distance, NodeId, PathTree, RegimePath};
use crate::scenario::{CoefficientError, Scenario, ScenarioError};

/// Negative mass tolerated (and clipped) before a step is declared unstable.
pub const NEGATIVE_MASS_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("scheme instability: mass {mass:e} at cell {cell} (drift {drift}, sigma {sigma}, dt {dt})")]
    Instability { cell: usize, mass: f64, drift: f64, sigma: f64, dt: f64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("strategy missing for node {0}")]
    MissingStrategy(usize),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// `(sum x m, sum x^2 m)` of a cell-mass vector.
pub fn moments(density: &[f64], grid: &SpatialGrid) -> (f64, f64) {
    density.iter().enumerate().fold((0.0, 0.0), |(m1, m2), (i, &m)| {
        let x = grid.x(i);
        (m1 + x * m, m2 + x * x * m)
    })
}

/// Conditional law per tree node, with cached moments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityField {
    grid: SpatialGrid,
    densities: Vec<Vec<f64>>,
    moments: Vec<(f64, f64)>,
}

impl DensityField {
    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.densities.is_empty()
    }

    pub fn density(&self, id: NodeId) -> &[f64] {
        &self.densities[id.0]
    }

    pub fn moments(&self, id: NodeId) -> (f64, f64) {
        self.moments[id.0]
    }

    pub fn variance(&self, id: NodeId) -> f64 {
        let (m1, m2) = self.moments[id.0];
        m2 - m1 * m1
    }

    /// Largest mass held by an end cell over all nodes.
    pub fn boundary_leakage(&self) -> f64 {
        self.densities.iter().map(|d| d[0].max(d[d.len() - 1])).fold(0.0, f64::max)
    }

    /// Builds a field from per-node densities, recomputing moments.
    pub fn from_densities(grid: SpatialGrid, densities: Vec<Vec<f64>>) -> Result<Self, FlowError> {
        for d in &densities {
            if d.len() != grid.len() {
                return Err(FlowError::Shape { expected: grid.len(), got: d.len() });
            }
        }
        let moments = densities.iter().map(|d| moments(d, &grid)).collect();
        Ok(Self { grid, densities, moments })
    }
}

/// Feedback control per node at levels `0..N_t`, on the spatial grid.
///
/// Leaves carry empty vectors: no decision is taken at the horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyField {
    values: Vec<Vec<f64>>,
    u_min: f64,
    u_max: f64,
}

impl StrategyField {
    /// Evaluates `f(k, node, i)` on every decision node, clamped to `[u_min, u_max]`.
    pub fn from_fn<F>(tree: &PathTree, grid: &SpatialGrid, u_min: f64, u_max: f64, f: F) -> Self
    where
        F: Fn(usize, &crate::path_space::PathNode, usize) -> f64,
    {
        let steps = tree.steps();
        let values = tree
            .nodes()
            .iter()
            .map(|n| {
                if n.time_index < steps {
                    (0..grid.len()).map(|i| f(n.time_index, n, i).clamp(u_min, u_max)).collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self { values, u_min, u_max }
    }

    pub fn constant(tree: &PathTree, grid: &SpatialGrid, u_min: f64, u_max: f64, value: f64) -> Self {
        Self::from_fn(tree, grid, u_min, u_max, |_, _, _| value)
    }

    /// Zero-gradient feedback `psi(t_k, regime, x, 0)`.
    pub fn zero_gradient(s: &Scenario, tree: &PathTree) -> Result<Self, FlowError> {
        let steps = tree.steps();
        let values = tree
            .nodes()
            .iter()
            .map(|n| {
                if n.time_index < steps {
                    let t = tree.times()[n.time_index];
                    (0..s.space.len()).map(|i| s.psi(t, n.regime, s.space.x(i), 0.0)).collect()
                } else {
                    Ok(Vec::new())
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { values, u_min: s.u_min, u_max: s.u_max })
    }

    /// Wraps raw per-node values; entries are clamped to the action set.
    pub fn from_values(values: Vec<Vec<f64>>, u_min: f64, u_max: f64) -> Self {
        let values = values.into_iter().map(|v| v.into_iter().map(|x| x.clamp(u_min, u_max)).collect()).collect();
        Self { values, u_min, u_max }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.u_min, self.u_max)
    }

    pub fn get(&self, id: NodeId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: NodeId) -> &mut Vec<f64> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Applies `f` to every entry and re-clamps.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let (lo, hi) = (self.u_min, self.u_max);
        Self {
            values: self.values.iter().map(|v| v.iter().map(|&x| f(x).clamp(lo, hi)).collect()).collect(),
            u_min: lo,
            u_max: hi,
        }
    }

    /// Largest spatial difference quotient over all nodes.
    pub fn lipschitz_ratio(&self, grid: &SpatialGrid) -> f64 {
        let dx = grid.dx();
        self.values
            .iter()
            .flat_map(|v| v.windows(2).map(move |w| (w[1] - w[0]).abs() / dx))
            .fold(0.0, f64::max)
    }
}

/// Thomas algorithm for `lower[i] y[i-1] + diag[i] y[i] + upper[i] y[i+1] = rhs[i]`.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return None;
    }
    c[0] = upper[0] / denom;
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return None;
        }
        c[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Some(d)
}

#[inline]
fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// One forward step of `d_t m + d_x(b m) = d_xx(sigma^2 m / 2)` on cell masses.
///
/// Advection is explicit, MUSCL with a minmod limiter, Heun in time and substepped to
/// CFL 1/2; diffusion is implicit. Both use zero-flux boundaries.
pub fn fokker_planck_step(
    density: &[f64],
    drift: &[f64],
    sigma: &[f64],
    dt: f64,
    grid: &SpatialGrid,
) -> Result<Vec<f64>, FlowError> {
    let n = grid.len();
    for v in [density, drift, sigma] {
        if v.len() != n {
            return Err(FlowError::Shape { expected: n, got: v.len() });
        }
    }
    let dx = grid.dx();
    let mut m = density.to_vec();

    // advection
    let vmax = (0..n - 1).map(|i| (0.5 * (drift[i] + drift[i + 1])).abs()).fold(0.0, f64::max);
    let subs = ((vmax * dt / (0.5 * dx)).ceil() as usize).max(1);
    let h = dt / subs as f64;
    let face_velocity: Vec<f64> = (1..n).map(|f| 0.5 * (drift[f - 1] + drift[f])).collect();
    let mut flux = vec![0.0; n + 1];
    // forward-Euler update of `m` into `out`
    let mut euler = |m: &[f64], out: &mut [f64]| {
        let slope = |i: usize| -> f64 {
            if i == 0 || i == n - 1 {
                0.0
            } else {
                minmod(m[i] - m[i - 1], m[i + 1] - m[i])
            }
        };
        for f in 1..n {
            let v = face_velocity[f - 1];
            let face = if v >= 0.0 { m[f - 1] + 0.5 * slope(f - 1) } else { m[f] - 0.5 * slope(f) };
            flux[f] = v * face * h / dx;
        }
        for i in 0..n {
            out[i] = m[i] - (flux[i + 1] - flux[i]);
        }
    };
    // Heun / SSP-RK2 sub-steps
    let mut stage = vec![0.0; n];
    let mut second = vec![0.0; n];
    for _ in 0..subs {
        euler(&m, &mut stage);
        euler(&stage, &mut second);
        for i in 0..n {
            m[i] = 0.5 * (m[i] + second[i]);
        }
    }
    check_nonnegative(&mut m, drift, sigma, dt)?;

    // diffusion
    let c = dt / (dx * dx);
    let d: Vec<f64> = sigma.iter().map(|s| 0.5 * s * s).collect();
    let mut lower = vec![0.0; n];
    let mut diag = vec![1.0; n];
    let mut upper = vec![0.0; n];
    for i in 0..n {
        if i > 0 {
            lower[i] = -c * d[i - 1];
            diag[i] += c * d[i];
        }
        if i + 1 < n {
            upper[i] = -c * d[i + 1];
            diag[i] += c * d[i];
        }
    }
    let mut out = solve_tridiagonal(&lower, &diag, &upper, &m)
        .ok_or_else(|| FlowError::InvalidDensity("singular diffusion system".into()))?;
    check_nonnegative(&mut out, drift, sigma, dt)?;
    let total: f64 = out.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(FlowError::InvalidDensity(format!("total mass {total}")));
    }
    out.iter_mut().for_each(|x| *x /= total);
    Ok(out)
}

fn check_nonnegative(m: &mut [f64], drift: &[f64], sigma: &[f64], dt: f64) -> Result<(), FlowError> {
    for (i, x) in m.iter_mut().enumerate() {
        if *x < 0.0 {
            if *x < -NEGATIVE_MASS_TOL || !x.is_finite() {
                return Err(FlowError::Instability { cell: i, mass: *x, drift: drift[i], sigma: sigma[i], dt });
            }
            *x = 0.0;
        }
    }
    Ok(())
}

/// Per-cell drift `b1(t,i,x,u) + b2(t,i,x,m1,m2)` and volatility at a node.
pub fn node_coefficients(
    s: &Scenario,
    t: f64,
    regime: usize,
    control: &[f64],
    moments: (f64, f64),
) -> Result<(Vec<f64>, Vec<f64>), CoefficientError> {
    let n = s.space.len();
    let mut drift = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for (i, &u) in control.iter().enumerate() {
        let x = s.space.x(i);
        drift.push(s.b1(t, regime, x, u)? + s.b2(t, regime, x, moments)?);
        sigma.push(s.sigma(t, x)?);
    }
    Ok((drift, sigma))
}

/// Propagates `mu0` along the tree under the feedback `u`.
///
/// Each parent is stepped once over `[t_k, t_{k+1})` with its own regime,
/// control and moments; the result is shared by all of its children.
pub fn propagate_flow(s: &Scenario, u: &StrategyField, tree: &PathTree) -> Result<DensityField, FlowError> {
    let grid = s.space.clone();
    let root = s.initial_density()?;
    let mut densities: Vec<Vec<f64>> = vec![Vec::new(); tree.len()];
    densities[0] = root;
    let times = tree.times();
    for k in 0..tree.steps() {
        let (t, dt) = (times[k], times[k + 1] - times[k]);
        let range = tree.level_range(k);
        let stepped: Vec<Vec<f64>> = tree.nodes()[range.clone()]
            .par_iter()
            .map(|node| {
                let control = u.values.get(node.id.0).filter(|v| !v.is_empty()).ok_or(FlowError::MissingStrategy(node.id.0))?;
                let d = &densities[node.id.0];
                let (drift, sigma) = node_coefficients(s, t, node.regime, control, moments(d, &grid))?;
                fokker_planck_step(d, &drift, &sigma, dt, &grid)
            })
            .collect::<Result<_, _>>()?;
        for (node, d) in tree.nodes()[range].iter().zip(stepped) {
            for c in &node.children {
                densities[c.node.0] = d.clone();
            }
        }
    }
    DensityField::from_densities(grid, densities)
}

/// Quantile function breakpoints: cumulative masses and cell edges.
fn quantile_segments(d: &[f64], grid: &SpatialGrid) -> Vec<(f64, f64, f64, f64)> {
    let dx = grid.dx();
    let mut out = Vec::new();
    let mut q = 0.0;
    for (i, &m) in d.iter().enumerate() {
        if m > 0.0 {
            let x = grid.x(i);
            out.push((q, q + m, x - dx / 2.0, x + dx / 2.0));
            q += m;
        }
    }
    if let Some(last) = out.last_mut() {
        last.1 = 1.0;
    }
    out
}

/// `W_2` between two cell-mass vectors, each cell's mass spread uniformly over the cell.
pub fn wasserstein2(d1: &[f64], d2: &[f64], grid: &SpatialGrid) -> Result<f64, FlowError> {
    let n = grid.len();
    for d in [d1, d2] {
        if d.len() != n {
            return Err(FlowError::Shape { expected: n, got: d.len() });
        }
    }
    let norm = |d: &[f64]| -> Result<Vec<f64>, FlowError> {
        let t: f64 = d.iter().sum();
        if !(t > 0.0) || d.iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(FlowError::InvalidDensity("densities must be nonnegative with positive mass".into()));
        }
        Ok(d.iter().map(|x| x / t).collect())
    };
    let a = quantile_segments(&norm(d1)?, grid);
    let b = quantile_segments(&norm(d2)?, grid);
    let at = |s: &(f64, f64, f64, f64), q: f64| s.2 + (s.3 - s.2) * ((q - s.0) / (s.1 - s.0)).clamp(0.0, 1.0);
    let (mut i, mut j, mut q, mut acc) = (0, 0, 0.0, 0.0);
    while i < a.len() && j < b.len() {
        let q_next = a[i].1.min(b[j].1);
        if q_next > q {
            let da = at(&a[i], q) - at(&b[j], q);
            let db = at(&a[i], q_next) - at(&b[j], q_next);
            acc += (q_next - q) * (da * da + da * db + db * db) / 3.0;
        }
        q = q_next;
        if a[i].1 <= q {
            i += 1;
        }
        if j < b.len() && b[j].1 <= q {
            j += 1;
        }
    }
    Ok(acc.max(0.0).sqrt())
}

/// Histogram of samples on the grid cells (nearest cell, clamped), normalized.
pub fn empirical_histogram(samples: &[f64], grid: &SpatialGrid) -> Vec<f64> {
    let mut h = vec![0.0; grid.len()];
    for &x in samples {
        h[grid.cell_of(x)] += 1.0;
    }
    let n = samples.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// `W_2` between an empirical sample (binned onto the grid) and a grid density.
pub fn wasserstein2_empirical(samples: &[f64], density: &[f64], grid: &SpatialGrid) -> Result<f64, FlowError> {
    if samples.is_empty() {
        return Err(FlowError::InvalidDensity("empty sample".into()));
    }
    wasserstein2(&empirical_histogram(samples, grid), density, grid)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PLipschitzReport {
    pub max_ratio: f64,
    pub pairs_examined: usize,
    pub worst_pair: Option<(NodeId, NodeId)>,
}

/// Empirical P-Lipschitz constant of the flow over same-depth node pairs whose
/// histories share a final interval and are Skorohod-close (`D < 1`).
pub fn flow_p_lipschitz_probe(zeta: &DensityField, tree: &PathTree) -> PLipschitzReport {
    let times = tree.times();
    let mut report = PLipschitzReport { max_ratio: 0.0, pairs_examined: 0, worst_pair: None };
    for k in 1..=tree.steps() {
        let level = tree.level(k);
        let labels: Vec<Vec<usize>> = level.iter().map(|n| tree.interval_regimes(n.id)).collect();
        for a in 0..level.len() {
            for b in a + 1..level.len() {
                let (la, lb) = (&labels[a], &labels[b]);
                // histories must share at least their last interval
                if la[k - 1] != lb[k - 1] {
                    continue;
                }
                let pa = RegimePath::from_interval_regimes(&times[..=k], la);
                let pb = RegimePath::from_interval_regimes(&times[..=k], lb);
                let Ok(dist) = skorohod_distance(&pa, &pb) else { continue };
                let jumps = pa.jump_count().max(pb.jump_count());
                let denom = (jumps as f64 * dist).sqrt();
                if dist >= 1.0 || denom <= 0.0 {
                    continue;
                }
                let (ia, ib) = (level[a].id, level[b].id);
                let Ok(w) = wasserstein2(zeta.density(ia), zeta.density(ib), zeta.grid()) else { continue };
                report.pairs_examined += 1;
                let ratio = w / denom;
                if ratio > report.max_ratio {
                    report.max_ratio = ratio;
                    report.worst_pair = Some((ia, ib));
                }
            }
        }
    }
    report
}
