//! Backward solution of the path-dependent equilibrium HJB system over the
//! path tree and the evaluation-time grid.
//!
//! Value slices are indexed by the evaluation time `tau_j = t_j`. A node at
//! level `k` only needs `tau_0..tau_k`; the diagonal `tau_k` slice drives the
//! feedback. When no cost reads `tau` every slice coincides and a single one
//! is carried.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::Var;
use crate::grid::SpatialGrid;
use crate::meanfield_flow::{DensityField, StrategyField};
use crate::path_space::{NodeId, PathNode, PathTree};
use crate::scenario::{CoefficientError, Scenario};

#[derive(Debug, Error, PartialEq)]
pub enum HjbError {
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error("non-finite value at tau index {tau_index}, step {step}, node {node}")]
    NonFinite { tau_index: usize, step: usize, node: usize },
    #[error("singular system at step {step}, node {node}")]
    Singular { step: usize, node: usize },
    #[error("kernel needs s > t and a > 0 (got s - t = {gap}, a = {a})")]
    KernelDomain { gap: f64, a: f64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("kernel propagation needs spatially constant sigma")]
    VariableSigma,
    #[error("density field does not match the tree ({0} nodes)")]
    MissingDensity(usize),
}

/// Value and minimizer of the separated Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HamiltonianEval {
    pub value: f64,
    pub minimizer: f64,
}

/// `<p, b1(psi(q))> + g1(psi(q)) + <p, b2> + g2(tau)`: the control is taken
/// from `q`, the value is evaluated at `p`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    s: &Scenario,
    tau: f64,
    t: f64,
    regime: usize,
    x: f64,
    moments: (f64, f64),
    p: f64,
    q: f64,
) -> Result<HamiltonianEval, CoefficientError> {
    let v = s.psi(t, regime, x, q)?;
    let value = p * s.b1(t, regime, x, v)? + s.g1(t, regime, x, v)? + p * s.b2(t, regime, x, moments)?
        + s.g2(tau, t, regime, x, moments)?;
    Ok(HamiltonianEval { value, minimizer: v })
}

/// Heat kernel `(4 pi (s-t) a)^(-1/2) exp(-(x-y)^2 / (4 (s-t) a))`, the
/// fundamental solution of `d_t + a d_xx`.
pub fn gauss_kernel(t: f64, x: f64, s: f64, y: f64, a: f64) -> Result<f64, HjbError> {
    let gap = s - t;
    if !(gap > 0.0 && a > 0.0) {
        return Err(HjbError::KernelDomain { gap, a });
    }
    let r = x - y;
    Ok((4.0 * std::f64::consts::PI * gap * a).powf(-0.5) * (-(r * r) / (4.0 * gap * a)).exp())
}

/// Backward propagation of a slice by pure diffusion `d_t + (sigma^2/2) d_xx`
/// over `dt`, by quadrature against the heat kernel. Values beyond the grid
/// are extended linearly from the end cells, matching the zero-curvature
/// boundary of [`diffusion_step`].
pub fn kernel_propagate(values: &[f64], dt: f64, sigma: &[f64], grid: &SpatialGrid) -> Result<Vec<f64>, HjbError> {
    let n = grid.len();
    if values.len() != n || sigma.len() != n {
        return Err(HjbError::Shape { expected: n, got: values.len().min(sigma.len()) });
    }
    if sigma.iter().any(|s| (s - sigma[0]).abs() > 1e-15) {
        return Err(HjbError::VariableSigma);
    }
    let a = 0.5 * sigma[0] * sigma[0];
    let dx = grid.dx();
    let sd = (2.0 * a * dt).sqrt();
    let reach = (10.0 * sd / dx).ceil() as i64;
    let slope_lo = (values[1] - values[0]) / dx;
    let slope_hi = (values[n - 1] - values[n - 2]) / dx;
    let value_at = |j: i64| -> f64 {
        if j < 0 {
            values[0] + slope_lo * j as f64 * dx
        } else if j as usize >= n {
            values[n - 1] + slope_hi * (j - n as i64 + 1) as f64 * dx
        } else {
            values[j as usize]
        }
    };
    let mut weights = Vec::with_capacity((2 * reach + 1) as usize);
    for d in -reach..=reach {
        weights.push(gauss_kernel(0.0, 0.0, dt, d as f64 * dx, a)? * dx);
    }
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (w, d) in weights.iter().zip(-reach..=reach) {
            acc += w * value_at(i as i64 + d);
        }
        *o = acc / total;
    }
    Ok(out)
}

/// Centred interior, one-sided boundary first derivative.
pub fn gradient(values: &[f64], dx: f64) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            if i == 0 {
                (values[1] - values[0]) / dx
            } else if i == n - 1 {
                (values[n - 1] - values[n - 2]) / dx
            } else {
                (values[i + 1] - values[i - 1]) / (2.0 * dx)
            }
        })
        .collect()
}

fn max_second_difference(values: &[f64], dx: f64) -> f64 {
    values.windows(3).map(|w| ((w[2] - 2.0 * w[1] + w[0]) / (dx * dx)).abs()).fold(0.0, f64::max)
}

/// Factorized backward-Euler operator `I - dt (sigma^2/2 D2 + b D1)`.
///
/// Drift is centred where the cell Peclet number allows a monotone scheme and
/// upwinded otherwise. End rows use zero curvature and keep the drift only
/// when it points into the domain (implicit, one-sided); outward drift at an
/// end would read values beyond the grid and is dropped.
#[derive(Debug, Clone)]
pub struct StepOperator {
    dt: f64,
    lower: Vec<f64>,
    cprime: Vec<f64>,
    denom: Vec<f64>,
}

impl StepOperator {
    pub fn new(drift: &[f64], sigma: &[f64], dt: f64, dx: f64) -> Option<Self> {
        let n = drift.len();
        let mut lower = vec![0.0; n];
        let mut diag = vec![1.0; n];
        let mut upper = vec![0.0; n];
        for i in 1..n - 1 {
            let a = sigma[i] * sigma[i];
            let b = drift[i];
            let diff = dt * a / (2.0 * dx * dx);
            let (lo, up) = if b.abs() * dx <= a {
                (diff - dt * b / (2.0 * dx), diff + dt * b / (2.0 * dx))
            } else if b > 0.0 {
                (diff, diff + dt * b / dx)
            } else {
                (diff - dt * b / dx, diff)
            };
            lower[i] = -lo;
            upper[i] = -up;
            diag[i] = 1.0 + lo + up;
        }
        if drift[0] > 0.0 {
            let c = dt * drift[0] / dx;
            diag[0] += c;
            upper[0] = -c;
        }
        if drift[n - 1] < 0.0 {
            let c = -dt * drift[n - 1] / dx;
            diag[n - 1] += c;
            lower[n - 1] = -c;
        }
        let mut cprime = vec![0.0; n];
        let mut denom = vec![0.0; n];
        denom[0] = diag[0];
        cprime[0] = upper[0] / denom[0];
        for i in 1..n {
            denom[i] = diag[i] - lower[i] * cprime[i - 1];
            if denom[i] == 0.0 || !denom[i].is_finite() {
                return None;
            }
            cprime[i] = upper[i] / denom[i];
        }
        Some(Self { dt, lower, cprime, denom })
    }

    /// `Theta_k` from `Theta_{k+1}` and the running cost.
    pub fn apply(&self, next: &[f64], cost: &[f64]) -> Vec<f64> {
        let n = next.len();
        let rhs: Vec<f64> = next.iter().zip(cost).map(|(v, g)| v + self.dt * g).collect();
        let mut d = vec![0.0; n];
        d[0] = rhs[0] / self.denom[0];
        for i in 1..n {
            d[i] = (rhs[i] - self.lower[i] * d[i - 1]) / self.denom[i];
        }
        for i in (0..n - 1).rev() {
            d[i] -= self.cprime[i] * d[i + 1];
        }
        d
    }
}

/// One backward step of `d_t Theta + (sigma^2/2) Theta_xx + b Theta_x + g = 0`.
pub fn diffusion_step(
    next: &[f64],
    drift: &[f64],
    cost: &[f64],
    sigma: &[f64],
    dt: f64,
    grid: &SpatialGrid,
) -> Result<Vec<f64>, HjbError> {
    let n = grid.len();
    for v in [next, drift, cost, sigma] {
        if v.len() != n {
            return Err(HjbError::Shape { expected: n, got: v.len() });
        }
    }
    let op = StepOperator::new(drift, sigma, dt, grid.dx()).ok_or(HjbError::Singular { step: 0, node: 0 })?;
    Ok(op.apply(next, cost))
}

/// How much of the value family is kept after the solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub enum Retention {
    /// Only the diagonal slice `Theta(t_k; t_k, node, .)`.
    #[default]
    Diagonal,
    /// Every slice `tau_0..tau_k` at every node.
    Full,
}

/// Value family on the tree. With a collapsed `tau` axis a single slice
/// stands for all evaluation times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueTensor {
    collapsed: bool,
    retention: Retention,
    slices: Vec<Vec<Vec<f64>>>,
    levels: Vec<usize>,
}

impl ValueTensor {
    pub fn is_collapsed(&self) -> bool {
        self.collapsed
    }

    pub fn retention(&self) -> Retention {
        self.retention
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// `Theta(t_k; t_k, node, .)`.
    pub fn diagonal(&self, id: NodeId) -> &[f64] {
        let s = &self.slices[id.0];
        if self.collapsed || self.retention == Retention::Diagonal {
            &s[0]
        } else {
            &s[self.levels[id.0]]
        }
    }

    /// `Theta(tau_j; t_k, node, .)` if retained.
    pub fn slice(&self, tau_index: usize, id: NodeId) -> Option<&[f64]> {
        let k = self.levels[id.0];
        if tau_index > k {
            return None;
        }
        let s = &self.slices[id.0];
        match (self.collapsed, self.retention) {
            (true, _) => Some(&s[0]),
            (false, Retention::Full) => Some(&s[tau_index]),
            (false, Retention::Diagonal) => (tau_index == k).then(|| s[0].as_slice()),
        }
    }

    /// Retained `(tau_index, values)` pairs at a node.
    pub fn retained(&self, id: NodeId) -> Vec<(usize, &[f64])> {
        let k = self.levels[id.0];
        let s = &self.slices[id.0];
        match (self.collapsed, self.retention) {
            (true, Retention::Full) => (0..=k).map(|j| (j, s[0].as_slice())).collect(),
            (true, Retention::Diagonal) | (false, Retention::Diagonal) => vec![(k, s[0].as_slice())],
            (false, Retention::Full) => s.iter().enumerate().map(|(j, v)| (j, v.as_slice())).collect(),
        }
    }

    /// Rebuilds a tensor from its parts (used by importers).
    pub fn from_parts(collapsed: bool, retention: Retention, slices: Vec<Vec<Vec<f64>>>, levels: Vec<usize>) -> Self {
        Self { collapsed, retention, slices, levels }
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn raw_slices(&self) -> &[Vec<Vec<f64>>] {
        &self.slices
    }
}

#[derive(Debug, Clone)]
pub struct HjbOptions<'a> {
    pub retention: Retention,
    /// Feedback refinements per node after the provisional diagonal step.
    pub inner_iters: usize,
    /// Carry one slice when no cost reads `tau`.
    pub collapse_tau: bool,
    /// Fixed control replacing the feedback map.
    pub control_override: Option<&'a StrategyField>,
}

impl HjbOptions<'_> {
    pub fn for_scenario(s: &Scenario) -> Self {
        Self { retention: Retention::Diagonal, inner_iters: s.solver.inner_iters, collapse_tau: true, control_override: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HjbDiagnostics {
    /// Largest control change in the last inner refinement.
    pub inner_change: f64,
    pub max_gradient: f64,
    pub max_curvature: f64,
    /// Set when a gradient exceeds the scenario's sanity bound.
    pub gradient_flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HjbSolution {
    pub theta: ValueTensor,
    pub strategy: StrategyField,
    pub diagnostics: HjbDiagnostics,
}

struct NodeOut {
    slices: Vec<Vec<f64>>,
    control: Vec<f64>,
    inner_change: f64,
    max_gradient: f64,
    max_curvature: f64,
}

/// Per-node coefficient data shared by all slices.
struct NodeCoefficients {
    sigma: Vec<f64>,
    b2: Vec<f64>,
    /// `g2` without discount when it does not read `tau`.
    g2_base: Option<Vec<f64>>,
}

impl NodeCoefficients {
    fn new(s: &Scenario, t: f64, regime: usize, m: (f64, f64)) -> Result<Self, CoefficientError> {
        let n = s.space.len();
        let mut sigma = Vec::with_capacity(n);
        let mut b2 = Vec::with_capacity(n);
        for i in 0..n {
            let x = s.space.x(i);
            sigma.push(s.sigma(t, x)?);
            b2.push(s.b2(t, regime, x, m)?);
        }
        let g2_base = if s.g2.uses(Var::Tau) {
            None
        } else {
            Some((0..n).map(|i| s.g2_undiscounted(0.0, t, regime, s.space.x(i), m)).collect::<Result<_, _>>()?)
        };
        Ok(Self { sigma, b2, g2_base })
    }

    fn drift_and_g1(&self, s: &Scenario, t: f64, regime: usize, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>), CoefficientError> {
        let mut drift = Vec::with_capacity(u.len());
        let mut g1 = Vec::with_capacity(u.len());
        for (i, &v) in u.iter().enumerate() {
            let x = s.space.x(i);
            drift.push(s.b1(t, regime, x, v)? + self.b2[i]);
            g1.push(s.g1(t, regime, x, v)?);
        }
        Ok((drift, g1))
    }

    fn running_cost(
        &self,
        s: &Scenario,
        g1: &[f64],
        tau: f64,
        t: f64,
        regime: usize,
        m: (f64, f64),
    ) -> Result<Vec<f64>, CoefficientError> {
        match &self.g2_base {
            Some(base) => {
                let f = s.running_factor(tau, t)?;
                Ok(g1.iter().zip(base).map(|(a, b)| a + f * b).collect())
            }
            None => g1
                .iter()
                .enumerate()
                .map(|(i, a)| Ok(a + s.g2(tau, t, regime, s.space.x(i), m)?))
                .collect(),
        }
    }
}

fn terminal_slice(s: &Scenario, tau: f64, regime: usize, m: (f64, f64)) -> Result<Vec<f64>, CoefficientError> {
    let f = s.terminal_factor(tau)?;
    (0..s.space.len()).map(|i| Ok(s.h_undiscounted(tau, regime, s.space.x(i), m)? * f)).collect()
}

fn feedback(s: &Scenario, t: f64, regime: usize, values: &[f64]) -> Result<Vec<f64>, CoefficientError> {
    let q = gradient(values, s.space.dx());
    q.iter().enumerate().map(|(i, &q)| s.psi(t, regime, s.space.x(i), q)).collect()
}

fn check_finite(v: &[f64], tau_index: usize, step: usize, node: usize) -> Result<(), HjbError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(HjbError::NonFinite { tau_index, step, node })
    }
}

/// Regime-weighted average of the children's slices.
fn mix_children(node: &PathNode, next: &[Vec<Vec<f64>>], next_start: usize, count: usize) -> Vec<Vec<f64>> {
    let n = next[node.children[0].node.0 - next_start][0].len();
    let mut out = vec![vec![0.0; n]; count];
    for c in &node.children {
        let child = &next[c.node.0 - next_start];
        for (o, src) in out.iter_mut().zip(child) {
            for (a, b) in o.iter_mut().zip(src) {
                *a += c.weight * b;
            }
        }
    }
    out
}

/// Solves the equilibrium HJB system backward over the tree with the
/// scenario's default options.
pub fn hjb_backward_solve(s: &Scenario, zeta: &DensityField, tree: &PathTree) -> Result<HjbSolution, HjbError> {
    hjb_backward_solve_with(s, zeta, tree, &HjbOptions::for_scenario(s))
}

pub fn hjb_backward_solve_with(
    s: &Scenario,
    zeta: &DensityField,
    tree: &PathTree,
    opts: &HjbOptions<'_>,
) -> Result<HjbSolution, HjbError> {
    if zeta.len() != tree.len() {
        return Err(HjbError::MissingDensity(tree.len()));
    }
    let steps = tree.steps();
    let times = tree.times();
    let collapsed = opts.collapse_tau && !s.tau_dependent();
    let slice_count = |k: usize| if collapsed { 1 } else { k + 1 };
    let dx = s.space.dx();
    let mut kept: Vec<Vec<Vec<f64>>> = vec![Vec::new(); tree.len()];
    let mut controls: Vec<Vec<f64>> = vec![Vec::new(); tree.len()];
    let keep = |slices: &Vec<Vec<f64>>, k: usize| -> Vec<Vec<f64>> {
        if collapsed || opts.retention == Retention::Full {
            slices.clone()
        } else {
            vec![slices[k].clone()]
        }
    };
    let mut diag = HjbDiagnostics { inner_change: 0.0, max_gradient: 0.0, max_curvature: 0.0, gradient_flagged: false };

    // terminal level
    let leaf_range = tree.level_range(steps);
    let mut next: Vec<Vec<Vec<f64>>> = tree.nodes()[leaf_range.clone()]
        .par_iter()
        .map(|leaf| -> Result<Vec<Vec<f64>>, HjbError> {
            let m = zeta.moments(leaf.id);
            (0..slice_count(steps))
                .map(|j| {
                    let tau = if collapsed { 0.0 } else { times[j] };
                    let v = terminal_slice(s, tau, leaf.regime, m)?;
                    check_finite(&v, j, steps, leaf.id.0)?;
                    Ok(v)
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    for (leaf, sl) in tree.nodes()[leaf_range.clone()].iter().zip(&next) {
        kept[leaf.id.0] = keep(sl, steps);
    }
    let mut next_start = leaf_range.start;

    for k in (0..steps).rev() {
        let (t, dt) = (times[k], times[k + 1] - times[k]);
        let range = tree.level_range(k);
        let outs: Vec<NodeOut> = tree.nodes()[range.clone()]
            .par_iter()
            .map(|node| -> Result<NodeOut, HjbError> {
                let m = zeta.moments(node.id);
                let regime = node.regime;
                let count = slice_count(k);
                let mixed = mix_children(node, &next, next_start, count);
                let coeffs = NodeCoefficients::new(s, t, regime, m)?;
                let d_idx = if collapsed { 0 } else { k };
                let tau_of = |j: usize| if collapsed { t } else { times[j] };
                let mut inner_change = 0.0;
                let control = match opts.control_override {
                    Some(u) => u.get(node.id).to_vec(),
                    None => {
                        let mut u = feedback(s, t, regime, &mixed[d_idx])?;
                        for _ in 0..opts.inner_iters {
                            let (drift, g1) = coeffs.drift_and_g1(s, t, regime, &u)?;
                            let op = StepOperator::new(&drift, &coeffs.sigma, dt, dx)
                                .ok_or(HjbError::Singular { step: k, node: node.id.0 })?;
                            let cost = coeffs.running_cost(s, &g1, tau_of(d_idx), t, regime, m)?;
                            let provisional = op.apply(&mixed[d_idx], &cost);
                            let refined = feedback(s, t, regime, &provisional)?;
                            inner_change = refined.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                            u = refined;
                        }
                        u
                    }
                };
                let (drift, g1) = coeffs.drift_and_g1(s, t, regime, &control)?;
                let op = StepOperator::new(&drift, &coeffs.sigma, dt, dx)
                    .ok_or(HjbError::Singular { step: k, node: node.id.0 })?;
                let slices = mixed
                    .iter()
                    .enumerate()
                    .map(|(j, next_slice)| {
                        let cost = coeffs.running_cost(s, &g1, tau_of(j), t, regime, m)?;
                        let v = op.apply(next_slice, &cost);
                        check_finite(&v, j, k, node.id.0)?;
                        Ok(v)
                    })
                    .collect::<Result<Vec<_>, HjbError>>()?;
                let dvals = &slices[d_idx];
                let max_gradient = gradient(dvals, dx).iter().fold(0.0f64, |a, b| a.max(b.abs()));
                let max_curvature = max_second_difference(dvals, dx);
                Ok(NodeOut { slices, control, inner_change, max_gradient, max_curvature })
            })
            .collect::<Result<_, _>>()?;
        let mut level_slices = Vec::with_capacity(outs.len());
        for (node, out) in tree.nodes()[range.clone()].iter().zip(outs) {
            diag.inner_change = diag.inner_change.max(out.inner_change);
            diag.max_gradient = diag.max_gradient.max(out.max_gradient);
            diag.max_curvature = diag.max_curvature.max(out.max_curvature);
            kept[node.id.0] = keep(&out.slices, k);
            controls[node.id.0] = out.control;
            level_slices.push(out.slices);
        }
        next = level_slices;
        next_start = range.start;
    }
    diag.gradient_flagged = diag.max_gradient > s.solver.gradient_bound || diag.max_curvature > s.solver.gradient_bound;
    let levels = tree.nodes().iter().map(|n| n.time_index).collect();
    Ok(HjbSolution {
        theta: ValueTensor { collapsed, retention: opts.retention, slices: kept, levels },
        strategy: StrategyField::from_values(controls, s.u_min, s.u_max),
        diagnostics: diag,
    })
}

/// Value `Theta(tau; t_k, root, .)` of a fixed control on the subtree below
/// `root`, for a single evaluation time `tau`.
pub fn evaluate_fixed_control(
    s: &Scenario,
    zeta: &DensityField,
    tree: &PathTree,
    control: &StrategyField,
    root: NodeId,
    tau: f64,
) -> Result<Vec<f64>, HjbError> {
    let steps = tree.steps();
    let times = tree.times();
    let start_level = tree.node(root).time_index;
    // subtree levels, each a list of node ids
    let mut levels: Vec<Vec<NodeId>> = vec![vec![root]];
    for _ in start_level..steps {
        let last = levels.last().expect("non-empty");
        let next: Vec<NodeId> = last.iter().flat_map(|id| tree.node(*id).children.iter().map(|c| c.node)).collect();
        levels.push(next);
    }
    let mut values: std::collections::HashMap<NodeId, Vec<f64>> = levels[steps - start_level]
        .iter()
        .map(|&id| {
            let leaf = tree.node(id);
            Ok((id, terminal_slice(s, tau, leaf.regime, zeta.moments(id))?))
        })
        .collect::<Result<_, HjbError>>()?;
    let dx = s.space.dx();
    for depth in (0..steps - start_level).rev() {
        let k = start_level + depth;
        let (t, dt) = (times[k], times[k + 1] - times[k]);
        let computed: Vec<(NodeId, Vec<f64>)> = levels[depth]
            .par_iter()
            .map(|&id| -> Result<(NodeId, Vec<f64>), HjbError> {
                let node = tree.node(id);
                let m = zeta.moments(id);
                let mut mixed = vec![0.0; s.space.len()];
                for c in &node.children {
                    for (a, b) in mixed.iter_mut().zip(&values[&c.node]) {
                        *a += c.weight * b;
                    }
                }
                let coeffs = NodeCoefficients::new(s, t, node.regime, m)?;
                let (drift, g1) = coeffs.drift_and_g1(s, t, node.regime, control.get(id))?;
                let op = StepOperator::new(&drift, &coeffs.sigma, dt, dx).ok_or(HjbError::Singular { step: k, node: id.0 })?;
                let cost = coeffs.running_cost(s, &g1, tau, t, node.regime, m)?;
                let v = op.apply(&mixed, &cost);
                check_finite(&v, 0, k, id.0)?;
                Ok((id, v))
            })
            .collect::<Result<_, _>>()?;
        values = computed.into_iter().collect();
    }
    Ok(values.remove(&root).expect("root evaluated"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_examples() {
        let v = gauss_kernel(0.0, 0.3, 1.0, 0.3, 1.0).unwrap();
        assert!((v - 1.0 / (4.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!((v - 0.282095).abs() < 1e-6);
        assert_eq!(gauss_kernel(0.0, 1.0, 0.5, -0.2, 0.7).unwrap(), gauss_kernel(0.0, -0.2, 0.5, 1.0, 0.7).unwrap());
        assert!(gauss_kernel(1.0, 0.0, 1.0, 0.0, 1.0).is_err());
        // normalization by trapezoid quadrature
        let h = 1e-3;
        let total: f64 = (-8000..=8000).map(|j| gauss_kernel(0.0, 0.0, 0.5, j as f64 * h, 0.8).unwrap() * h).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kernel_propagate_examples() {
        let grid = SpatialGrid::new(-6.0, 6.0, 601);
        let sigma = vec![1.0; grid.len()];
        let c = kernel_propagate(&vec![2.5; grid.len()], 0.1, &sigma, &grid).unwrap();
        assert!(c.iter().all(|v| (v - 2.5).abs() < 1e-12));
        let lin = kernel_propagate(&grid.points(), 0.1, &sigma, &grid).unwrap();
        assert!(lin.iter().zip(grid.points()).all(|(a, x)| (a - x).abs() < 1e-10));
        let sq: Vec<f64> = grid.points().iter().map(|x| x * x).collect();
        let out = kernel_propagate(&sq, 0.1, &sigma, &grid).unwrap();
        for i in 150..450 {
            let x = grid.x(i);
            assert!((out[i] - (x * x + 0.1)).abs() < 1e-6, "{}", out[i] - x * x);
        }
        let mut var = sigma.clone();
        var[3] = 2.0;
        assert_eq!(kernel_propagate(&sq, 0.1, &var, &grid), Err(HjbError::VariableSigma));
    }

    #[test]
    fn diffusion_step_examples() {
        let grid = SpatialGrid::new(-4.0, 4.0, 81);
        let n = grid.len();
        let zero = vec![0.0; n];
        let five = diffusion_step(&vec![5.0; n], &zero, &zero, &vec![1.0; n], 0.01, &grid).unwrap();
        assert!(five.iter().all(|v| (v - 5.0).abs() < 1e-13));
        let dt = 0.02;
        let q = diffusion_step(&zero, &zero, &vec![1.0; n], &vec![1e-3; n], dt, &grid).unwrap();
        assert!(q.iter().all(|v| (v - dt).abs() < 1e-15));
        let lin = diffusion_step(&grid.points(), &zero, &zero, &vec![1.0; n], 0.05, &grid).unwrap();
        assert!(lin.iter().zip(grid.points()).all(|(a, x)| (a - x).abs() < 1e-8));
        let kp = kernel_propagate(&grid.points(), 0.05, &vec![1.0; n], &grid).unwrap();
        assert!(lin.iter().zip(&kp).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn step_operator_is_monotone() {
        // nonnegative data and cost give nonnegative values for any drift
        let grid = SpatialGrid::new(-1.0, 1.0, 41);
        let drift: Vec<f64> = grid.points().iter().map(|x| 30.0 * x.sin() - 5.0).collect();
        let sigma = vec![0.1; 41];
        let mut next = vec![0.0; 41];
        next[7] = 1.0;
        let v = diffusion_step(&next, &drift, &vec![0.0; 41], &sigma, 0.05, &grid).unwrap();
        assert!(v.iter().all(|x| *x >= -1e-15));
    }
}
