//! Local optimality of an equilibrium: a deviation held on a short window
//! `[t, t + eps)` and followed by the equilibrium strategy cannot lower the
//! cost at first order in `eps`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::equilibrium::EquilibriumResult;
use crate::hjb::{evaluate_fixed_control, gradient, HjbError};
use crate::meanfield_flow::{DensityField, StrategyField};
use crate::path_space::{NodeId, PathTree};
use crate::scenario::{CoefficientError, Scenario};
use crate::validation::nplayer::DeviationGain;

/// Default pass threshold on the extrapolated rate.
pub const LOCAL_TOL: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum LocalOptError {
    #[error("probe outside the tree or grid: {0}")]
    Probe(String),
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Probe {
    pub node: NodeId,
    pub x_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Deviation {
    /// The tested strategy itself; the gain is zero by construction.
    Null,
    /// A constant action on the window.
    Constant(f64),
    /// `psi` at the probe gradient of the tested strategy's own value.
    BestResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalOptReport {
    pub probe: Probe,
    pub level: usize,
    pub x: f64,
    pub deviation: Deviation,
    /// Action used on the window (`None` for the null deviation).
    pub action: Option<f64>,
    pub eps_steps: Vec<usize>,
    /// `(J(spliced) - J(u)) / eps` per window length.
    pub rates: Vec<f64>,
    /// Polynomial extrapolation of the rates to `eps = 0`.
    pub extrapolated: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Value at `eps = 0` of the interpolating polynomial through `(e_i, f_i)`.
pub fn extrapolate_to_zero(es: &[f64], fs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..es.len() {
        let mut w = 1.0;
        for j in 0..es.len() {
            if i != j {
                w *= es[j] / (es[j] - es[i]);
            }
        }
        acc += w * fs[i];
    }
    acc
}

/// `u` with the subtree of `root` on levels `k..k+steps` replaced by `action`.
pub fn splice(tree: &PathTree, u: &StrategyField, root: NodeId, steps: usize, action: f64) -> StrategyField {
    let mut out = u.clone();
    let mut frontier = vec![root];
    for _ in 0..steps {
        let mut next = Vec::new();
        for id in frontier {
            out.get_mut(id).iter_mut().for_each(|v| *v = action);
            next.extend(tree.node(id).children.iter().map(|c| c.node));
        }
        frontier = next;
    }
    let (lo, hi) = u.bounds();
    out.map(|v| v.clamp(lo, hi))
}

#[allow(clippy::too_many_arguments)]
pub fn local_optimality_test(
    s: &Scenario,
    tree: &PathTree,
    zeta: &DensityField,
    strategy: &StrategyField,
    probe: Probe,
    deviation: Deviation,
    eps_steps: &[usize],
    tolerance: f64,
) -> Result<LocalOptReport, LocalOptError> {
    let node = tree.get(probe.node).ok_or_else(|| LocalOptError::Probe(format!("node {}", probe.node.0)))?;
    let k = node.time_index;
    if probe.x_index >= s.space.len() {
        return Err(LocalOptError::Probe(format!("grid index {}", probe.x_index)));
    }
    let longest = eps_steps.iter().copied().max().unwrap_or(0);
    if eps_steps.is_empty() || eps_steps.contains(&0) || k + longest > tree.steps() {
        return Err(LocalOptError::Probe(format!("windows {eps_steps:?} do not fit after level {k}")));
    }
    let times = tree.times();
    let tau = times[k];
    let baseline = evaluate_fixed_control(s, zeta, tree, strategy, probe.node, tau)?;
    let x = s.space.x(probe.x_index);
    let action = match deviation {
        Deviation::Null => None,
        Deviation::Constant(v) => Some(v.clamp(s.u_min, s.u_max)),
        Deviation::BestResponse => {
            let q = gradient(&baseline, s.space.dx())[probe.x_index];
            Some(s.psi(tau, node.regime, x, q)?)
        }
    };
    let mut rates = Vec::with_capacity(eps_steps.len());
    for &e in eps_steps {
        let eps = times[k + e] - tau;
        let rate = match action {
            None => {
                let j = evaluate_fixed_control(s, zeta, tree, strategy, probe.node, tau)?;
                (j[probe.x_index] - baseline[probe.x_index]) / eps
            }
            Some(a) => {
                let spliced = splice(tree, strategy, probe.node, e, a);
                let j = evaluate_fixed_control(s, zeta, tree, &spliced, probe.node, tau)?;
                (j[probe.x_index] - baseline[probe.x_index]) / eps
            }
        };
        rates.push(rate);
    }
    let es: Vec<f64> = eps_steps.iter().map(|&e| e as f64).collect();
    let extrapolated = extrapolate_to_zero(&es, &rates);
    Ok(LocalOptReport {
        probe,
        level: k,
        x,
        deviation,
        action,
        eps_steps: eps_steps.to_vec(),
        rates,
        extrapolated,
        tolerance,
        pass: extrapolated >= -tolerance,
    })
}

/// Runs the test against a solved equilibrium.
pub fn local_optimality_of(
    s: &Scenario,
    tree: &PathTree,
    eq: &EquilibriumResult,
    probe: Probe,
    deviation: Deviation,
) -> Result<LocalOptReport, LocalOptError> {
    local_optimality_test(s, tree, &eq.zeta, &eq.strategy, probe, deviation, &[1, 2, 3], LOCAL_TOL)
}

/// Random probes at levels leaving room for `max_steps` windows, with
/// `|x| <= margin` away from the centre of the grid.
pub fn random_probes(s: &Scenario, tree: &PathTree, count: usize, max_steps: usize, margin: f64, seed: u64) -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = 0.5 * (s.space.x_min() + s.space.x_max());
    let candidates: Vec<usize> = (0..s.space.len()).filter(|&i| (s.space.x(i) - centre).abs() <= margin).collect();
    let top = tree.steps().saturating_sub(max_steps);
    (0..count)
        .map(|_| {
            let k = rng.random_range(0..=top);
            let level = tree.level(k);
            let node = level[rng.random_range(0..level.len())].id;
            let x_index = candidates[rng.random_range(0..candidates.len())];
            Probe { node, x_index }
        })
        .collect()
}

/// Monte Carlo estimate of the deviation rate with common random numbers,
/// the population law frozen at `zeta`.
#[allow(clippy::too_many_arguments)]
pub fn mc_deviation_gain(
    s: &Scenario,
    tree: &PathTree,
    zeta: &DensityField,
    strategy: &StrategyField,
    probe: Probe,
    action: f64,
    eps_steps: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<DeviationGain>, LocalOptError> {
    let node0 = tree.get(probe.node).ok_or_else(|| LocalOptError::Probe(format!("node {}", probe.node.0)))?;
    let k0 = node0.time_index;
    let times = tree.times();
    let tau = times[k0];
    let x0 = s.space.x(probe.x_index);
    let mut out = Vec::new();
    for &e in eps_steps {
        if e == 0 || k0 + e > tree.steps() {
            return Err(LocalOptError::Probe(format!("window {e} does not fit after level {k0}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut diffs = Vec::with_capacity(samples);
        for _ in 0..samples {
            let mut id = probe.node;
            let (mut xa, mut xb) = (x0, x0);
            let (mut ca, mut cb) = (0.0, 0.0);
            for k in k0..tree.steps() {
                let node = tree.node(id);
                let (t, dt) = (times[k], times[k + 1] - times[k]);
                let m = zeta.moments(id);
                let z: f64 = rng.sample(StandardNormal);
                let ub = s.space.interpolate(strategy.get(id), xb);
                let ua = if k < k0 + e { action } else { s.space.interpolate(strategy.get(id), xa) };
                for (x, u, c) in [(&mut xa, ua, &mut ca), (&mut xb, ub, &mut cb)] {
                    *c += (s.g1(t, node.regime, *x, u)? + s.g2(tau, t, node.regime, *x, m)?) * dt;
                    let drift = s.b1(t, node.regime, *x, u)? + s.b2(t, node.regime, *x, m)?;
                    *x += drift * dt + s.sigma(t, *x)? * dt.sqrt() * z;
                }
                let r: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = node.children[node.children.len() - 1].node;
                for c in &node.children {
                    acc += c.weight;
                    if r < acc {
                        chosen = c.node;
                        break;
                    }
                }
                id = chosen;
            }
            let leaf = tree.node(id);
            let m = zeta.moments(id);
            ca += s.h(tau, leaf.regime, xa, m)?;
            cb += s.h(tau, leaf.regime, xb, m)?;
            diffs.push(ca - cb);
        }
        let eps = times[k0 + e] - tau;
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        out.push(DeviationGain { t: tau, u0: action, rate: mean / eps, std_error: (var / n).sqrt() / eps });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn richardson_weights() {
        let es = [1.0, 2.0, 3.0];
        // f(e) = 2 + 0.5 e - 0.1 e^2 extrapolates to 2 exactly
        let fs: Vec<f64> = es.iter().map(|e| 2.0 + 0.5 * e - 0.1 * e * e).collect();
        assert!((extrapolate_to_zero(&es, &fs) - 2.0).abs() < 1e-12);
        let w = [extrapolate_to_zero(&es, &[1.0, 0.0, 0.0]), extrapolate_to_zero(&es, &[0.0, 1.0, 0.0]), extrapolate_to_zero(&es, &[0.0, 0.0, 1.0])];
        assert!((w[0] - 3.0).abs() < 1e-12 && (w[1] + 3.0).abs() < 1e-12 && (w[2] - 1.0).abs() < 1e-12);
    }
}
