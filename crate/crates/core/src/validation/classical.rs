//! Single-slice backward solver for problems whose costs ignore `tau`.
//!
//! Written as a plain sequential loop, separate from the production sweep, so
//! the two can be compared.

use thiserror::Error;

use crate::hjb::{diffusion_step, gradient, HjbError};
use crate::meanfield_flow::DensityField;
use crate::path_space::PathTree;
use crate::scenario::{CoefficientError, Scenario};

#[derive(Debug, Error, PartialEq)]
pub enum ClassicalError {
    #[error("costs depend on the evaluation time; the classical solver does not apply")]
    TauDependent,
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
}

/// Value and feedback per node (feedback empty at leaves).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalSolution {
    pub values: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

pub fn classical_hjb_oracle(
    s: &Scenario,
    zeta: &DensityField,
    tree: &PathTree,
) -> Result<ClassicalSolution, ClassicalError> {
    if s.tau_dependent() {
        return Err(ClassicalError::TauDependent);
    }
    let n = s.space.len();
    let xs = s.space.points();
    let times = tree.times();
    let steps = tree.steps();
    let mut values = vec![Vec::new(); tree.len()];
    let mut controls = vec![Vec::new(); tree.len()];
    for leaf in tree.leaves() {
        let m = zeta.moments(leaf.id);
        let mut v = Vec::with_capacity(n);
        for &x in &xs {
            v.push(s.h(0.0, leaf.regime, x, m)?);
        }
        values[leaf.id.0] = v;
    }
    for k in (0..steps).rev() {
        let t = times[k];
        let dt = times[k + 1] - t;
        for node in tree.level(k) {
            let i = node.regime;
            let m = zeta.moments(node.id);
            let mut mixed = vec![0.0; n];
            for c in &node.children {
                for j in 0..n {
                    mixed[j] += c.weight * values[c.node.0][j];
                }
            }
            let mut sigma = vec![0.0; n];
            let mut b2 = vec![0.0; n];
            let mut g2 = vec![0.0; n];
            for j in 0..n {
                sigma[j] = s.sigma(t, xs[j])?;
                b2[j] = s.b2(t, i, xs[j], m)?;
                g2[j] = s.g2(0.0, t, i, xs[j], m)?;
            }
            let coefficients = |u: &[f64]| -> Result<(Vec<f64>, Vec<f64>), CoefficientError> {
                let mut drift = vec![0.0; n];
                let mut cost = vec![0.0; n];
                for j in 0..n {
                    drift[j] = s.b1(t, i, xs[j], u[j])? + b2[j];
                    cost[j] = s.g1(t, i, xs[j], u[j])? + g2[j];
                }
                Ok((drift, cost))
            };
            let policy = |v: &[f64]| -> Result<Vec<f64>, CoefficientError> {
                let q = gradient(v, s.space.dx());
                (0..n).map(|j| s.psi(t, i, xs[j], q[j])).collect()
            };
            let mut u = policy(&mixed)?;
            for _ in 0..s.solver.inner_iters {
                let (drift, cost) = coefficients(&u)?;
                u = policy(&diffusion_step(&mixed, &drift, &cost, &sigma, dt, &s.space)?)?;
            }
            let (drift, cost) = coefficients(&u)?;
            values[node.id.0] = diffusion_step(&mixed, &drift, &cost, &sigma, dt, &s.space)?;
            controls[node.id.0] = u;
        }
    }
    Ok(ClassicalSolution { values, controls })
}
