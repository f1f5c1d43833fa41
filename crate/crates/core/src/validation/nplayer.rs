//! Finite-population simulation under a common regime chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::meanfield_flow::{wasserstein2_empirical, DensityField, FlowError, StrategyField};
use crate::path_space::{PathTree, RegimePath};
use crate::regime_chain::sample_interval_regimes;
use crate::scenario::{CoefficientError, Scenario};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("need at least 2 agents and 1 chain draw")]
    TooSmall,
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrawRecord {
    pub draw: usize,
    pub signature: String,
    pub path: RegimePath,
    /// `W_2` between the empirical law and the tree law at `t_0..t_N`.
    pub w2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationGain {
    pub t: f64,
    pub u0: f64,
    pub rate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub agents: usize,
    pub draws: usize,
    /// Draws whose chain path exceeded the jump cap.
    pub excluded_draws: usize,
    pub records: Vec<DrawRecord>,
    pub median_terminal_w2: f64,
    pub deviation_gains: Vec<DeviationGain>,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Simulates `agents` players by Euler-Maruyama along `draws` independent
/// chain paths. Agents interact through the empirical mean and second moment
/// and play `u` at the tree node of the realized chain prefix.
pub fn nplayer_simulate(
    s: &Scenario,
    tree: &PathTree,
    u: &StrategyField,
    zeta: &DensityField,
    agents: usize,
    draws: usize,
    seed: u64,
) -> Result<SimReport, SimError> {
    if agents < 2 || draws == 0 {
        return Err(SimError::TooSmall);
    }
    let times = tree.times().to_vec();
    let steps = tree.steps();
    let results: Vec<Option<DrawRecord>> = (0..draws)
        .into_par_iter()
        .map(|draw| -> Result<Option<DrawRecord>, SimError> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(draw as u64);
            let labels = sample_interval_regimes(&s.generator, s.initial_regime, &times, &mut rng);
            let Some(leaf) = tree.find_by_regimes(&labels) else { return Ok(None) };
            let mut x: Vec<f64> = (0..agents).map(|_| s.mu0.sample(&s.space, &mut rng)).collect();
            let mut w2 = Vec::with_capacity(steps + 1);
            w2.push(wasserstein2_empirical(&x, zeta.density(tree.ancestor_at(leaf, 0)), &s.space)?);
            for k in 0..steps {
                let node = tree.node(tree.ancestor_at(leaf, k));
                let (t, dt) = (times[k], times[k + 1] - times[k]);
                let n = x.len() as f64;
                let m1 = x.iter().sum::<f64>() / n;
                let m2 = x.iter().map(|v| v * v).sum::<f64>() / n;
                let control = u.get(node.id);
                for xi in x.iter_mut() {
                    let v = s.space.interpolate(control, *xi);
                    let drift = s.b1(t, node.regime, *xi, v)? + s.b2(t, node.regime, *xi, (m1, m2))?;
                    let vol = s.sigma(t, *xi)?;
                    let z: f64 = rng.sample(StandardNormal);
                    *xi += drift * dt + vol * dt.sqrt() * z;
                }
                w2.push(wasserstein2_empirical(&x, zeta.density(tree.ancestor_at(leaf, k + 1)), &s.space)?);
            }
            Ok(Some(DrawRecord {
                draw,
                signature: tree.signature(leaf),
                path: RegimePath::from_interval_regimes(&times, &labels),
                w2,
            }))
        })
        .collect::<Result<_, _>>()?;
    let excluded_draws = results.iter().filter(|r| r.is_none()).count();
    let records: Vec<DrawRecord> = results.into_iter().flatten().collect();
    let mut terminal: Vec<f64> = records.iter().map(|r| *r.w2.last().expect("non-empty")).collect();
    Ok(SimReport {
        agents,
        draws,
        excluded_draws,
        median_terminal_w2: median(&mut terminal),
        records,
        deviation_gains: Vec::new(),
    })
}
