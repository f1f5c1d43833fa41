//! Solves the bundled reference scenario and prints convergence diagnostics.

use std::time::Instant;

use regime_mfg::equilibrium::{contraction_report, solve};
use regime_mfg::scenarios;

fn main() {
    let s = scenarios::reference_lq();
    let start = Instant::now();
    let (tree, result) = solve(&s).expect("solve");
    let report = contraction_report(&result);
    println!("nodes: {}, leaves: {}", tree.len(), tree.leaves().len());
    println!("outcome: {:?} after {} iterations", result.outcome, result.iterations);
    println!("distances: {:?}", result.distance_history);
    println!("empirical contraction: {:.4}", result.empirical_contraction);
    println!("geometric rate: {:?}", report.geometric_rate);
    println!("elapsed: {:.2?}", start.elapsed());
}
