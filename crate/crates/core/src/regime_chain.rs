//! Continuous-time Markov chain machinery for the switching environment.
//!
//! Regimes are indexed from 0 internally. Scenario files, expressions and
//! exported path signatures use 1-based labels; conversion happens at those
//! boundaries only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path_space::{NodeId, PathTree, RegimePath};

/// Row-sum tolerance for a valid generator.
pub const GENERATOR_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ChainError {
    #[error("generator must be square with at least one regime, got {rows}x{cols}")]
    Shape { rows: usize, cols: usize },
    #[error("invalid generator: {0}")]
    Invalid(GeneratorViolations),
    #[error("node {0} does not belong to the tree")]
    DetachedNode(usize),
    #[error("regime {regime} out of range for {m} regimes")]
    RegimeOutOfRange { regime: usize, m: usize },
}

/// One offending generator entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    NegativeRate { row: usize, col: usize, value: f64 },
    RowSum { row: usize, sum: f64 },
    NonFinite { row: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorViolations(pub Vec<Violation>);

impl std::fmt::Display for GeneratorViolations {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|v| match v {
                Violation::NegativeRate { row, col, value } => {
                    format!("q[{},{}] = {value} is a negative off-diagonal rate", row + 1, col + 1)
                }
                Violation::RowSum { row, sum } => format!("row {} sums to {sum}", row + 1),
                Violation::NonFinite { row, col } => {
                    format!("q[{},{}] is not finite", row + 1, col + 1)
                }
            })
            .collect();
        f.write_str(&parts.join("; "))
    }
}

/// Generator `Q = (q_ij)` of the regime chain, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    m: usize,
    q: Vec<f64>,
}

impl Generator {
    /// Builds a generator from rows without validating rates.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ChainError> {
        let m = rows.len();
        if m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(ChainError::Shape {
                rows: m,
                cols: rows.first().map_or(0, |r| r.len()),
            });
        }
        Ok(Self {
            m,
            q: rows.iter().flatten().copied().collect(),
        })
    }

    /// Builds and validates.
    pub fn new(rows: &[Vec<f64>]) -> Result<Self, ChainError> {
        let gen = Self::from_rows(rows)?;
        gen.validate().map_err(ChainError::Invalid)?;
        Ok(gen)
    }

    /// Symmetric chain on `m` regimes leaving each state at total `rate`.
    pub fn symmetric(m: usize, rate: f64) -> Self {
        let mut q = vec![0.0; m * m];
        if m > 1 {
            let off = rate / (m - 1) as f64;
            for i in 0..m {
                for j in 0..m {
                    q[i * m + j] = if i == j { -rate } else { off };
                }
            }
        }
        Self { m, q }
    }

    pub fn regimes(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.q[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.q[i * self.m..(i + 1) * self.m]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.m).map(|i| self.row(i).to_vec()).collect()
    }

    /// Largest exit rate `max_i |q_ii|`.
    pub fn max_exit_rate(&self) -> f64 {
        (0..self.m).map(|i| -self.rate(i, i)).fold(0.0, f64::max)
    }

    /// Checks off-diagonal nonnegativity and zero row sums.
    pub fn validate(&self) -> Result<(), GeneratorViolations> {
        let mut found = Vec::new();
        for i in 0..self.m {
            let mut sum = 0.0;
            for j in 0..self.m {
                let q = self.rate(i, j);
                if !q.is_finite() {
                    found.push(Violation::NonFinite { row: i, col: j });
                    continue;
                }
                if i != j && q < 0.0 {
                    found.push(Violation::NegativeRate { row: i, col: j, value: q });
                }
                sum += q;
            }
            if sum.abs() > GENERATOR_TOL {
                found.push(Violation::RowSum { row: i, sum });
            }
        }
        if found.is_empty() {
            Ok(())
        } else {
            Err(GeneratorViolations(found))
        }
    }

    /// `exp(Q dt)` by scaling and squaring with a [6/6] Padé approximant.
    pub fn transition_matrix(&self, dt: f64) -> StochasticMatrix {
        assert!(dt >= 0.0, "transition_matrix requires dt >= 0");
        let m = self.m;
        let a: Vec<f64> = self.q.iter().map(|q| q * dt).collect();
        let p = expm(&a, m);
        StochasticMatrix { m, p }
    }
}

/// Row-stochastic matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    m: usize,
    p: Vec<f64>,
}

impl StochasticMatrix {
    pub fn dim(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.m..(i + 1) * self.m]
    }

    pub fn mul(&self, other: &StochasticMatrix) -> StochasticMatrix {
        StochasticMatrix {
            m: self.m,
            p: matmul(&self.p, &other.p, self.m),
        }
    }
}

fn matmul(a: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..m {
                c[i * m + j] += aik * b[k * m + j];
            }
        }
    }
    c
}

fn norm_inf(a: &[f64], m: usize) -> f64 {
    (0..m)
        .map(|i| a[i * m..(i + 1) * m].iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solves `D X = N` for dense `m x m` matrices by partial-pivoting LU.
fn solve_dense(d: &[f64], n: &[f64], m: usize) -> Vec<f64> {
    let mut a = d.to_vec();
    let mut x = n.to_vec();
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&r, &s| a[r * m + col].abs().total_cmp(&a[s * m + col].abs()))
            .unwrap_or(col);
        if piv != col {
            for j in 0..m {
                a.swap(col * m + j, piv * m + j);
                x.swap(col * m + j, piv * m + j);
            }
        }
        let diag = a[col * m + col];
        for r in col + 1..m {
            let f = a[r * m + col] / diag;
            if f == 0.0 {
                continue;
            }
            for j in col..m {
                a[r * m + j] -= f * a[col * m + j];
            }
            for j in 0..m {
                x[r * m + j] -= f * x[col * m + j];
            }
        }
    }
    for col in (0..m).rev() {
        let diag = a[col * m + col];
        for j in 0..m {
            let mut v = x[col * m + j];
            for k in col + 1..m {
                v -= a[col * m + k] * x[k * m + j];
            }
            x[col * m + j] = v / diag;
        }
    }
    x
}

fn expm(a: &[f64], m: usize) -> Vec<f64> {
    // [6/6] Padé coefficients c_k = (12-k)! 6! / (12! k! (6-k)!).
    const C: [f64; 7] = [
        1.0,
        0.5,
        5.0 / 44.0,
        1.0 / 66.0,
        1.0 / 792.0,
        1.0 / 15840.0,
        1.0 / 665280.0,
    ];
    let norm = norm_inf(a, m);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
    }
    let scale = 0.5f64.powi(squarings as i32);
    let a: Vec<f64> = a.iter().map(|x| x * scale).collect();

    let mut ident = vec![0.0; m * m];
    for i in 0..m {
        ident[i * m + i] = 1.0;
    }
    let mut num = ident.clone();
    let mut den = ident.clone();
    let mut power = ident;
    for (k, c) in C.iter().enumerate().skip(1) {
        power = matmul(&power, &a, m);
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        for idx in 0..m * m {
            num[idx] += c * power[idx];
            den[idx] += sign * c * power[idx];
        }
    }
    let mut r = solve_dense(&den, &num, m);
    for _ in 0..squarings {
        r = matmul(&r, &r, m);
    }
    r
}

/// Samples one grid path of the chain.
///
/// `initial` is the regime in force just before the first grid time; the
/// regime on each interval `[t_k, t_{k+1})` is drawn from the transition row
/// of the previous interval's regime. The returned path spans the whole grid
/// and starts in the first interval's regime.
pub fn sample_path(gen: &Generator, initial: usize, times: &[f64], seed: u64) -> RegimePath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = sample_interval_regimes(gen, initial, times, &mut rng);
    RegimePath::from_interval_regimes(times, &labels)
}

/// Draws the per-interval regimes `l_1..l_N` starting from `initial`.
pub fn sample_interval_regimes<R: Rng + ?Sized>(
    gen: &Generator,
    initial: usize,
    times: &[f64],
    rng: &mut R,
) -> Vec<usize> {
    let steps = times.len().saturating_sub(1);
    let mut labels = Vec::with_capacity(steps);
    let mut current = initial;
    let mut cache: Option<(f64, StochasticMatrix)> = None;
    for k in 0..steps {
        let dt = times[k + 1] - times[k];
        let stale = cache.as_ref().is_none_or(|(h, _)| (h - dt).abs() > 1e-15);
        if stale {
            cache = Some((dt, gen.transition_matrix(dt)));
        }
        let row = cache.as_ref().map(|(_, p)| p.row(current)).unwrap_or(&[]);
        current = draw_from_row(row, rng.random::<f64>()).unwrap_or(current);
        labels.push(current);
    }
    labels
}

fn draw_from_row(row: &[f64], u: f64) -> Option<usize> {
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return Some(j);
        }
    }
    row.iter().rposition(|&p| p > 0.0)
}

/// Probability of reaching `node` from the root of the tree that owns it.
pub fn path_probability(tree: &PathTree, node: NodeId) -> Result<f64, ChainError> {
    tree.get(node)
        .map(|n| n.cumulative_weight)
        .ok_or(ChainError::DetachedNode(node.0))
}
