#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regime_mfg::grid::SpatialGrid;
use regime_mfg::path_space::{Jump, RegimePath};
use regime_mfg::scenario::{parse_scenario, parse_scenario_with, ParseOptions, Scenario};
use regime_mfg::validation::riccati::LqParams;

/// Two-regime LQ scenario with switchable pieces; `{..}` markers are
/// substituted by [`lq`].
pub const LQ_TEMPLATE: &str = r#"
name = "test lq"
[chain]
regimes = 2
generator = symmetric(1.0)
jump_cap = 2

[grids]
horizon = {T}
time_steps = {NT}
x_min = -4
x_max = 4
x_points = {NX}

[dynamics]
b1 = "v"
b2 = "{B2}"
sigma = "0.5"
mu0 = gaussian(1.0, 0.5)

[cost]
g1 = "v^2/2"
g2 = "{G2}"
h = "{H}"
psi = lq(1)
u_min = -3
u_max = 3
"#;

pub struct Lq<'a> {
    pub horizon: f64,
    pub steps: usize,
    pub points: usize,
    pub b2: &'a str,
    pub g2: &'a str,
    pub h: &'a str,
    pub extra: &'a str,
}

impl Default for Lq<'_> {
    fn default() -> Self {
        Self { horizon: 0.5, steps: 20, points: 101, b2: "0.2*m1", g2: "x^2/2", h: "x^2/2", extra: "" }
    }
}

impl Lq<'_> {
    pub fn text(&self) -> String {
        let body = LQ_TEMPLATE
            .replace("{T}", &self.horizon.to_string())
            .replace("{NT}", &self.steps.to_string())
            .replace("{NX}", &self.points.to_string())
            .replace("{B2}", self.b2)
            .replace("{G2}", self.g2)
            .replace("{H}", self.h);
        format!("{body}\n{}\n", self.extra)
    }

    pub fn build(&self) -> Scenario {
        parse_scenario(&self.text()).unwrap_or_else(|e| panic!("{e}\n{}", self.text()))
    }
}

pub fn parse(text: &str) -> Scenario {
    parse_scenario(text).unwrap_or_else(|e| panic!("{e}"))
}

pub fn parse_degenerate(text: &str) -> Scenario {
    parse_scenario_with(text, ParseOptions { require_ellipticity: false }).unwrap_or_else(|e| panic!("{e}"))
}

/// Grid indices with `|x| <= radius`.
pub fn interior(grid: &SpatialGrid, radius: f64) -> Vec<usize> {
    (0..grid.len()).filter(|&i| grid.x(i).abs() <= radius + 1e-12).collect()
}

/// `max |a - b| / max |b|` over `idx`.
pub fn rel_sup_error(a: impl Fn(usize) -> f64, b: impl Fn(usize) -> f64, idx: &[usize]) -> f64 {
    let err = idx.iter().map(|&i| (a(i) - b(i)).abs()).fold(0.0, f64::max);
    let scale = idx.iter().map(|&i| b(i).abs()).fold(0.0, f64::max);
    err / scale
}

/// Oracle parameters of the bundled reference scenario.
pub fn reference_params() -> LqParams {
    LqParams {
        a: 0.0,
        b: 1.0,
        c_x: 0.5,
        c_v: 0.5,
        c_t: 0.5,
        lambda: 0.0,
        horizon: 0.5,
        kappa: 0.2,
        sigma: 0.5,
        mean0: 1.0,
    }
}

/// Least-squares slope of `log e` against `log h`.
pub fn fitted_order(h: &[f64], e: &[f64]) -> f64 {
    let n = h.len() as f64;
    let lx: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = e.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Every path on `[0, 1)` with jumps at interior points of a `steps` grid,
/// at most `max_jumps` changes, over `m` regimes.
pub fn grid_paths(steps: usize, m: usize, max_jumps: usize) -> Vec<RegimePath> {
    let h = 1.0 / steps as f64;
    let mut out = Vec::new();
    #[allow(clippy::too_many_arguments)]
    fn rec(
        out: &mut Vec<RegimePath>,
        h: f64,
        steps: usize,
        m: usize,
        left: usize,
        init: usize,
        from: usize,
        jumps: &mut Vec<Jump>,
    ) {
        out.push(RegimePath::new(0.0, 1.0, init, jumps.clone()).unwrap());
        if left == 0 {
            return;
        }
        let cur = jumps.last().map_or(init, |j| j.state);
        for k in from..steps {
            for s in (0..m).filter(|&s| s != cur) {
                jumps.push(Jump { time: k as f64 * h, state: s });
                rec(out, h, steps, m, left - 1, init, k + 1, jumps);
                jumps.pop();
            }
        }
    }
    for init in 0..m {
        rec(&mut out, h, steps, m, max_jumps, init, 1, &mut Vec::new());
    }
    out
}

/// `f(t, i) = c_i sin(w t + phi_i) + d_i t^2`.
#[derive(Debug, Clone)]
pub struct Cylinder {
    pub w: f64,
    pub c: Vec<f64>,
    pub phi: Vec<f64>,
    pub d: Vec<f64>,
}

impl Cylinder {
    pub fn random(m: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: rng.random_range(0.5..3.0),
            c: (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
            phi: (0..m).map(|_| rng.random_range(0.0..6.0)).collect(),
            d: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    pub fn f(&self, t: f64, i: usize) -> f64 {
        self.c[i] * (self.w * t + self.phi[i]).sin() + self.d[i] * t * t
    }

    pub fn dt(&self, t: f64, i: usize) -> f64 {
        self.c[i] * self.w * (self.w * t + self.phi[i]).cos() + 2.0 * self.d[i] * t
    }
}

/// Largest relative strategy error against the coupled Riccati feedback over
/// all levels of the first lineage, on `|x| <= 2`.
pub fn lineage_strategy_error(
    s: &regime_mfg::scenario::Scenario,
    tree: &regime_mfg::path_space::PathTree,
    strategy: &regime_mfg::meanfield_flow::StrategyField,
    oracle: &regime_mfg::validation::riccati::RiccatiSolution,
) -> f64 {
    let idx = interior(&s.space, 2.0);
    (0..tree.steps())
        .map(|k| {
            let t = tree.times()[k];
            let u = strategy.get(tree.level(k)[0].id);
            rel_sup_error(|i| u[i], |i| oracle.feedback(t, s.space.x(i), s.u_min, s.u_max), &idx)
        })
        .fold(0.0, f64::max)
}
