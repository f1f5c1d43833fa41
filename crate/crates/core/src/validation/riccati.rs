//! Independent ODE references for linear-quadratic problems.
//!
//! Classical problem: dynamics `dX = (A X + B v + kappa m) dt + sigma dW`,
//! running cost `c_x x^2 + c_v v^2`, terminal cost `c_T x^2`, discount rate
//! `lambda`, where `m` is the population mean. The value is
//! `P(t) x^2 + r(t) x + s(t)` with
//!
//! ```text
//! -P' + lambda P = c_x + 2 A P - B^2 P^2 / c_v,                P(T) = c_T
//! -r' + lambda r = A r + 2 P kappa m - B^2 P r / c_v,          r(T) = 0
//! -s' + lambda s = kappa m r - B^2 r^2 / (4 c_v) + sigma^2 P,  s(T) = 0
//!  m' = (A + kappa) m - B^2 (2 P m + r) / (2 c_v),              m(0) = m0
//! ```
//!
//! The `(m, r)` pair is a linear two-point problem, solved by superposition.

use serde::Serialize;
use thiserror::Error;

/// Fine steps per unit time for the fixed-step integrator.
const STEPS_PER_UNIT: f64 = 20_000.0;
const BLOW_UP: f64 = 1e12;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("riccati solution blows up near t = {0}")]
    BlowUp(f64),
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("scenario is not covered by this oracle: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LqParams {
    pub a: f64,
    pub b: f64,
    pub c_x: f64,
    pub c_v: f64,
    pub c_t: f64,
    pub lambda: f64,
    pub horizon: f64,
    pub kappa: f64,
    pub sigma: f64,
    pub mean0: f64,
}

/// Fixed-step RK4 trajectory with cubic Hermite interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    ts: Vec<f64>,
    ys: Vec<Vec<f64>>,
    dys: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Integrates `y' = f(t, y)` from `t0` to `t1` (either direction).
    pub fn integrate<F>(f: F, t0: f64, y0: Vec<f64>, t1: f64, steps: usize) -> Result<Self, OracleError>
    where
        F: Fn(f64, &[f64]) -> Vec<f64>,
    {
        let h = (t1 - t0) / steps as f64;
        let mut ts = vec![t0];
        let mut ys = vec![y0.clone()];
        let mut dys = vec![f(t0, &y0)];
        let mut y = y0;
        let axpy = |y: &[f64], k: &[f64], c: f64| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + c * b).collect() };
        for n in 0..steps {
            let t = t0 + n as f64 * h;
            let k1 = dys.last().expect("non-empty").clone();
            let k2 = f(t + h / 2.0, &axpy(&y, &k1, h / 2.0));
            let k3 = f(t + h / 2.0, &axpy(&y, &k2, h / 2.0));
            let k4 = f(t + h, &axpy(&y, &k3, h));
            y = (0..y.len()).map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
            let tn = if n + 1 == steps { t1 } else { t0 + (n + 1) as f64 * h };
            if y.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
                return Err(OracleError::BlowUp(tn));
            }
            dys.push(f(tn, &y));
            ts.push(tn);
            ys.push(y.clone());
        }
        if h < 0.0 {
            ts.reverse();
            ys.reverse();
            dys.reverse();
        }
        Ok(Self { ts, ys, dys })
    }

    pub fn start(&self) -> &[f64] {
        &self.ys[0]
    }

    pub fn end(&self) -> &[f64] {
        self.ys.last().expect("non-empty")
    }

    /// Component `i` at time `t`, clamped to the integration interval.
    pub fn at(&self, t: f64, i: usize) -> f64 {
        let n = self.ts.len();
        let t = t.clamp(self.ts[0], self.ts[n - 1]);
        let h = (self.ts[n - 1] - self.ts[0]) / (n - 1) as f64;
        let j = (((t - self.ts[0]) / h).floor() as usize).min(n - 2);
        let (ta, tb) = (self.ts[j], self.ts[j + 1]);
        let w = tb - ta;
        let s = (t - ta) / w;
        let (ya, yb, da, db) = (self.ys[j][i], self.ys[j + 1][i], self.dys[j][i], self.dys[j + 1][i]);
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * ya + (s3 - 2.0 * s2 + s) * w * da + (-2.0 * s3 + 3.0 * s2) * yb + (s3 - s2) * w * db
    }
}

/// Classical (time-consistent) LQ reference.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub params: LqParams,
    p: Trajectory,
    /// `(m, r)` forward.
    mr: Trajectory,
    s: Trajectory,
}

impl RiccatiSolution {
    pub fn p(&self, t: f64) -> f64 {
        self.p.at(t, 0)
    }

    pub fn r(&self, t: f64) -> f64 {
        self.mr.at(t, 1)
    }

    pub fn s(&self, t: f64) -> f64 {
        self.s.at(t, 0)
    }

    pub fn mean(&self, t: f64) -> f64 {
        self.mr.at(t, 0)
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        self.p(t) * x * x + self.r(t) * x + self.s(t)
    }

    /// `-B (2 P x + r) / (2 c_v)` clamped to `[u_min, u_max]`.
    pub fn feedback(&self, t: f64, x: f64, u_min: f64, u_max: f64) -> f64 {
        let q = &self.params;
        (-q.b * (2.0 * self.p(t) * x + self.r(t)) / (2.0 * q.c_v)).clamp(u_min, u_max)
    }
}

fn check(params: &LqParams) -> Result<usize, OracleError> {
    if !(params.c_v > 0.0) || !(params.horizon > 0.0) {
        return Err(OracleError::Invalid("need c_v > 0 and T > 0".into()));
    }
    Ok(((params.horizon * STEPS_PER_UNIT).ceil() as usize).max(1000))
}

pub fn riccati_oracle(params: &LqParams) -> Result<RiccatiSolution, OracleError> {
    let steps = check(params)?;
    let q = params.clone();
    let t_end = q.horizon;
    let bb = q.b * q.b;
    // dP/dt = lambda P - c_x - 2 A P + B^2 P^2 / c_v
    let p = Trajectory::integrate(
        |_, y| vec![q.lambda * y[0] - q.c_x - 2.0 * q.a * y[0] + bb * y[0] * y[0] / q.c_v],
        t_end,
        vec![q.c_t],
        0.0,
        steps,
    )?;
    let mr_rhs = |t: f64, y: &[f64]| {
        let pt = p.at(t, 0);
        let (m, r) = (y[0], y[1]);
        vec![
            (q.a + q.kappa) * m - bb * (2.0 * pt * m + r) / (2.0 * q.c_v),
            q.lambda * r - q.a * r - 2.0 * pt * q.kappa * m + bb * pt * r / q.c_v,
        ]
    };
    let mr = if q.kappa == 0.0 {
        Trajectory::integrate(mr_rhs, 0.0, vec![q.mean0, 0.0], t_end, steps)?
    } else {
        let base = Trajectory::integrate(mr_rhs, 0.0, vec![q.mean0, 0.0], t_end, steps)?;
        let unit = Trajectory::integrate(mr_rhs, 0.0, vec![0.0, 1.0], t_end, steps)?;
        let r0 = -base.end()[1] / unit.end()[1];
        Trajectory::integrate(mr_rhs, 0.0, vec![q.mean0, r0], t_end, steps)?
    };
    let s = Trajectory::integrate(
        |t, y| {
            let (pt, m, r) = (p.at(t, 0), mr.at(t, 0), mr.at(t, 1));
            vec![q.lambda * y[0] - (q.kappa * m * r - bb * r * r / (4.0 * q.c_v) + q.sigma * q.sigma * pt)]
        },
        t_end,
        vec![0.0],
        0.0,
        steps,
    )?;
    Ok(RiccatiSolution { params: params.clone(), p, mr, s })
}

/// Equilibrium reference for a state cost discounted from the evaluation
/// time, `e^{-lambda (s - tau)} c_x x^2`, with undiscounted control cost
/// `c_v v^2` and terminal cost `e^{-lambda (T - tau)} c_T x^2`. No mean field.
///
/// With feedback `-k x`, the value for evaluation time `tau` is
/// `e^{-lambda (t - tau)} E(t) x^2 + F(t) x^2 + const`, where
///
/// ```text
/// E' = lambda E - 2 (A - B k) E - c_x,   E(T) = c_T
/// F' = -2 (A - B k) F - c_v k^2,         F(T) = 0
/// k  = B (E + F) / c_v
/// ```
#[derive(Debug, Clone)]
pub struct EquilibriumRiccati {
    pub params: LqParams,
    /// `(E, F, S)` with `S(t) = sigma^2 int_t^T e^{-lambda (u - t)} E(u) + F(u) du` backward.
    ef: Trajectory,
    /// `G(t) = int_t^T e^{-lambda u} E(u) du` and `H(t) = int_t^T F(u) du`.
    gh: Trajectory,
}

impl EquilibriumRiccati {
    pub fn diagonal_coefficient(&self, t: f64) -> f64 {
        self.ef.at(t, 0) + self.ef.at(t, 1)
    }

    pub fn gain(&self, t: f64) -> f64 {
        self.params.b * self.diagonal_coefficient(t) / self.params.c_v
    }

    /// Constant part of the diagonal value.
    pub fn constant(&self, t: f64) -> f64 {
        let s2 = self.params.sigma * self.params.sigma;
        s2 * ((self.params.lambda * t).exp() * self.gh.at(t, 0) + self.gh.at(t, 1))
    }

    /// Diagonal value `Theta(t; t, x)`.
    pub fn value(&self, t: f64, x: f64) -> f64 {
        self.diagonal_coefficient(t) * x * x + self.constant(t)
    }

    pub fn feedback(&self, t: f64, x: f64, u_min: f64, u_max: f64) -> f64 {
        (-self.gain(t) * x).clamp(u_min, u_max)
    }
}

pub fn equilibrium_riccati_oracle(params: &LqParams) -> Result<EquilibriumRiccati, OracleError> {
    let steps = check(params)?;
    if params.kappa != 0.0 {
        return Err(OracleError::Unsupported("mean-field coupling".into()));
    }
    let q = params.clone();
    let ef = Trajectory::integrate(
        |_, y| {
            let k = q.b * (y[0] + y[1]) / q.c_v;
            let closed = q.a - q.b * k;
            vec![q.lambda * y[0] - 2.0 * closed * y[0] - q.c_x, -2.0 * closed * y[1] - q.c_v * k * k]
        },
        q.horizon,
        vec![q.c_t, 0.0],
        0.0,
        steps,
    )?;
    let gh = Trajectory::integrate(
        |t, _| vec![-(-q.lambda * t).exp() * ef.at(t, 0), -ef.at(t, 1)],
        q.horizon,
        vec![0.0, 0.0],
        0.0,
        steps,
    )?;
    Ok(EquilibriumRiccati { params: params.clone(), ef, gh })
}
