//! C ABI for the `regime-mfg` solver.
//!
//! Every function returns an [`RmfgStatus`]. On failure a message is kept in
//! thread-local storage and can be copied out with
//! [`rmfg_last_error_message`]. Handles are opaque and must be released with
//! their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use regime_mfg::equilibrium::{fp_iteration, EquilibriumResult, IterationSettings};
use regime_mfg::meanfield_flow::wasserstein2;
use regime_mfg::path_space::{NodeId, PathTree};
use regime_mfg::scenario::{parse_scenario, Scenario};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmfgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Solve = 4,
    /// The fixed point stopped without converging; the solution is still returned.
    NotConverged = 5,
    OutOfRange = 6,
    BufferTooSmall = 7,
    InvalidArgument = 8,
    Panic = 9,
}

/// Parsed scenario.
pub struct RmfgScenario {
    inner: Scenario,
}

/// Solved equilibrium together with its path tree.
pub struct RmfgSolution {
    tree: PathTree,
    result: EquilibriumResult,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: RmfgStatus, msg: impl Into<String>) -> RmfgStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> RmfgStatus) -> RmfgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(RmfgStatus::Panic, msg)
        }
    }
}

/// Copies `src` into `(out, len)` and writes the element count to `written`.
unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize, written: *mut usize) -> RmfgStatus {
    if !written.is_null() {
        *written = src.len();
    }
    if len < src.len() {
        return fail(RmfgStatus::BufferTooSmall, format!("need {} values, got room for {len}", src.len()));
    }
    if src.is_empty() {
        return RmfgStatus::Ok;
    }
    if out.is_null() {
        return fail(RmfgStatus::NullPointer, "output buffer is null");
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    RmfgStatus::Ok
}

/// NUL-terminated library version string with static lifetime.
#[no_mangle]
pub extern "C" fn rmfg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len` bytes. Returns the full message length in bytes
/// (excluding the terminator).
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rmfg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Parses scenario text.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rmfg_scenario_parse(text: *const c_char, out: *mut *mut RmfgScenario) -> RmfgStatus {
    guard(|| {
        if text.is_null() || out.is_null() {
            return fail(RmfgStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let Ok(src) = CStr::from_ptr(text).to_str() else {
            return fail(RmfgStatus::InvalidUtf8, "scenario text is not UTF-8");
        };
        match parse_scenario(src) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(RmfgScenario { inner: s }));
                RmfgStatus::Ok
            }
            Err(e) => fail(RmfgStatus::Parse, e.to_string()),
        }
    })
}

/// # Safety
/// `s` must be null or a handle from [`rmfg_scenario_parse`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rmfg_scenario_free(s: *mut RmfgScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Number of regimes, time steps and spatial points.
///
/// # Safety
/// `s` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn rmfg_scenario_dims(
    s: *const RmfgScenario,
    regimes: *mut usize,
    time_steps: *mut usize,
    space_points: *mut usize,
) -> RmfgStatus {
    let Some(s) = s.as_ref() else { return fail(RmfgStatus::NullPointer, "null scenario") };
    let s = &s.inner;
    for (p, v) in [(regimes, s.regimes()), (time_steps, s.time.steps()), (space_points, s.space.len())] {
        if !p.is_null() {
            *p = v;
        }
    }
    RmfgStatus::Ok
}

/// Row-major `m x m` transition matrix of the regime chain over `dt`.
///
/// # Safety
/// `s` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rmfg_transition_matrix(
    s: *const RmfgScenario,
    dt: f64,
    out: *mut f64,
    len: usize,
    written: *mut usize,
) -> RmfgStatus {
    guard(|| {
        let Some(s) = s.as_ref() else { return fail(RmfgStatus::NullPointer, "null scenario") };
        if !(dt >= 0.0) || !dt.is_finite() {
            return fail(RmfgStatus::InvalidArgument, format!("dt must be finite and non-negative, got {dt}"));
        }
        let p = s.inner.generator.transition_matrix(dt);
        let flat: Vec<f64> = (0..p.dim()).flat_map(|i| p.row(i).to_vec()).collect();
        copy_out(&flat, out, len, written)
    })
}

/// `W_2` distance between two cell-mass vectors on the scenario grid.
///
/// # Safety
/// `s` must be a live handle; `a` and `b` must hold `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rmfg_wasserstein2(
    s: *const RmfgScenario,
    a: *const f64,
    b: *const f64,
    n: usize,
    out: *mut f64,
) -> RmfgStatus {
    guard(|| {
        let Some(s) = s.as_ref() else { return fail(RmfgStatus::NullPointer, "null scenario") };
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(RmfgStatus::NullPointer, "null argument");
        }
        let (a, b) = (std::slice::from_raw_parts(a, n), std::slice::from_raw_parts(b, n));
        match wasserstein2(a, b, &s.inner.space) {
            Ok(d) => {
                *out = d;
                RmfgStatus::Ok
            }
            Err(e) => fail(RmfgStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Solves the equilibrium. Non-positive `tol` or zero `max_iter` keep the
/// scenario's own settings. A run that stops without converging still hands
/// back a solution and returns [`RmfgStatus::NotConverged`].
///
/// # Safety
/// `s` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rmfg_solve(
    s: *const RmfgScenario,
    tol: f64,
    max_iter: usize,
    out: *mut *mut RmfgSolution,
) -> RmfgStatus {
    guard(|| {
        let Some(s) = s.as_ref() else { return fail(RmfgStatus::NullPointer, "null scenario") };
        if out.is_null() {
            return fail(RmfgStatus::NullPointer, "null output");
        }
        *out = ptr::null_mut();
        let s = &s.inner;
        let mut settings = IterationSettings::for_scenario(s);
        if tol > 0.0 {
            settings.tol = tol;
        }
        if max_iter > 0 {
            settings.max_iter = max_iter;
        }
        let tree = match s.tree() {
            Ok(t) => t,
            Err(e) => return fail(RmfgStatus::Solve, e.to_string()),
        };
        match fp_iteration(s, &tree, None, &settings) {
            Ok(result) => {
                let converged = result.converged;
                let outcome = result.outcome;
                *out = Box::into_raw(Box::new(RmfgSolution { tree, result }));
                if converged {
                    RmfgStatus::Ok
                } else {
                    fail(RmfgStatus::NotConverged, format!("{outcome:?}"))
                }
            }
            Err(e) => fail(RmfgStatus::Solve, e.to_string()),
        }
    })
}

/// # Safety
/// `sol` must be null or a handle from [`rmfg_solve`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rmfg_solution_free(sol: *mut RmfgSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// Iteration count, convergence flag, node count and empirical contraction.
///
/// # Safety
/// `sol` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn rmfg_solution_summary(
    sol: *const RmfgSolution,
    iterations: *mut usize,
    converged: *mut bool,
    nodes: *mut usize,
    contraction: *mut f64,
) -> RmfgStatus {
    let Some(sol) = sol.as_ref() else { return fail(RmfgStatus::NullPointer, "null solution") };
    let r = &sol.result;
    if !iterations.is_null() {
        *iterations = r.iterations;
    }
    if !converged.is_null() {
        *converged = r.converged;
    }
    if !nodes.is_null() {
        *nodes = sol.tree.len();
    }
    if !contraction.is_null() {
        *contraction = r.empirical_contraction;
    }
    RmfgStatus::Ok
}

/// Node reached by following the interval regimes `labels[0..len]` (0-based)
/// from the root.
///
/// # Safety
/// `sol` must be a live handle; `labels` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn rmfg_solution_find_node(
    sol: *const RmfgSolution,
    labels: *const usize,
    len: usize,
    node: *mut usize,
) -> RmfgStatus {
    let Some(sol) = sol.as_ref() else { return fail(RmfgStatus::NullPointer, "null solution") };
    if node.is_null() || (labels.is_null() && len > 0) {
        return fail(RmfgStatus::NullPointer, "null argument");
    }
    let labels = if len == 0 { &[][..] } else { std::slice::from_raw_parts(labels, len) };
    match sol.tree.find_by_regimes(labels) {
        Some(id) => {
            *node = id.0;
            RmfgStatus::Ok
        }
        None => fail(RmfgStatus::OutOfRange, "no node follows these regimes within the jump cap"),
    }
}

/// Which per-node array to copy out.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmfgField {
    /// Feedback strategy; empty at leaves.
    Strategy = 0,
    /// Diagonal value.
    Value = 1,
    /// Conditional cell masses.
    Density = 2,
}

/// Copies a per-node array on the spatial grid.
///
/// # Safety
/// `sol` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rmfg_solution_node_field(
    sol: *const RmfgSolution,
    field: RmfgField,
    node: usize,
    out: *mut f64,
    len: usize,
    written: *mut usize,
) -> RmfgStatus {
    guard(|| {
        let Some(sol) = sol.as_ref() else { return fail(RmfgStatus::NullPointer, "null solution") };
        if node >= sol.tree.len() {
            return fail(RmfgStatus::OutOfRange, format!("node {node} of {}", sol.tree.len()));
        }
        let id = NodeId(node);
        let r = &sol.result;
        let src = match field {
            RmfgField::Strategy => r.strategy.get(id),
            RmfgField::Value => r.theta.diagonal(id),
            RmfgField::Density => r.zeta.density(id),
        };
        copy_out(src, out, len, written)
    })
}

/// Sup-norm step of each fixed-point iteration.
///
/// # Safety
/// `sol` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rmfg_solution_distances(
    sol: *const RmfgSolution,
    out: *mut f64,
    len: usize,
    written: *mut usize,
) -> RmfgStatus {
    let Some(sol) = sol.as_ref() else { return fail(RmfgStatus::NullPointer, "null solution") };
    copy_out(&sol.result.distance_history, out, len, written)
}
