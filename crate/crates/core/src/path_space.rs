//! Piecewise-constant regime paths, the Skorohod-type path metric and the
//! enumerated path tree that carries every field of the solver.
//!
//! A node of the tree at grid level `k` stands for a chain history on
//! `[0, t_k)`. Its `regime` is the left limit `w(t_k-)`, which is the regime
//! read by the coefficients on the next interval `[t_k, t_{k+1})`. The root
//! has an empty history and carries the initial regime `alpha(0-)`.

use std::fmt::Write as _;
use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use crate::regime_chain::{Generator, StochasticMatrix};

const TIME_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum PathError {
    #[error("paths are defined on different spans [{0}, {1}) and [{2}, {3})")]
    SpanMismatch(f64, f64, f64, f64),
    #[error("cannot concatenate: first path ends at {0}, second starts at {1}")]
    NonAbutting(f64, f64),
    #[error("cannot restrict a path of length {len} by {eps}")]
    RestrictBeyondSpan { len: f64, eps: f64 },
    #[error("invalid path: {0}")]
    Invalid(String),
    #[error("time grid needs at least two strictly increasing points")]
    EmptyGrid,
    #[error("node {0} sits at the terminal time and has no forward extension")]
    TerminalNode(usize),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("initial regime {0} out of range for {1} regimes")]
    BadRegime(usize, usize),
}

/// A regime change at `time` into `state`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Jump {
    pub time: f64,
    pub state: usize,
}

/// Càdlàg piecewise-constant path on `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimePath {
    start: f64,
    end: f64,
    initial: usize,
    jumps: Vec<Jump>,
}

impl RegimePath {
    pub fn new(start: f64, end: f64, initial: usize, jumps: Vec<Jump>) -> Result<Self, PathError> {
        if !(start.is_finite() && end.is_finite()) || end < start {
            return Err(PathError::Invalid(format!("bad span [{start}, {end})")));
        }
        let mut prev_time = start;
        let mut prev_state = initial;
        for j in &jumps {
            if j.time <= prev_time || j.time >= end {
                return Err(PathError::Invalid(format!(
                    "jump times must be strictly increasing inside ({start}, {end}), got {}",
                    j.time
                )));
            }
            if j.state == prev_state {
                return Err(PathError::Invalid(format!("self-jump into {} at {}", j.state + 1, j.time)));
            }
            prev_time = j.time;
            prev_state = j.state;
        }
        Ok(Self { start, end, initial, jumps })
    }

    pub fn constant(start: f64, end: f64, state: usize) -> Self {
        Self { start, end: end.max(start), initial: state, jumps: Vec::new() }
    }

    /// Zero-length path at `time` whose left limit is `state`.
    pub fn empty(time: f64, state: usize) -> Self {
        Self::constant(time, time, state)
    }

    /// Path with regime `labels[k]` on `[times[k], times[k+1])`.
    pub fn from_interval_regimes(times: &[f64], labels: &[usize]) -> Self {
        assert!(!labels.is_empty() && times.len() > labels.len());
        let mut jumps = Vec::new();
        for k in 1..labels.len() {
            if labels[k] != labels[k - 1] {
                jumps.push(Jump { time: times[k], state: labels[k] });
            }
        }
        Self { start: times[0], end: times[labels.len()], initial: labels[0], jumps }
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 0.0
    }

    pub fn initial_state(&self) -> usize {
        self.initial
    }

    pub fn jumps(&self) -> &[Jump] {
        &self.jumps
    }

    /// Number of regime changes `N(w)`.
    pub fn jump_count(&self) -> usize {
        self.jumps.len()
    }

    /// Left limit at the end of the span, `w(end-)`.
    pub fn terminal_state(&self) -> usize {
        self.jumps.last().map_or(self.initial, |j| j.state)
    }

    /// Value at `s`; for `s` at or beyond the end this is the left limit.
    pub fn value_at(&self, s: f64) -> usize {
        let mut state = self.initial;
        for j in &self.jumps {
            if j.time <= s {
                state = j.state;
            } else {
                break;
            }
        }
        state
    }

    /// Distinct-state sequence visited by the path.
    fn state_sequence(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.initial).chain(self.jumps.iter().map(|j| j.state))
    }

    /// `self ⊕ next`; `next` must start where `self` ends.
    pub fn concat(&self, next: &RegimePath) -> Result<RegimePath, PathError> {
        if (self.end - next.start).abs() > TIME_EPS {
            return Err(PathError::NonAbutting(self.end, next.start));
        }
        if next.is_empty() {
            return Ok(self.clone());
        }
        if self.is_empty() {
            let mut out = next.clone();
            out.start = self.start;
            return Ok(out);
        }
        let mut jumps = self.jumps.clone();
        if next.initial != self.terminal_state() {
            jumps.push(Jump { time: next.start, state: next.initial });
        }
        jumps.extend_from_slice(&next.jumps);
        Ok(RegimePath { start: self.start, end: next.end, initial: self.initial, jumps })
    }

    /// Continuous extension `w^{+eps}`: the terminal value is held on the added piece.
    pub fn extend(&self, eps: f64) -> RegimePath {
        assert!(eps >= 0.0, "extension length must be nonnegative");
        let mut out = self.clone();
        out.end += eps;
        out
    }

    /// Restriction `w^{-eps}` to `[start, end - eps)`.
    pub fn restrict(&self, eps: f64) -> Result<RegimePath, PathError> {
        if eps < 0.0 || eps > self.len() {
            return Err(PathError::RestrictBeyondSpan { len: self.len(), eps });
        }
        let end = self.end - eps;
        let jumps = self.jumps.iter().copied().filter(|j| j.time < end).collect();
        Ok(RegimePath { start: self.start, end, initial: self.initial, jumps })
    }

    /// Lebesgue measure of `{s : self(s) != other(s)}` on the common span.
    pub fn mismatch_measure(&self, other: &RegimePath) -> Result<f64, PathError> {
        check_same_span(self, other)?;
        let mut cuts: Vec<f64> = vec![self.start, self.end];
        cuts.extend(self.jumps.iter().map(|j| j.time));
        cuts.extend(other.jumps.iter().map(|j| j.time));
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut total = 0.0;
        for w in cuts.windows(2) {
            if self.value_at(w[0]) != other.value_at(w[0]) {
                total += w[1] - w[0];
            }
        }
        Ok(total)
    }
}

fn check_same_span(a: &RegimePath, b: &RegimePath) -> Result<(), PathError> {
    if (a.start - b.start).abs() > TIME_EPS || (a.end - b.end).abs() > TIME_EPS {
        return Err(PathError::SpanMismatch(a.start, a.end, b.start, b.end));
    }
    Ok(())
}

/// Skorohod-type distance between two paths on the same span.
///
/// A warp can only move jump times, never change the visited state sequence,
/// so paths with different sequences always have a mismatch of 1 somewhere
/// and the identity warp attains the infimum 1. With equal sequences the
/// piecewise-linear warp pairing the k-th jumps aligns the states exactly,
/// with cost `max_k |s_k - s~_k|`; no warp does better since the k-th jump
/// must be mapped onto the k-th jump. The result is capped at 1, the
/// diameter of the discrete regime metric.
pub fn skorohod_distance(a: &RegimePath, b: &RegimePath) -> Result<f64, PathError> {
    check_same_span(a, b)?;
    if !a.state_sequence().eq(b.state_sequence()) {
        return Ok(1.0);
    }
    let shift = a
        .jumps
        .iter()
        .zip(&b.jumps)
        .map(|(x, y)| (x.time - y.time).abs())
        .fold(0.0, f64::max);
    Ok(shift.min(1.0))
}

/// A path functional `(t, w_t) -> R`; the current regime is `w.terminal_state()`.
pub trait PathFunctional {
    fn eval(&self, t: f64, path: &RegimePath) -> f64;
}

impl<F: Fn(f64, &RegimePath) -> f64> PathFunctional for F {
    fn eval(&self, t: f64, path: &RegimePath) -> f64 {
        self(t, path)
    }
}

/// Discrete α-derivative of `f` at `(t, path)`:
/// forward horizontal difference plus `sum_j q_ij f(t+h, path ⊕ j)`.
pub fn alpha_derivative_at<F: PathFunctional + ?Sized>(
    f: &F,
    t: f64,
    path: &RegimePath,
    gen: &Generator,
    h_step: f64,
) -> f64 {
    let base = f.eval(t, path);
    let horizontal = (f.eval(t + h_step, &path.extend(h_step)) - base) / h_step;
    let i = path.terminal_state();
    let vertical: f64 = (0..gen.regimes())
        .map(|j| {
            let q = gen.rate(i, j);
            if q == 0.0 {
                return 0.0;
            }
            let piece = RegimePath::constant(path.end(), path.end() + h_step, j);
            let ext = path.concat(&piece).expect("piece abuts the path");
            q * f.eval(t + h_step, &ext)
        })
        .sum();
    horizontal + vertical
}

/// Vertical derivative `∂_j^V f(t, w)` approximated at extension length `h_step`.
pub fn vertical_derivative<F: PathFunctional + ?Sized>(
    f: &F,
    t: f64,
    path: &RegimePath,
    regime: usize,
    h_step: f64,
) -> f64 {
    let piece = RegimePath::constant(path.end(), path.end() + h_step, regime);
    f.eval(t + h_step, &path.concat(&piece).expect("piece abuts the path"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Child {
    pub regime: usize,
    pub weight: f64,
    pub node: NodeId,
}

#[derive(Debug, Clone, Serialize)]
pub struct PathNode {
    pub id: NodeId,
    pub time_index: usize,
    /// Left limit `w(t_k-)`; the regime read on `[t_k, t_{k+1})`.
    pub regime: usize,
    /// Regime changes since `alpha(0-)`, counted against the jump cap.
    pub switches: usize,
    pub path: RegimePath,
    pub parent: Option<NodeId>,
    pub children: Vec<Child>,
    pub cumulative_weight: f64,
}

/// Size and truncation diagnostics of an enumerated tree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeStats {
    pub levels: usize,
    pub node_count: usize,
    pub leaf_count: usize,
    pub nodes_per_level: Vec<usize>,
    /// Probability mass the untruncated chain would have sent beyond the jump cap.
    pub truncated_mass: f64,
}

/// All grid paths from the initial regime with at most `jump_cap` changes.
#[derive(Debug, Clone, Serialize)]
pub struct PathTree {
    times: Vec<f64>,
    regimes: usize,
    initial: usize,
    jump_cap: usize,
    nodes: Vec<PathNode>,
    levels: Vec<Range<usize>>,
    truncated_mass: f64,
}

impl PathTree {
    /// Enumerates the tree breadth-first. Node ids are contiguous per level.
    pub fn enumerate(
        times: &[f64],
        gen: &Generator,
        jump_cap: usize,
        initial: usize,
    ) -> Result<Self, PathError> {
        if times.len() < 2 || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PathError::EmptyGrid);
        }
        let m = gen.regimes();
        if initial >= m {
            return Err(PathError::BadRegime(initial, m));
        }
        let mut nodes = vec![PathNode {
            id: NodeId(0),
            time_index: 0,
            regime: initial,
            switches: 0,
            path: RegimePath::empty(times[0], initial),
            parent: None,
            children: Vec::new(),
            cumulative_weight: 1.0,
        }];
        let mut levels = vec![0..1];
        let mut truncated_mass = 0.0;
        let mut step: Option<(f64, StochasticMatrix)> = None;
        for k in 0..times.len() - 1 {
            let dt = times[k + 1] - times[k];
            if step.as_ref().is_none_or(|(h, _)| (h - dt).abs() > 1e-15) {
                step = Some((dt, gen.transition_matrix(dt)));
            }
            let p = &step.as_ref().expect("set above").1;
            let parents = levels[k].clone();
            let first_child = nodes.len();
            for pid in parents {
                let (regime, switches, weight, path) = {
                    let n = &nodes[pid];
                    (n.regime, n.switches, n.cumulative_weight, n.path.clone())
                };
                let row = p.row(regime);
                let at_cap = switches >= jump_cap;
                let allowed: Vec<(usize, f64)> = if at_cap {
                    truncated_mass += weight * (1.0 - row[regime]);
                    vec![(regime, 1.0)]
                } else {
                    let total: f64 = row.iter().sum();
                    (0..m).map(|j| (j, row[j] / total)).filter(|&(_, w)| w > 0.0 || m == 1).collect()
                };
                for (j, w) in allowed {
                    let id = NodeId(nodes.len());
                    let piece = RegimePath::constant(times[k], times[k + 1], j);
                    let child_path = path.concat(&piece).expect("grid pieces abut");
                    nodes.push(PathNode {
                        id,
                        time_index: k + 1,
                        regime: j,
                        switches: switches + usize::from(j != regime),
                        path: child_path,
                        parent: Some(NodeId(pid)),
                        children: Vec::new(),
                        cumulative_weight: weight * w,
                    });
                    nodes[pid].children.push(Child { regime: j, weight: w, node: id });
                }
            }
            levels.push(first_child..nodes.len());
        }
        Ok(Self {
            times: times.to_vec(),
            regimes: m,
            initial,
            jump_cap,
            nodes,
            levels,
            truncated_mass,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of time steps `N_t`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn regimes(&self) -> usize {
        self.regimes
    }

    pub fn initial_regime(&self) -> usize {
        self.initial
    }

    pub fn jump_cap(&self) -> usize {
        self.jump_cap
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> &PathNode {
        &self.nodes[0]
    }

    pub fn get(&self, id: NodeId) -> Option<&PathNode> {
        self.nodes.get(id.0)
    }

    pub fn node(&self, id: NodeId) -> &PathNode {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[PathNode] {
        &self.nodes
    }

    /// Nodes at grid level `k`.
    pub fn level(&self, k: usize) -> &[PathNode] {
        &self.nodes[self.levels[k].clone()]
    }

    pub fn level_range(&self, k: usize) -> Range<usize> {
        self.levels[k].clone()
    }

    pub fn leaves(&self) -> &[PathNode] {
        self.level(self.steps())
    }

    /// Position of `id` within its level.
    pub fn offset_in_level(&self, id: NodeId) -> usize {
        let n = &self.nodes[id.0];
        id.0 - self.levels[n.time_index].start
    }

    /// Per-interval regimes `l_1..l_k` leading to `id`.
    pub fn interval_regimes(&self, id: NodeId) -> Vec<usize> {
        let mut labels = Vec::new();
        let mut cur = &self.nodes[id.0];
        while let Some(p) = cur.parent {
            labels.push(cur.regime);
            cur = &self.nodes[p.0];
        }
        labels.reverse();
        labels
    }

    /// Walks from the root following per-interval regimes.
    pub fn find_by_regimes(&self, labels: &[usize]) -> Option<NodeId> {
        let mut cur = NodeId(0);
        for &l in labels {
            cur = self.nodes[cur.0].children.iter().find(|c| c.regime == l)?.node;
        }
        Some(cur)
    }

    /// Ancestor of `id` at level `k <= id.time_index`.
    pub fn ancestor_at(&self, id: NodeId, k: usize) -> NodeId {
        let mut cur = id;
        while self.nodes[cur.0].time_index > k {
            cur = self.nodes[cur.0].parent.expect("non-root has a parent");
        }
        cur
    }

    /// `initial;k:j;...` with 1-based regimes, one pair per regime change.
    pub fn signature(&self, id: NodeId) -> String {
        let mut out = format!("{}", self.initial + 1);
        let mut prev = self.initial;
        for (k, l) in self.interval_regimes(id).into_iter().enumerate() {
            if l != prev {
                let _ = write!(out, ";{}:{}", k, l + 1);
                prev = l;
            }
        }
        out
    }

    pub fn stats(&self) -> TreeStats {
        TreeStats {
            levels: self.levels.len(),
            node_count: self.nodes.len(),
            leaf_count: self.leaves().len(),
            nodes_per_level: self.levels.iter().map(|r| r.len()).collect(),
            truncated_mass: self.truncated_mass,
        }
    }

    /// Discrete α-derivative of `f` at a node, `h_step` defaulting to the grid step.
    pub fn alpha_derivative<F: PathFunctional + ?Sized>(
        &self,
        f: &F,
        id: NodeId,
        gen: &Generator,
        h_step: Option<f64>,
    ) -> Result<f64, PathError> {
        let node = self.get(id).ok_or(PathError::UnknownNode(id.0))?;
        let k = node.time_index;
        if k >= self.steps() {
            return Err(PathError::TerminalNode(id.0));
        }
        let h = h_step.unwrap_or(self.times[k + 1] - self.times[k]);
        Ok(alpha_derivative_at(f, self.times[k], &node.path, gen, h))
    }
}

/// Free-function form of [`PathTree::enumerate`].
pub fn enumerate_tree(
    times: &[f64],
    regimes: usize,
    jump_cap: usize,
    initial: usize,
    gen: &Generator,
) -> Result<PathTree, PathError> {
    if gen.regimes() != regimes {
        return Err(PathError::BadRegime(regimes, gen.regimes()));
    }
    PathTree::enumerate(times, gen, jump_cap, initial)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn jump_path(start: f64, end: f64, init: usize, jumps: &[(f64, usize)]) -> RegimePath {
        RegimePath::new(
            start,
            end,
            init,
            jumps.iter().map(|&(time, state)| Jump { time, state }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_malformed_paths() {
        assert!(RegimePath::new(0.0, 1.0, 0, vec![Jump { time: 0.5, state: 0 }]).is_err());
        assert!(RegimePath::new(
            0.0,
            1.0,
            0,
            vec![Jump { time: 0.5, state: 1 }, Jump { time: 0.4, state: 0 }]
        )
        .is_err());
        assert!(RegimePath::new(0.0, 1.0, 0, vec![Jump { time: 1.0, state: 1 }]).is_err());
    }

    #[test]
    fn value_and_counts() {
        let p = jump_path(0.0, 1.0, 0, &[(0.3, 1), (0.7, 0)]);
        assert_eq!(p.jump_count(), 2);
        assert_eq!(p.value_at(0.0), 0);
        assert_eq!(p.value_at(0.3), 1);
        assert_eq!(p.value_at(0.69), 1);
        assert_eq!(p.terminal_state(), 0);
        assert_eq!(RegimePath::constant(0.0, 1.0, 1).jump_count(), 0);
    }

    #[test]
    fn distance_examples() {
        let p = jump_path(0.0, 1.0, 0, &[(0.4, 1)]);
        assert_eq!(skorohod_distance(&p, &p).unwrap(), 0.0);
        let c = RegimePath::constant(0.0, 1.0, 0);
        let j = jump_path(0.0, 1.0, 0, &[(0.5, 1)]);
        assert_eq!(skorohod_distance(&c, &j).unwrap(), 1.0);
        let q = jump_path(0.0, 1.0, 0, &[(0.5, 1)]);
        assert!((skorohod_distance(&p, &q).unwrap() - 0.1).abs() < 1e-12);
        let short = RegimePath::constant(0.0, 0.5, 0);
        assert!(matches!(skorohod_distance(&c, &short), Err(PathError::SpanMismatch(..))));
    }

    #[test]
    fn concat_examples() {
        let p = jump_path(0.0, 0.5, 0, &[(0.2, 1)]);
        assert_eq!(p.concat(&RegimePath::empty(0.5, 0)).unwrap(), p);
        let a = RegimePath::constant(0.0, 0.5, 0);
        let b = RegimePath::constant(0.5, 1.0, 1);
        let ab = a.concat(&b).unwrap();
        assert_eq!(ab.jumps(), &[Jump { time: 0.5, state: 1 }]);
        let same = a.concat(&RegimePath::constant(0.5, 1.0, 0)).unwrap();
        assert_eq!(same.jump_count(), 0);
        assert!(matches!(
            a.concat(&RegimePath::constant(0.6, 1.0, 0)),
            Err(PathError::NonAbutting(..))
        ));
    }

    #[test]
    fn extend_restrict_examples() {
        let p = jump_path(0.0, 0.5, 0, &[(0.4, 1)]);
        assert_eq!(p.extend(0.0), p);
        let e = p.extend(0.3);
        assert_eq!(e.jumps(), p.jumps());
        assert!((e.end() - 0.8).abs() < 1e-15);
        let back = e.restrict(0.3).unwrap();
        assert_eq!(back.jumps(), p.jumps());
        assert!((back.end() - 0.5).abs() < 1e-15);
        let cut = p.restrict(0.15).unwrap();
        assert_eq!(cut.jump_count(), 0);
        assert!(matches!(p.restrict(0.6), Err(PathError::RestrictBeyondSpan { .. })));
    }

    #[test]
    fn tree_leaf_counts() {
        let gen = Generator::symmetric(2, 1.0);
        let t = PathTree::enumerate(&[0.0, 1.0], &gen, 0, 0).unwrap();
        assert_eq!(t.leaves().len(), 1);
        let t = PathTree::enumerate(&[0.0, 0.5, 1.0], &gen, 2, 0).unwrap();
        assert_eq!(t.leaves().len(), 4);
        let mut seqs: Vec<Vec<usize>> = t.leaves().iter().map(|n| t.interval_regimes(n.id)).collect();
        seqs.sort();
        assert_eq!(seqs, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn tree_leaf_count_formula() {
        fn binom(n: usize, k: usize) -> usize {
            (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
        }
        for (m, n, cap) in [(2, 6, 2), (3, 5, 1), (3, 7, 3), (4, 4, 2)] {
            let gen = Generator::symmetric(m, 1.3);
            let times: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
            let tree = PathTree::enumerate(&times, &gen, cap, 0).unwrap();
            let expect: usize = (0..=cap.min(n)).map(|j| binom(n, j) * (m - 1).pow(j as u32)).sum();
            assert_eq!(tree.leaves().len(), expect, "m={m} n={n} cap={cap}");
            let mass: f64 = tree.leaves().iter().map(|l| l.cumulative_weight).sum();
            assert!((mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cap_nodes_have_single_child() {
        let gen = Generator::symmetric(3, 2.0);
        let times: Vec<f64> = (0..=5).map(|k| k as f64 * 0.1).collect();
        let tree = PathTree::enumerate(&times, &gen, 1, 0).unwrap();
        for n in tree.nodes() {
            if n.time_index < tree.steps() {
                let s: f64 = n.children.iter().map(|c| c.weight).sum();
                assert!((s - 1.0).abs() < 1e-14);
                if n.switches >= 1 {
                    assert_eq!(n.children.len(), 1);
                    assert_eq!(n.children[0].regime, n.regime);
                }
            }
            for c in &n.children {
                let child = tree.node(c.node);
                assert_eq!(child.switches, n.switches + usize::from(c.regime != n.regime));
            }
        }
        assert!(tree.stats().truncated_mass > 0.0);
    }

    #[test]
    fn signature_format() {
        let gen = Generator::symmetric(2, 1.0);
        let times: Vec<f64> = (0..=4).map(|k| k as f64).collect();
        let tree = PathTree::enumerate(&times, &gen, 2, 0).unwrap();
        let id = tree.find_by_regimes(&[1, 1, 0, 0]).unwrap();
        assert_eq!(tree.signature(id), "1;0:2;2:1");
        assert_eq!(tree.signature(NodeId(0)), "1");
        assert!(tree.find_by_regimes(&[1, 0, 1, 0]).is_none());
    }

    #[test]
    fn alpha_derivative_basic() {
        let gen = Generator::symmetric(2, 1.0);
        let times: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        let tree = PathTree::enumerate(&times, &gen, 2, 0).unwrap();
        let node = tree.find_by_regimes(&[0, 0, 0]).unwrap();
        let constant = |_t: f64, _w: &RegimePath| 3.0;
        assert!(tree.alpha_derivative(&constant, node, &gen, None).unwrap().abs() < 1e-15);
        let clock = |t: f64, _w: &RegimePath| t;
        let d = tree.alpha_derivative(&clock, node, &gen, Some(1e-3)).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
        let label = |_t: f64, w: &RegimePath| (w.terminal_state() + 1) as f64;
        let d = tree.alpha_derivative(&label, node, &gen, None).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        let leaf = tree.leaves()[0].id;
        assert!(matches!(
            tree.alpha_derivative(&constant, leaf, &gen, None),
            Err(PathError::TerminalNode(_))
        ));
    }
}
