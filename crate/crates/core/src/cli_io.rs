//! Run directories, exports and the command implementations behind the
//! `regime-mfg` binary.
//!
//! A run directory holds:
//!
//! | file              | content                                           |
//! |-------------------|---------------------------------------------------|
//! | `scenario.scn`    | verbatim copy of the input scenario               |
//! | `strategy.bin`    | diagonal feedback, binary dump                    |
//! | `theta.bin`       | retained value slices, binary dump                |
//! | `zeta.bin`        | conditional law per node, binary dump             |
//! | `convergence.csv` | `iteration,distance`                              |
//! | `diagnostics.json`| outcome, contraction report, tree and HJB stats   |
//! | `manifest.json`   | hashes, seed, version, command, file inventory    |

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::equilibrium::{contraction_report, fp_iteration, EquilibriumError, EquilibriumResult, IterationSettings, Outcome};
use crate::hjb::{Retention, ValueTensor};
use crate::meanfield_flow::{DensityField, StrategyField};
use crate::path_space::{NodeId, PathTree};
use crate::scenario::{parse_scenario, Scenario, ScenarioError};
use crate::validation::local_opt::{local_optimality_test, random_probes, Deviation, LocalOptReport, LOCAL_TOL};
use crate::validation::nplayer::{nplayer_simulate, SimReport};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Median terminal `W_2` accepted by `validate --nplayer`.
pub const NPLAYER_W2_TOL: f64 = 0.05;

pub const DUMP_MAGIC: &[u8; 8] = b"RMFGDUMP";
pub const DUMP_VERSION: u32 = 1;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    Input = 1,
    Divergence = 2,
    ValidationFailure = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Scenario { path: PathBuf, source: ScenarioError },
    #[error("{0}")]
    Usage(String),
    #[error("malformed dump {path}: {message}")]
    Dump { path: PathBuf, message: String },
    #[error(transparent)]
    Solver(#[from] EquilibriumError),
    #[error("{0}")]
    Harness(String),
}

impl CliError {
    pub fn exit_status(&self) -> ExitStatus {
        match self {
            CliError::Solver(_) | CliError::Harness(_) => ExitStatus::Divergence,
            _ => ExitStatus::Input,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: Vec<String>,
    pub scenario_sha256: String,
    pub seed: u64,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub files: Vec<FileEntry>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Dump { path, message: e.to_string() })
    }

    /// Re-hashes the stored scenario copy.
    pub fn scenario_hash_matches(&self, dir: &Path) -> Result<bool, CliError> {
        let path = dir.join("scenario.scn");
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        Ok(sha256_hex(&bytes) == self.scenario_sha256)
    }

    /// Every listed file exists with the recorded checksum.
    pub fn verify(&self, dir: &Path) -> Result<bool, CliError> {
        for f in &self.files {
            let path = dir.join(&f.path);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if sha256_hex(&bytes) != f.sha256 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Writes files into a run directory and tracks them for the manifest.
pub struct RunWriter {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl RunWriter {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    /// Opens an existing run directory, keeping its inventory.
    pub fn reopen(dir: &Path, manifest: &RunManifest) -> Self {
        Self { dir: dir.to_path_buf(), files: manifest.files.clone() }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileEntry { path: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    pub fn finish(mut self, mut manifest: RunManifest) -> Result<RunManifest, CliError> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        manifest.files = self.files;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

/// Kind tag stored in a binary dump header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpKind {
    Strategy = 1,
    Theta = 2,
    Zeta = 3,
}

impl DumpKind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(Self::Strategy),
            2 => Some(Self::Theta),
            3 => Some(Self::Zeta),
            _ => None,
        }
    }
}

/// Decoded binary dump: header fields and `(node, tau_index, values)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dump {
    pub kind: DumpKind,
    pub flags: u32,
    pub nodes: u64,
    pub points: u64,
    pub rows: Vec<(u64, u64, Vec<f64>)>,
}

/// Binary layout, all integers and floats little-endian:
///
/// ```text
/// magic   8 bytes  "RMFGDUMP"
/// version u32      1
/// kind    u32      1 strategy, 2 theta, 3 zeta
/// flags   u32      theta: bit 0 collapsed tau axis, bit 1 full retention
/// nodes   u64      tree size
/// points  u64      spatial grid size N_x
/// rows    u64      number of rows R
/// R times: node u64, tau_index u64, N_x f64 values
/// ```
///
/// Strategy dumps end with one extra row whose node and tau index are
/// `u64::MAX`; its first two values are the action bounds.
pub fn encode_dump(d: &Dump) -> Vec<u8> {
    let mut out = Vec::with_capacity(44 + d.rows.len() * (16 + 8 * d.points as usize));
    out.extend_from_slice(DUMP_MAGIC);
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    out.extend_from_slice(&(d.kind as u32).to_le_bytes());
    out.extend_from_slice(&d.flags.to_le_bytes());
    out.extend_from_slice(&d.nodes.to_le_bytes());
    out.extend_from_slice(&d.points.to_le_bytes());
    out.extend_from_slice(&(d.rows.len() as u64).to_le_bytes());
    for (node, tau, values) in &d.rows {
        out.extend_from_slice(&node.to_le_bytes());
        out.extend_from_slice(&tau.to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_dump(bytes: &[u8]) -> Result<Dump, String> {
    let mut r = bytes;
    let mut take = |n: usize| -> Result<&[u8], String> {
        if r.len() < n {
            return Err("truncated".into());
        }
        let (head, tail) = r.split_at(n);
        r = tail;
        Ok(head)
    };
    if take(8)? != DUMP_MAGIC {
        return Err("bad magic".into());
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let u64_of = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    let version = u32_of(take(4)?);
    if version != DUMP_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let kind = DumpKind::from_u32(u32_of(take(4)?)).ok_or("unknown kind")?;
    let flags = u32_of(take(4)?);
    let nodes = u64_of(take(8)?);
    let points = u64_of(take(8)?);
    let count = u64_of(take(8)?);
    let mut rows = Vec::new();
    for _ in 0..count {
        let node = u64_of(take(8)?);
        let tau = u64_of(take(8)?);
        let raw = take(8 * points as usize)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        rows.push((node, tau, values));
    }
    if !r.is_empty() {
        return Err("trailing bytes".into());
    }
    Ok(Dump { kind, flags, nodes, points, rows })
}

pub fn strategy_dump(u: &StrategyField, tree: &PathTree) -> Dump {
    let rows = tree
        .nodes()
        .iter()
        .filter(|n| !u.get(n.id).is_empty())
        .map(|n| (n.id.0 as u64, n.time_index as u64, u.get(n.id).to_vec()))
        .collect();
    let points = u.values().iter().map(|v| v.len()).max().unwrap_or(0) as u64;
    let (lo, hi) = u.bounds();
    let mut d = Dump { kind: DumpKind::Strategy, flags: 0, nodes: tree.len() as u64, points, rows };
    let mut bounds = vec![0.0; points as usize];
    if points >= 2 {
        bounds[0] = lo;
        bounds[1] = hi;
    }
    d.rows.push((u64::MAX, u64::MAX, bounds));
    d
}

pub fn strategy_from_dump(d: &Dump) -> Result<StrategyField, String> {
    if d.kind != DumpKind::Strategy {
        return Err("not a strategy dump".into());
    }
    let mut values = vec![Vec::new(); d.nodes as usize];
    let mut bounds = None;
    for (node, _, v) in &d.rows {
        if *node == u64::MAX {
            if v.len() < 2 {
                return Err("bounds row too short".into());
            }
            bounds = Some((v[0], v[1]));
        } else {
            *values.get_mut(*node as usize).ok_or("node out of range")? = v.clone();
        }
    }
    let (lo, hi) = bounds.ok_or("missing action bounds")?;
    Ok(StrategyField::from_values(values, lo, hi))
}

pub fn theta_dump(theta: &ValueTensor) -> Dump {
    let mut rows = Vec::new();
    let mut points = 0;
    for node in 0..theta.len() {
        for (tau, v) in theta.retained(NodeId(node)) {
            points = v.len();
            rows.push((node as u64, tau as u64, v.to_vec()));
        }
    }
    let flags = u32::from(theta.is_collapsed()) | (u32::from(theta.retention() == Retention::Full) << 1);
    Dump { kind: DumpKind::Theta, flags, nodes: theta.len() as u64, points: points as u64, rows }
}

/// Rebuilds a value tensor; `levels` are the node levels of the tree.
pub fn theta_from_dump(d: &Dump, levels: Vec<usize>) -> Result<ValueTensor, String> {
    if d.kind != DumpKind::Theta || levels.len() as u64 != d.nodes {
        return Err("not a theta dump for this tree".into());
    }
    let collapsed = d.flags & 1 == 1;
    let retention = if d.flags & 2 == 2 { Retention::Full } else { Retention::Diagonal };
    let mut slices: Vec<Vec<Vec<f64>>> = vec![Vec::new(); d.nodes as usize];
    for (node, _, v) in &d.rows {
        slices.get_mut(*node as usize).ok_or("node out of range")?.push(v.clone());
    }
    if collapsed && retention == Retention::Full {
        // stored once per tau index; keep one
        for s in &mut slices {
            s.truncate(1);
        }
    }
    Ok(ValueTensor::from_parts(collapsed, retention, slices, levels))
}

pub fn zeta_dump(zeta: &DensityField, tree: &PathTree) -> Dump {
    let rows = tree.nodes().iter().map(|n| (n.id.0 as u64, n.time_index as u64, zeta.density(n.id).to_vec())).collect();
    Dump { kind: DumpKind::Zeta, flags: 0, nodes: tree.len() as u64, points: zeta.grid().len() as u64, rows }
}

pub fn zeta_from_dump(d: &Dump, s: &Scenario) -> Result<DensityField, String> {
    if d.kind != DumpKind::Zeta {
        return Err("not a zeta dump".into());
    }
    let mut dens = vec![Vec::new(); d.nodes as usize];
    for (node, _, v) in &d.rows {
        *dens.get_mut(*node as usize).ok_or("node out of range")? = v.clone();
    }
    DensityField::from_densities(s.space.clone(), dens).map_err(|e| e.to_string())
}

fn signatures(tree: &PathTree) -> Vec<String> {
    tree.nodes().iter().map(|n| tree.signature(n.id)).collect()
}

/// `tau_index,time_index,node_id,path_signature,x,value`
pub fn theta_csv(theta: &ValueTensor, tree: &PathTree, s: &Scenario) -> String {
    let sig = signatures(tree);
    let mut out = String::from("tau_index,time_index,node_id,path_signature,x,value\n");
    for n in tree.nodes() {
        for (tau, v) in theta.retained(n.id) {
            for (i, val) in v.iter().enumerate() {
                let _ = writeln!(out, "{tau},{},{},{},{},{val}", n.time_index, n.id.0, sig[n.id.0], s.space.x(i));
            }
        }
    }
    out
}

/// `time_index,node_id,path_signature,x,value`
pub fn strategy_csv(u: &StrategyField, tree: &PathTree, s: &Scenario) -> String {
    let sig = signatures(tree);
    let mut out = String::from("time_index,node_id,path_signature,x,value\n");
    for n in tree.nodes() {
        for (i, val) in u.get(n.id).iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{val}", n.time_index, n.id.0, sig[n.id.0], s.space.x(i));
        }
    }
    out
}

/// `time_index,node_id,path_signature,grid_index,x,mass`
pub fn zeta_csv(zeta: &DensityField, tree: &PathTree, s: &Scenario) -> String {
    let sig = signatures(tree);
    let mut out = String::from("time_index,node_id,path_signature,grid_index,x,mass\n");
    for n in tree.nodes() {
        for (i, m) in zeta.density(n.id).iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{i},{},{m}", n.time_index, n.id.0, sig[n.id.0], s.space.x(i));
        }
    }
    out
}

/// `iteration,distance`
pub fn convergence_csv(history: &[f64]) -> String {
    let mut out = String::from("iteration,distance\n");
    for (i, d) in history.iter().enumerate() {
        let _ = writeln!(out, "{},{d}", i + 1);
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct SolveFlags {
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub damping: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct Diagnostics<'a> {
    scenario: &'a str,
    outcome: Outcome,
    converged: bool,
    iterations: usize,
    empirical_contraction: f64,
    contraction: crate::equilibrium::ContractionReport,
    tree: &'a crate::path_space::TreeStats,
    hjb: &'a crate::hjb::HjbDiagnostics,
    settings: &'a IterationSettings,
    warnings: &'a [String],
}

pub fn load_scenario(path: &Path) -> Result<(String, Scenario), CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let s = parse_scenario(&text).map_err(|source| CliError::Scenario { path: path.to_path_buf(), source })?;
    Ok((text, s))
}

/// Summary returned by [`cmd_solve`].
#[derive(Debug)]
pub struct SolveOutcome {
    pub status: ExitStatus,
    pub result: EquilibriumResult,
    pub manifest: RunManifest,
}

pub fn cmd_solve(scenario_path: &Path, out_dir: &Path, flags: &SolveFlags, command: &[String]) -> Result<SolveOutcome, CliError> {
    let (text, mut s) = load_scenario(scenario_path)?;
    if let Some(seed) = flags.seed {
        s.solver.seed = seed;
    }
    let mut settings = IterationSettings::for_scenario(&s);
    if let Some(t) = flags.tol {
        settings.tol = t;
    }
    if let Some(m) = flags.max_iter {
        settings.max_iter = m;
    }
    if let Some(d) = flags.damping {
        settings.damping = d;
    }
    if !(settings.tol > 0.0) || settings.max_iter == 0 || !(0.0..1.0).contains(&settings.damping) {
        return Err(CliError::Usage("need --tol > 0, --max-iter >= 1 and --damping in [0, 1)".into()));
    }
    let tree = s.tree().map_err(|e| CliError::Usage(e.to_string()))?;
    let result = fp_iteration(&s, &tree, None, &settings)?;

    let mut w = RunWriter::create(out_dir)?;
    w.write("scenario.scn", text.as_bytes())?;
    w.write("strategy.bin", &encode_dump(&strategy_dump(&result.strategy, &tree)))?;
    w.write("theta.bin", &encode_dump(&theta_dump(&result.theta)))?;
    w.write("zeta.bin", &encode_dump(&zeta_dump(&result.zeta, &tree)))?;
    w.write("convergence.csv", convergence_csv(&result.distance_history).as_bytes())?;
    let diag = Diagnostics {
        scenario: &s.name,
        outcome: result.outcome,
        converged: result.converged,
        iterations: result.iterations,
        empirical_contraction: result.empirical_contraction,
        contraction: contraction_report(&result),
        tree: &result.tree_stats,
        hjb: &result.hjb,
        settings: &settings,
        warnings: &s.warnings,
    };
    w.write("diagnostics.json", serde_json::to_string_pretty(&diag).expect("serializes").as_bytes())?;
    let t = now_unix();
    let manifest = w.finish(RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        command: command.to_vec(),
        scenario_sha256: sha256_hex(text.as_bytes()),
        seed: s.solver.seed,
        created_unix: t,
        updated_unix: t,
        files: Vec::new(),
    })?;
    let status = if result.converged { ExitStatus::Ok } else { ExitStatus::Divergence };
    Ok(SolveOutcome { status, result, manifest })
}

/// A solved run loaded back from disk.
pub struct LoadedRun {
    pub scenario: Scenario,
    pub tree: PathTree,
    pub strategy: StrategyField,
    pub zeta: DensityField,
    pub manifest: RunManifest,
    pub convergence: String,
}

fn read_dump(path: &Path) -> Result<Dump, CliError> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    decode_dump(&bytes).map_err(|message| CliError::Dump { path: path.to_path_buf(), message })
}

pub fn load_run(dir: &Path) -> Result<LoadedRun, CliError> {
    let manifest = RunManifest::load(dir)?;
    let (_, scenario) = load_scenario(&dir.join("scenario.scn"))?;
    let tree = scenario.tree().map_err(|e| CliError::Usage(e.to_string()))?;
    let sp = dir.join("strategy.bin");
    let strategy = strategy_from_dump(&read_dump(&sp)?).map_err(|message| CliError::Dump { path: sp, message })?;
    let zp = dir.join("zeta.bin");
    let zeta = zeta_from_dump(&read_dump(&zp)?, &scenario).map_err(|message| CliError::Dump { path: zp, message })?;
    let cp = dir.join("convergence.csv");
    let convergence = fs::read_to_string(&cp).map_err(io_err(&cp))?;
    if strategy.len() != tree.len() || zeta.len() != tree.len() {
        return Err(CliError::Usage("run artifacts do not match the scenario's tree".into()));
    }
    Ok(LoadedRun { scenario, tree, strategy, zeta, manifest, convergence })
}

pub fn load_theta(dir: &Path, tree: &PathTree) -> Result<ValueTensor, CliError> {
    let tp = dir.join("theta.bin");
    let levels = tree.nodes().iter().map(|n| n.time_index).collect();
    theta_from_dump(&read_dump(&tp)?, levels).map_err(|message| CliError::Dump { path: tp, message })
}

#[derive(Debug, Clone)]
pub struct ValidateFlags {
    /// Agents per chain draw; `None` skips the simulation.
    pub nplayer: Option<usize>,
    pub chains: usize,
    pub local_opt: usize,
    pub strategy_override: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Default for ValidateFlags {
    fn default() -> Self {
        Self { nplayer: None, chains: 20, local_opt: 5, strategy_override: None, seed: None }
    }
}

#[derive(Debug, Serialize)]
pub struct ValidationReport {
    pub strategy_source: String,
    pub local_optimality: Vec<LocalOptReport>,
    pub local_optimality_pass: bool,
    pub nplayer: Option<SimReport>,
    pub nplayer_pass: Option<bool>,
    pub pass: bool,
}

pub fn cmd_validate(run_dir: &Path, flags: &ValidateFlags) -> Result<(ExitStatus, ValidationReport), CliError> {
    if flags.nplayer == Some(0) || flags.nplayer == Some(1) {
        return Err(CliError::Usage("--nplayer needs at least 2 agents".into()));
    }
    if flags.chains == 0 {
        return Err(CliError::Usage("--chains must be positive".into()));
    }
    let run = load_run(run_dir)?;
    let s = &run.scenario;
    let seed = flags.seed.unwrap_or(run.manifest.seed);
    let (strategy, source) = match &flags.strategy_override {
        Some(p) => {
            let u = strategy_from_dump(&read_dump(p)?).map_err(|message| CliError::Dump { path: p.clone(), message })?;
            if u.len() != run.tree.len() {
                return Err(CliError::Usage("override strategy does not match the tree".into()));
            }
            (u, p.display().to_string())
        }
        None => (run.strategy.clone(), "run".to_string()),
    };
    let probes = random_probes(s, &run.tree, flags.local_opt, 3, 0.25 * (s.space.x_max() - s.space.x_min()), seed);
    let mut reports = Vec::new();
    for p in probes {
        for d in [Deviation::Constant(s.u_min), Deviation::Constant(0.5 * (s.u_min + s.u_max)), Deviation::Constant(s.u_max), Deviation::BestResponse] {
            let r = local_optimality_test(s, &run.tree, &run.zeta, &strategy, p, d, &[1, 2, 3], LOCAL_TOL)
                .map_err(|e| CliError::Harness(e.to_string()))?;
            reports.push(r);
        }
    }
    let local_pass = reports.iter().all(|r| r.pass);
    let sim = match flags.nplayer {
        Some(n) => Some(
            nplayer_simulate(s, &run.tree, &strategy, &run.zeta, n, flags.chains, seed)
                .map_err(|e| CliError::Harness(e.to_string()))?,
        ),
        None => None,
    };
    let nplayer_pass = sim.as_ref().map(|r| r.median_terminal_w2 <= NPLAYER_W2_TOL);
    let report = ValidationReport {
        strategy_source: source,
        local_optimality_pass: local_pass,
        pass: local_pass && nplayer_pass.unwrap_or(true),
        local_optimality: reports,
        nplayer: sim,
        nplayer_pass,
    };
    let mut csv = String::from("node_id,level,x,deviation,action,rate_1,rate_2,rate_3,extrapolated,pass\n");
    for r in &report.local_optimality {
        let _ = writeln!(
            csv,
            "{},{},{},{:?},{},{},{},{},{},{}",
            r.probe.node.0,
            r.level,
            r.x,
            r.deviation,
            r.action.map_or(String::new(), |a| a.to_string()),
            r.rates[0],
            r.rates[1],
            r.rates[2],
            r.extrapolated,
            r.pass
        );
    }
    let mut w = RunWriter::reopen(run_dir, &run.manifest);
    w.write("validation.json", serde_json::to_string_pretty(&report).expect("serializes").as_bytes())?;
    w.write("local_opt.csv", csv.as_bytes())?;
    if let Some(sim) = &report.nplayer {
        let mut c = String::from("draw,signature,time_index,w2\n");
        for rec in &sim.records {
            for (k, w2) in rec.w2.iter().enumerate() {
                let _ = writeln!(c, "{},{},{k},{w2}", rec.draw, rec.signature);
            }
        }
        w.write("nplayer.csv", c.as_bytes())?;
    }
    let mut manifest = run.manifest.clone();
    manifest.updated_unix = now_unix();
    w.finish(manifest)?;
    let status = if report.pass { ExitStatus::Ok } else { ExitStatus::ValidationFailure };
    Ok((status, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Artifact {
    Theta,
    Strategy,
    Zeta,
    Convergence,
}

impl std::str::FromStr for Artifact {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "theta" => Ok(Self::Theta),
            "strategy" => Ok(Self::Strategy),
            "zeta" => Ok(Self::Zeta),
            "convergence" => Ok(Self::Convergence),
            other => Err(CliError::Usage(format!("unknown artifact `{other}` (theta, strategy, zeta, convergence)"))),
        }
    }
}

/// Writes the requested artifact to `out`.
pub fn cmd_export(run_dir: &Path, format: ExportFormat, what: Artifact, out: &mut dyn Write) -> Result<(), CliError> {
    let run = load_run(run_dir)?;
    let s = &run.scenario;
    let bytes: Vec<u8> = match (what, format) {
        (Artifact::Convergence, ExportFormat::Csv) => run.convergence.into_bytes(),
        (Artifact::Convergence, ExportFormat::Binary) => {
            return Err(CliError::Usage("convergence is only available as csv".into()));
        }
        (Artifact::Strategy, ExportFormat::Csv) => strategy_csv(&run.strategy, &run.tree, s).into_bytes(),
        (Artifact::Strategy, ExportFormat::Binary) => encode_dump(&strategy_dump(&run.strategy, &run.tree)),
        (Artifact::Zeta, ExportFormat::Csv) => zeta_csv(&run.zeta, &run.tree, s).into_bytes(),
        (Artifact::Zeta, ExportFormat::Binary) => encode_dump(&zeta_dump(&run.zeta, &run.tree)),
        (Artifact::Theta, fmt) => {
            let theta = load_theta(run_dir, &run.tree)?;
            match fmt {
                ExportFormat::Csv => theta_csv(&theta, &run.tree, s).into_bytes(),
                ExportFormat::Binary => encode_dump(&theta_dump(&theta)),
            }
        }
    };
    out.write_all(&bytes).map_err(io_err(Path::new("<output>")))
}
