use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use regime_mfg::cli_io::{
    decode_dump, encode_dump, load_run, strategy_dump, DumpKind, RunManifest, DUMP_MAGIC,
};
use regime_mfg::scenarios;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_regime-mfg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_scenario(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn solve_into(dir: &Path, text: &str, out: &str) -> (Output, PathBuf) {
    let scn = write_scenario(dir, &format!("{out}.scn"), text);
    let out_dir = dir.join(out);
    let o = run(&["solve", scn.to_str().unwrap(), "-o", out_dir.to_str().unwrap()]);
    (o, out_dir)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn solve_writes_a_complete_verified_run() {
    let tmp = TempDir::new().unwrap();
    let (o, dir) = solve_into(tmp.path(), scenarios::DECOUPLED, "run");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = RunManifest::load(&dir).unwrap();
    let mut names: Vec<&str> = manifest.files.iter().map(|f| f.path.as_str()).collect();
    names.sort();
    for expected in ["convergence.csv", "diagnostics.json", "scenario.scn", "strategy.bin", "theta.bin", "zeta.bin"] {
        assert!(names.contains(&expected), "{names:?}");
    }
    assert!(manifest.verify(&dir).unwrap());
    assert!(manifest.scenario_hash_matches(&dir).unwrap());
    assert!(!manifest.tool_version.is_empty());
    assert_eq!(manifest.command[1], "solve");

    fs::write(dir.join("theta.bin"), b"tampered").unwrap();
    assert!(!manifest.verify(&dir).unwrap());
}

#[test]
fn malformed_scenario_exits_with_input_error_and_line() {
    let tmp = TempDir::new().unwrap();
    let text = scenarios::DECOUPLED.replace("x_points = 81", "x_points 81");
    let (o, _) = solve_into(tmp.path(), &text, "bad");
    assert_eq!(o.status.code(), Some(1));
    let line = text.lines().position(|l| l == "x_points 81").unwrap() + 1;
    assert!(stderr(&o).contains(&format!("line {line}")), "{}", stderr(&o));

    let o = run(&["solve", tmp.path().join("missing.scn").to_str().unwrap(), "-o", "unused"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergent_scenario_exits_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let (o, dir) = solve_into(tmp.path(), scenarios::NON_CONTRACTIVE, "nc");
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    // diagnostics are still written for inspection
    assert!(dir.join("convergence.csv").exists());
}

#[test]
fn validate_passes_then_flags_a_perturbed_strategy() {
    let tmp = TempDir::new().unwrap();
    let (o, dir) = solve_into(tmp.path(), scenarios::REFERENCE_LQ, "ref");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let d = dir.to_str().unwrap();

    let o = run(&["validate", d, "--local-opt", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.join("validation.json").exists() && dir.join("local_opt.csv").exists());
    assert!(RunManifest::load(&dir).unwrap().verify(&dir).unwrap());

    let loaded = load_run(&dir).unwrap();
    let shifted = loaded.strategy.map(|v| v + 0.3);
    let path = tmp.path().join("shifted.bin");
    fs::write(&path, encode_dump(&strategy_dump(&shifted, &loaded.tree))).unwrap();
    let o = run(&["validate", d, "--local-opt", "3", "--strategy-override", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = run(&["validate", d, "--nplayer", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["validate", d, "--nplayer", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn binary_export_round_trips_bitwise() {
    let tmp = TempDir::new().unwrap();
    let (_, dir) = solve_into(tmp.path(), scenarios::DECOUPLED, "run");
    for (what, file, kind) in [
        ("strategy", "strategy.bin", DumpKind::Strategy),
        ("theta", "theta.bin", DumpKind::Theta),
        ("zeta", "zeta.bin", DumpKind::Zeta),
    ] {
        let o = run(&["export", dir.to_str().unwrap(), "--format", "binary", "--what", what]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert_eq!(o.stdout, fs::read(dir.join(file)).unwrap());
        assert_eq!(&o.stdout[..8], DUMP_MAGIC);
        let dump = decode_dump(&o.stdout).unwrap();
        assert_eq!(dump.kind, kind);
        assert_eq!(encode_dump(&dump), o.stdout);
    }
    let o = run(&["export", dir.to_str().unwrap(), "--format", "binary", "--what", "convergence"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn csv_exports_have_one_row_per_entry() {
    let tmp = TempDir::new().unwrap();
    let (_, dir) = solve_into(tmp.path(), scenarios::DECOUPLED, "run");
    let loaded = load_run(&dir).unwrap();
    let n_x = loaded.scenario.space.len();
    let out = tmp.path().join("zeta.csv");
    let o = run(&["export", dir.to_str().unwrap(), "--what", "zeta", "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("time_index,node_id,path_signature,grid_index,x,mass"));
    assert_eq!(lines.count(), loaded.tree.len() * n_x);

    let o = run(&["export", dir.to_str().unwrap(), "--what", "strategy"]);
    let text = String::from_utf8(o.stdout).unwrap();
    // terminal nodes carry no action
    let acting = loaded.tree.nodes().iter().filter(|n| n.time_index < loaded.tree.steps()).count();
    assert_eq!(text.lines().count(), 1 + acting * n_x);

    let o = run(&["export", dir.to_str().unwrap(), "--what", "convergence"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text, loaded.convergence);
    assert_eq!(text.lines().next(), Some("iteration,distance"));
}

#[test]
fn repeated_solves_give_identical_exports() {
    let tmp = TempDir::new().unwrap();
    let (_, a) = solve_into(tmp.path(), scenarios::HYPERBOLIC, "a");
    let (_, b) = solve_into(tmp.path(), scenarios::HYPERBOLIC, "b");
    for file in ["strategy.bin", "theta.bin", "zeta.bin", "convergence.csv", "scenario.scn"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    for what in ["theta", "strategy", "zeta", "convergence"] {
        let x = run(&["export", a.to_str().unwrap(), "--what", what]).stdout;
        let y = run(&["export", b.to_str().unwrap(), "--what", what]).stdout;
        assert!(!x.is_empty());
        assert_eq!(x, y, "{what}");
    }
}

#[test]
fn help_and_unknown_flags() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["solve", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
}
