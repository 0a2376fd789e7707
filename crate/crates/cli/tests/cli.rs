use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn pdecalib(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdecalib"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("PDECALIB_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn only_run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const SMALL_FIG1: [&str; 10] = [
    "--preset",
    "paper-fig1",
    "--set",
    "grid.n=40",
    "--set",
    "snapshots.dt=0.01",
    "--set",
    "optimizer.max_iters=100",
    "--set",
    "network.widths=[8, 8]",
];

#[test]
fn calibrate_writes_curve_trace_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["calibrate", "--problem", "diffusion"];
    args.extend(SMALL_FIG1);
    let o = pdecalib(tmp.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with("calibrate-paper-fig1-"), "{line}");
    assert!(line.contains("final_loss=") && line.contains("linf="), "{line}");

    let dir = only_run_dir(tmp.path());
    let curve = fs::read_to_string(dir.join("curve.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next(), Some("x,f_exact,f_theta"));
    assert_eq!(lines.count(), 41);
    let trace = fs::read_to_string(dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,loss,grad_norm\n"));

    let m = manifest(&dir);
    assert_eq!(m["command"], "calibrate");
    assert_eq!(m["preset"], "paper-fig1");
    assert_eq!(m["config"]["grid"]["n"], 40);
    assert_eq!(m["config"]["snapshots"]["dt"], 0.01);
    assert_eq!(m["config"]["network"]["widths"], serde_json::json!([8, 8]));
    assert!(m["summary"]["linf_interior"].as_f64().unwrap() < 0.5);
    let artifacts: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(artifacts, ["curve.csv", "trace.csv", "network.json"]);
}

#[test]
fn identical_config_gives_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut args = vec!["calibrate"];
    args.extend(SMALL_FIG1);
    args.extend(["--set", "noise.std=1e-6", "--seed", "4"]);
    assert!(pdecalib(a.path(), &args).status.success());
    assert!(pdecalib(b.path(), &args).status.success());
    let (da, db) = (only_run_dir(a.path()), only_run_dir(b.path()));
    assert_eq!(da.file_name(), db.file_name());
    for f in ["curve.csv", "trace.csv", "network.json", "manifest.json"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn different_seed_changes_run_id() {
    let tmp = tempfile::tempdir().unwrap();
    for seed in ["1", "2"] {
        let mut args = vec!["calibrate", "--seed", seed];
        args.extend(SMALL_FIG1);
        args.extend(["--set", "optimizer.max_iters=5"]);
        assert!(pdecalib(tmp.path(), &args).status.success());
    }
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 2);
}

#[test]
fn missing_required_key_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "problem = \"diffusion\"\n[snapshots]\ntimes = [0.1]\ndt = 0.01\n").unwrap();
    let o = pdecalib(tmp.path(), &["calibrate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("grid.n"), "{}", stderr(&o));
}

#[test]
fn unknown_preset_and_unknown_key_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pdecalib(tmp.path(), &["calibrate", "--preset", "paper-fig9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("paper-fig9"));
    let o = pdecalib(tmp.path(), &["calibrate", "--preset", "paper-fig1", "--set", "grid.spacing=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("spacing"));
    let o = pdecalib(tmp.path(), &["calibrate", "--preset", "paper-fig1", "--set", "snapshots.dt=-0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("snapshots.dt"));
}

#[test]
fn numerical_failure_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pdecalib(
        tmp.path(),
        &["simulate", "--preset", "paper-wave-c1", "--set", "simulate.dt=0.05", "--set", "simulate.t_end=0.5"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("forward simulation"), "{}", stderr(&o));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn file_is_overridden_by_set_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 9\n[grid]\nn = 30\n[optimizer]\nmax_iters = 3\n").unwrap();
    let out = tmp.path().join("out");
    let o = pdecalib(
        &out,
        &[
            "calibrate",
            "--preset",
            "paper-fig1",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "grid.n=20",
            "--set",
            "seed=1",
            "--seed",
            "2",
            "--set",
            "snapshots.dt=0.01",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&only_run_dir(&out));
    assert_eq!(m["config"]["grid"]["n"], 20);
    assert_eq!(m["config"]["seed"], 2);
    assert_eq!(m["config"]["optimizer"]["max_iters"], 3);
    assert_eq!(m["config"]["snapshots"]["times"], serde_json::json!([0.1]));
}

#[test]
fn sweep_row_count_follows_preset_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pdecalib(
        tmp.path(),
        &["sweep", "--preset", "paper-fig2-dt", "--seeds", "3", "--set", "optimizer.max_iters=1", "--jobs", "2"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_run_dir(tmp.path());
    let csv = fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("dt,h,n,seed,linf,l2,stop_reason,iters,final_loss"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 * 5 * 7);
    let first: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(first[0].parse::<f64>().unwrap(), 0.1);
    assert_eq!(first[2], "10");
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 35);
    assert_eq!(manifest(&dir)["summary"]["rows"], 105);
}

#[test]
fn sensitivity_writes_nested_regions() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pdecalib(
        tmp.path(),
        &[
            "sensitivity",
            "--preset",
            "paper-sens-diffusion",
            "--set",
            "grid.n=40",
            "--set",
            "snapshots.dt=0.01",
            "--set",
            "optimizer.max_iters=50",
            "--set",
            "sensitivity.n_alpha=5",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_run_dir(tmp.path());
    let parse = |k: usize| -> Vec<Vec<f64>> {
        fs::read_to_string(dir.join(format!("region_{k}.csv")))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect()
    };
    let (small, large) = (parse(0), parse(2));
    for (a, b) in small.iter().zip(&large) {
        assert!(b[2] <= a[2] && a[3] <= b[3]);
        assert!(a[2] <= a[1] && a[1] <= a[3]);
    }
    let meta: Value = serde_json::from_str(&fs::read_to_string(dir.join("region_2.json")).unwrap()).unwrap();
    assert_eq!(meta["delta"], 0.003);
    assert_eq!(meta["n_alpha"], 5);
    assert_eq!(meta["anchor"], "value_at_point(0)");
    assert!(meta["grad_norm"].as_f64().unwrap() > 0.0);
}

#[test]
fn baseline_reports_both_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pdecalib(
        tmp.path(),
        &["baseline", "--preset", "paper-wave-c1", "--set", "grid.n=100", "--set", "optimizer.max_iters=30"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_run_dir(tmp.path());
    let curve = fs::read_to_string(dir.join("curve.csv")).unwrap();
    assert!(curve.starts_with("x,f_exact,f_theta,f_baseline\n"));
    let m = manifest(&dir);
    assert!(m["summary"]["tv_network"].as_f64().is_some());
    assert!(m["summary"]["tv_baseline"].as_f64().is_some());
}

#[test]
fn simulate_and_verify_bounds() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pdecalib(
        tmp.path(),
        &["simulate", "--preset", "paper-fig1", "--set", "grid.n=50", "--set", "simulate.t_end=0.1", "--set", "simulate.every=10"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_run_dir(tmp.path());
    let traj = fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("t,x,u\n"));
    assert_eq!(traj.lines().count(), 1 + 11 * 51);
    assert_eq!(&fs::read(dir.join("checkpoint.bin")).unwrap()[..4], b"PDCK");

    let tmp = tempfile::tempdir().unwrap();
    let o = pdecalib(
        tmp.path(),
        &["verify-bounds", "--preset", "paper-fig1", "--set", "grid.n=40", "--set", "snapshots.dt=0.01", "--set", "optimizer.max_iters=200"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_run_dir(tmp.path());
    let csv = fs::read_to_string(dir.join("bounds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(stdout(&o).contains("applicable=1"), "{}", stdout(&o));

    let o = pdecalib(tmp.path(), &["verify-bounds", "--preset", "paper-burgers"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["calibrate"];
    args.extend(SMALL_FIG1);
    args.extend(["--set", "optimizer.max_iters=2"]);
    let o = Command::new(env!("CARGO_BIN_EXE_pdecalib"))
        .args(&args)
        .env("PDECALIB_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
}

#[test]
fn presets_are_listed_and_printable() {
    let o = pdecalib_plain(&["presets"]);
    let names: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(
        names,
        [
            "paper-fig1",
            "paper-fig2-dt",
            "paper-fig2-h",
            "paper-wave-c1",
            "paper-wave-c2",
            "paper-burgers",
            "paper-sens-diffusion"
        ]
    );
    let o = pdecalib_plain(&["presets", "paper-burgers"]);
    assert!(stdout(&o).contains("widths = [40, 40, 40, 40]"));
    assert_eq!(pdecalib_plain(&["presets", "nope"]).status.code(), Some(2));
}

fn pdecalib_plain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdecalib")).args(args).output().unwrap()
}
