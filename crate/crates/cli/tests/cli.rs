use std::path::Path;
use std::process::{Command, Output};

use odap_core::{builtin_scenario, load_scenario};

fn odap(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odap"))
        .args(args)
        .current_dir(dir)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn makespan(o: &Output) -> f64 {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("makespan_s"))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or_else(|| panic!("no makespan in {}", stdout(o)))
}

#[test]
fn simulate_reference_patterns() {
    let dir = tempfile::tempdir().unwrap();
    let oda = odap(
        &[
            "simulate",
            "--scenario",
            "case_study_fig2",
            "--pattern",
            "ODA",
            "--throughput",
            "100M",
            "--seed",
            "1",
        ],
        dir.path(),
    );
    assert!(oda.status.success(), "{}", stderr(&oda));
    let m = makespan(&oda);
    assert!((m - 147.0).abs() / 147.0 < 0.05, "{m}");
    assert!(stdout(&oda).contains("2'27''"));

    let f7 = odap(
        &[
            "simulate",
            "--pattern",
            "F7",
            "--throughput",
            "1M",
            "--seed",
            "1",
        ],
        dir.path(),
    );
    assert!(f7.status.success());
    assert!((makespan(&f7) - m).abs() < 1.0);
}

#[test]
fn simulate_writes_result_trace_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = odap(
        &[
            "simulate",
            "--pattern",
            "00000011",
            "--throughput",
            "54M",
            "--out",
            "run.json",
            "--trace",
            "trace.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("time_s,event_kind,entity_id,resource_id\n"));
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap())
            .unwrap();
    assert_eq!(run["pattern_id"], 192);
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run.json.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["started_unix_s"], 1_700_000_000);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_pattern = odap(&["simulate", "--pattern", "F1,F99"], dir.path());
    assert_eq!(bad_pattern.status.code(), Some(2));
    assert!(stderr(&bad_pattern).contains("parse"));

    let missing_flag = odap(&["simulate"], dir.path());
    assert_eq!(missing_flag.status.code(), Some(2));

    let bad_throughput = odap(
        &["simulate", "--pattern", "ODA", "--throughput", "fast"],
        dir.path(),
    );
    assert_eq!(bad_throughput.status.code(), Some(2));

    let missing_file = odap(
        &["simulate", "--scenario", "nope.toml", "--pattern", "ODA"],
        dir.path(),
    );
    assert_eq!(missing_file.status.code(), Some(1));

    let invalid = builtin_scenario("case_study_fig2")
        .unwrap()
        .replace("target_count = 85", "target_count = 96");
    std::fs::write(dir.path().join("bad.toml"), invalid).unwrap();
    let o = odap(
        &["simulate", "--scenario", "bad.toml", "--pattern", "ODA"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn sweep_analyze_plot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sweep = [
        "sweep",
        "--scenario",
        "case_study_fig2_odap",
        "--throughputs",
        "1M",
        "--replicates",
        "1",
        "--out",
        "s.csv",
        "--jobs",
        "2",
    ];
    let o = odap(&sweep, d);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 256);
    assert!(csv.starts_with("pattern_id,pattern_bits,throughput_bps,replicate,seed,makespan_s\n"));

    let refused = odap(&sweep, d);
    assert_ne!(refused.status.code(), Some(0));
    assert!(stderr(&refused).contains("--force"));

    let mut forced = sweep.to_vec();
    forced.push("--force");
    assert!(odap(&forced, d).status.success());
    assert_eq!(std::fs::read_to_string(d.join("s.csv")).unwrap(), csv);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("s.csv.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["outputs"][0], "s.csv");
    assert_eq!(manifest["scenario"]["sha256"].as_str().unwrap().len(), 64);

    let a = odap(
        &[
            "analyze",
            "--input",
            "s.csv",
            "--scenario",
            "case_study_fig2_odap",
            "--out",
            "a.csv",
        ],
        d,
    );
    assert!(a.status.success(), "{}", stderr(&a));
    let out = stdout(&a);
    assert!(out.contains("full ODAP") && out.contains("17'2"), "{out}");
    let table = std::fs::read_to_string(d.join("a.csv")).unwrap();
    assert!(table.starts_with("term,coefficient_s,std_err,t,p,significant\nintercept,"));
    assert_eq!(table.lines().count(), 1 + 93);

    let mismatch = odap(
        &[
            "analyze",
            "--input",
            "s.csv",
            "--scenario",
            "case_study_fig2",
        ],
        d,
    );
    assert_eq!(mismatch.status.code(), Some(3));
    assert!(stderr(&mismatch).contains("--unsafe"));
    assert!(odap(
        &[
            "analyze",
            "--input",
            "s.csv",
            "--scenario",
            "case_study_fig2",
            "--unsafe"
        ],
        d
    )
    .status
    .success());

    let p = odap(
        &[
            "plot-data",
            "--input",
            "s.csv",
            "--throughput",
            "1M",
            "--out",
            "curve.dat",
        ],
        d,
    );
    assert!(p.status.success(), "{}", stderr(&p));
    let curve = std::fs::read_to_string(d.join("curve.dat")).unwrap();
    assert_eq!(curve.lines().filter(|l| !l.starts_with('#')).count(), 256);
    let oda = std::fs::read_to_string(d.join("curve.oda.dat")).unwrap();
    let ys: Vec<&str> = oda
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(' ').nth(1).unwrap())
        .collect();
    assert_eq!(ys.len(), 2);
    assert_eq!(ys[0], ys[1]);
}

#[test]
fn empty_sweep_csv_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.csv"), "").unwrap();
    let o = odap(&["plot-data", "--input", "empty.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = odap(&["analyze", "--input", "empty.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn calibrate_identity_and_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("none.toml"), "").unwrap();
    let o = odap(
        &["calibrate", "--targets", "none.toml", "--out", "same.toml"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let written = load_scenario(&std::fs::read_to_string(d.join("same.toml")).unwrap()).unwrap();
    assert_eq!(
        written,
        load_scenario(builtin_scenario("case_study_fig2").unwrap()).unwrap()
    );

    // the far machine answering faster than the near one needs negative latency
    std::fs::write(
        d.join("bad.toml"),
        r#"
[[rtt]]
machine = "M1"
db = "DB1"
fragment = "F1"
op = "read"
mean_s = 0.010
[[rtt]]
machine = "M3"
db = "DB1"
fragment = "F1"
op = "read"
mean_s = 0.001
"#,
    )
    .unwrap();
    let o = odap(
        &["calibrate", "--targets", "bad.toml", "--out", "x.toml"],
        d,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rel_err"), "{}", stderr(&o));
    assert!(!d.join("x.toml").exists());
}

#[test]
fn calibrate_reference_targets() {
    let dir = tempfile::tempdir().unwrap();
    let targets = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios/targets.toml");
    let o = odap(
        &[
            "calibrate",
            "--targets",
            targets.to_str().unwrap(),
            "--out",
            "cal.toml",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report = stdout(&o);
    assert!(report.contains("M3/DB1/F1/W"));
    let cal =
        load_scenario(&std::fs::read_to_string(dir.path().join("cal.toml")).unwrap()).unwrap();
    let bundled = load_scenario(builtin_scenario("case_study_fig2").unwrap()).unwrap();
    let m3 = |s: &odap_core::Scenario| s.machine("M3").unwrap().oper_time_s;
    assert!((m3(&cal) - m3(&bundled)).abs() < 1e-6);
    assert!((cal.topology.write_fixed_s - bundled.topology.write_fixed_s).abs() < 1e-9);
}
