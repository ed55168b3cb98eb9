use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flash_core::executor::synthetic::benchmark_family_spec;
use flash_core::graph::PipelineSpec;
use flash_core::orchestrator::trace::read_trace_file;

const SPECS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../specs");

fn flash(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flash")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn trace_rows(path: &Path) -> usize {
    read_trace_file(path).unwrap().len()
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.csv");
    let series = dir.path().join("s.csv");
    let spec = format!("{SPECS}/toy.json");
    let o = flash(&["run", "--spec", &spec, "--t-init", "6", "--t-prune", "6", "--t-total", "40", "--top-r", "2", "--seed", "3",
        "--trace-out", trace.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("best metric:"), "{out}");
    assert!(out.contains("best path:"), "{out}");
    let n = trace_rows(&trace);
    assert!(n > 12);

    let o = flash(&["report", "--trace", trace.to_str().unwrap(), "--csv", series.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with(&format!("runs: {n} (phase 1: 6, phase 2: 6, phase 3: ")), "{out}");
    assert!(out.contains("cache hit rate:"));
    let csv = fs::read_to_string(&series).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("wall_clock_s,best_so_far"));
    let best: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(best.len(), n);
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn random_strategy_runs() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.csv");
    let spec = format!("{SPECS}/toy.json");
    let o = flash(&["run", "--spec", &spec, "--strategy", "random", "--t-total", "10", "--trace-out", trace.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = flash(&["report", "--trace", trace.to_str().unwrap()]);
    assert!(stdout(&o).contains("(phase 0: "), "{}", stdout(&o));
}

#[test]
fn spec_template_is_a_valid_spec() {
    let o = flash(&["spec-template"]);
    assert!(o.status.success());
    let printed = PipelineSpec::from_json_str(&stdout(&o)).unwrap();
    assert_eq!(printed, benchmark_family_spec());
    let checked_in = fs::read_to_string(format!("{SPECS}/family.json")).unwrap();
    assert_eq!(PipelineSpec::from_json_str(&checked_in).unwrap(), printed);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"t_init": 4, "t_prune": "1000s", "t_total": 500, "top_r": 2}"#).unwrap();
    let spec = format!("{SPECS}/toy.json");
    let trace = dir.path().join("t.csv");
    let o = flash(&["run", "--spec", &spec, "--config", cfg.to_str().unwrap(), "--t-total", "15",
        "--trace-out", trace.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_trace_file(&trace).unwrap();
    // t_init from the file, t_total from the flag.
    assert_eq!(rows.iter().filter(|r| r.phase == 1).count(), 4);
    let last = rows.last().unwrap();
    let started = last.wall_clock_s - last.cost_s;
    assert!(started < 15.0 + 0.01 + 1e-9);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.csv");
    let spec = format!("{SPECS}/toy.json");
    let t = trace.to_str().unwrap();

    let o = flash(&["run", "--spec", &spec, "--executor", "magic", "--trace-out", t]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown executor"), "{}", stderr(&o));

    let o = flash(&["run", "--spec", &spec, "--top-r", "0", "--trace-out", t]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("top_r"));

    let o = flash(&["run", "--spec", &spec, "--t-init", "ten", "--trace-out", t]);
    assert!(!o.status.success());

    let broken = dir.path().join("broken.json");
    fs::write(&broken, r#"{"name":"x","steps":[]}"#).unwrap();
    let o = flash(&["run", "--spec", broken.to_str().unwrap(), "--trace-out", t]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("parsing spec"));

    fs::write(&trace, "not,a,trace\n1,2,3\n").unwrap();
    let o = flash(&["report", "--trace", t]);
    assert_eq!(o.status.code(), Some(1));
    let o = flash(&["report", "--trace", dir.path().join("missing.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
