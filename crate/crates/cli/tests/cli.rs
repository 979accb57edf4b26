use std::path::Path;
use std::process::{Command, Output};

fn shaping(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shaping")).args(args).arg("--out-dir").arg(out).output().expect("binary runs")
}

fn config(name: &str) -> String {
    format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

#[test]
fn solve_on_the_demo_reduces_travel_time() {
    let dir = tempfile::tempdir().unwrap();
    let out = shaping(&["--config", &config("demo.toml"), "--threads", "1", "solve"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = read_csv(&dir.path().join("result.csv"));
    assert_eq!(header, ["budget", "mode", "ttt_baseline", "ttt_final", "reduction_pct", "spend", "wall_time"]);
    let base: f64 = rows[0][column(&header, "ttt_baseline")].parse().unwrap();
    let fin: f64 = rows[0][column(&header, "ttt_final")].parse().unwrap();
    assert!(fin < base);
    let (trace_header, trace) = read_csv(&dir.path().join("trace.csv"));
    assert_eq!(trace_header[0], "k");
    assert!(!trace.is_empty());
    assert!(dir.path().join("discounts.csv").exists());
    let json = std::fs::read_to_string(dir.path().join("scenario.json")).unwrap();
    assert!(json.contains("\"agents\""));
}

#[test]
fn zero_budget_sweep_has_no_reduction() {
    let dir = tempfile::tempdir().unwrap();
    let out = shaping(&["sweep-budget", "--budgets", "0"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = read_csv(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 1);
    let red: f64 = rows[0][column(&header, "reduction_pct")].parse().unwrap();
    assert!(red.abs() < 1e-9);
}

#[test]
fn personalized_is_not_worse_than_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let out = shaping(&["compare-uniform"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = read_csv(&dir.path().join("compare.csv"));
    let mode = column(&header, "mode");
    let red = column(&header, "reduction_pct");
    assert_eq!(rows[0][mode], "uniform");
    assert_eq!(rows[1][mode], "personalized");
    let u: f64 = rows[0][red].parse().unwrap();
    let p: f64 = rows[1][red].parse().unwrap();
    assert!(p >= u - 0.1);
}

#[test]
fn single_thread_runs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = shaping(&["--threads", "1", "--mode", "uniform", "solve"], dir.path());
        assert!(out.status.success());
    }
    let strip_time = |p: &Path| {
        let (h, rows) = read_csv(p);
        let t = column(&h, "wall_time");
        rows.into_iter()
            .map(|mut r| {
                r.remove(t);
                r
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip_time(&a.path().join("result.csv")), strip_time(&b.path().join("result.csv")));
    assert_eq!(std::fs::read(a.path().join("trace.csv")).unwrap(), std::fs::read(b.path().join("trace.csv")).unwrap());
}

#[test]
fn scale_bench_writes_one_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = shaping(&["scale-bench", "--sizes", "8,12", "--inner-iterations", "3"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = read_csv(&dir.path().join("scale.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1][column(&header, "n_nodes")], "12");
    assert!(String::from_utf8_lossy(&out.stdout).contains("n_v^"));
}

#[test]
fn validate_runs_a_selected_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let out = shaping(&["validate", "--only", "8"], dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("criterion 8") && stdout.contains("PASS"));

    let out = shaping(&["validate", "--only", "42"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown criterion 42"));
}

#[test]
fn bad_config_exits_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[agents]\npev_penetration = 0.0\n[network]\nkind = \"synthetic\"\n").unwrap();
    let out = shaping(&["--config", cfg.to_str().unwrap(), "solve"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("penetration"));

    let out = shaping(&["--config", "/nonexistent.toml", "solve"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}

#[test]
fn json_specs_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("spec.json");
    std::fs::write(&cfg, r#"{"ta": {"budget": 0.0}}"#).unwrap();
    let out = shaping(&["--config", cfg.to_str().unwrap(), "solve"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = read_csv(&dir.path().join("result.csv"));
    let spend: f64 = rows[0][column(&header, "spend")].parse().unwrap();
    assert_eq!(spend, 0.0);
}
