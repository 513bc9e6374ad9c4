use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use filippov_cli::problem::ProblemFile;
use filippov_cli::{read_trajectory, RunReport};
use serde_json::Value;

const SIGN_MAP: &str = r#"
seed = 7

[dims]
m = 1
n = 1

[domain]
lower = [-2.0]
upper = [2.0]

[[switch]]
name = "s"
expr = "x1"

[branches]
"+" = ["-1"]
"-" = ["1"]

[[override]]
set = { kind = "points", points = [[0.0]] }
value = [99.0]

[ivp]
x0 = [1.0]
t_end = 2.0

[[query]]
name = "origin"
kind = "filippov-set"
x = [0.0]
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn filippov(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_filippov"))
        .args(args)
        .env_remove("FILIPPOV_SEED")
        .output()
        .unwrap()
}

fn report(out: &Output) -> RunReport {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn check_accepts_a_valid_file() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "sign.toml", SIGN_MAP);
    let out = filippov(&["check", p(&f)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(report(&out).results["valid"], Value::Bool(true));
}

#[test]
fn check_names_the_missing_sign_vector() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "bad.toml", &SIGN_MAP.replace("\"-\" = [\"1\"]\n", ""));
    let out = filippov(&["check", p(&f)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`-`"), "{err}");
}

#[test]
fn check_reports_syntax_errors_with_a_location() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "bad.toml", &SIGN_MAP.replace("t_end = 2.0", "t_end = \"two\""));
    let out = filippov(&["check", p(&f)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line") && err.contains("t_end"), "{err}");
    let f = write(dir.path(), "bad2.toml", &SIGN_MAP.replace("expr = \"x1\"", "expr = \"x1 +\""));
    let out = filippov(&["check", p(&f)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("switch[0]"));
}

#[test]
fn missing_files_exit_with_io_status() {
    assert_eq!(filippov(&["check", "/nonexistent/problem.toml"]).status.code(), Some(3));
}

#[test]
fn ess_range_lists_values_and_null_generators() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "sign.toml", SIGN_MAP);
    let out = filippov(&["ess-range", p(&f)]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert_eq!(r.results["exact"], Value::Bool(true));
    let pts: Vec<Vec<f64>> = serde_json::from_value(r.results["range"]["points"].clone()).unwrap();
    assert_eq!(pts, vec![vec![-1.0], vec![1.0]]);
    let gens = r.results["canonical_null_set"]["generators"].as_array().unwrap();
    assert!(gens.iter().any(|g| g.get("surface").is_some()));
    assert!(gens.iter().any(|g| g.get("points").is_some()));
}

#[test]
fn constant_map_has_a_single_value() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[dims]\nm = 2\nn = 1\n[domain]\nlower = [0, 0]\nupper = [1, 1]\n[branches]\n\"\" = [\"3.5\"]\n";
    let f = write(dir.path(), "const.toml", text);
    let r = report(&filippov(&["ess-range", p(&f)]));
    let pts: Vec<Vec<f64>> = serde_json::from_value(r.results["range"]["points"].clone()).unwrap();
    assert_eq!(pts, vec![vec![3.5]]);
}

#[test]
fn density_indicator_restricts_the_cover() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
[dims]
m = 1
n = 1
[domain]
lower = [-1.0]
upper = [1.0]
[branches]
"" = ["x1"]
[measure]
density = "max(0, min(1, 1000*min(x1, 1 - x1)))"
[[query]]
name = "support"
kind = "ess-range"
resolution = 0.01
"#;
    let f = write(dir.path(), "density.toml", text);
    let r = report(&filippov(&["ess-range", p(&f)]));
    let boxes = r.results["range"]["boxes"].as_array().unwrap();
    let lo = boxes.iter().map(|b| b["lower"][0].as_f64().unwrap()).fold(f64::INFINITY, f64::min);
    let hi = boxes.iter().map(|b| b["upper"][0].as_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
    assert!(lo.abs() <= 0.02 && (hi - 1.0).abs() <= 0.02, "[{lo}, {hi}]");
}

#[test]
fn filippov_set_at_the_origin_is_the_unit_interval() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "sign.toml", SIGN_MAP);
    let r = report(&filippov(&["filippov-set", p(&f)]));
    let v: Vec<Vec<f64>> = serde_json::from_value(r.results["vertices"].clone()).unwrap();
    assert_eq!(v, vec![vec![-1.0], vec![1.0]]);
    let r = report(&filippov(&["filippov-set", p(&f), "--x", "0.5"]));
    let v: Vec<Vec<f64>> = serde_json::from_value(r.results["vertices"].clone()).unwrap();
    assert_eq!(v, vec![vec![-1.0]]);
    let r = report(&filippov(&["filippov-set", p(&f), "--generic"]));
    let v: Vec<Vec<f64>> = serde_json::from_value(r.results["vertices"].clone()).unwrap();
    assert!((v[0][0] + 1.0).abs() <= 1e-6 && (v[1][0] - 1.0).abs() <= 1e-6, "{v:?}");
}

#[test]
fn solve_then_verify_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "sign.toml", SIGN_MAP);
    let tr_path = dir.path().join("tr.json");
    let out = filippov(&["solve", p(&f), "-o", p(&tr_path)]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    let emitted: filippov_core::solver::Trajectory = serde_json::from_value(r.results["trajectory"].clone()).unwrap();
    let entry = emitted
        .events
        .iter()
        .find(|e| e.kind == filippov_core::solver::EventKind::SlidingEntry)
        .unwrap();
    assert!((entry.t - 1.0).abs() <= 1e-8);
    let reread = read_trajectory(p(&tr_path)).unwrap();
    assert_eq!(reread, emitted);
    for (a, b) in reread.nodes.iter().zip(&emitted.nodes) {
        assert_eq!(a.t.to_bits(), b.t.to_bits());
        for (x, y) in a.x.iter().zip(&b.x) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    let out = filippov(&["verify", p(&f), p(&tr_path)]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert!(r.results["report"]["max_violation"].as_f64().unwrap() <= 1e-6);

    // A shifted copy is not a solution.
    let shifted = reread.shifted(&[0.1]);
    let bad = write(dir.path(), "bad.json", &serde_json::to_string(&shifted).unwrap());
    let out = filippov(&["verify", p(&f), p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(report(&out).results["report"]["max_violation"].as_f64().unwrap() > 0.05);
}

#[test]
fn tabular_solve_output_has_one_row_per_node() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "sign.toml", SIGN_MAP);
    let csv_path = dir.path().join("tr.csv");
    let out = filippov(&["solve", p(&f), "--format", "tabular", "-o", p(&csv_path)]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text, String::from_utf8(out.stdout).unwrap());
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,x1,mode"));
    let last = lines.last().unwrap();
    assert!(last.starts_with("2,") && last.ends_with("sliding(1)"), "{last}");
}

#[test]
fn identical_runs_give_identical_payloads() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "sign.toml", SIGN_MAP);
    for cmd in ["check", "ess-range", "filippov-set", "solve"] {
        let a = report(&filippov(&[cmd, p(&f)]));
        let b = report(&filippov(&[cmd, p(&f)]));
        assert_eq!(
            serde_json::to_string(&a.payload()).unwrap(),
            serde_json::to_string(&b.payload()).unwrap()
        );
    }
}

#[test]
fn config_hash_ignores_formatting_and_key_order() {
    let a = ProblemFile::parse(SIGN_MAP, "a").unwrap();
    let reordered = SIGN_MAP.replace("lower = [-2.0]\nupper = [2.0]", "upper = [2]\nlower = [-2]");
    let b = ProblemFile::parse(&format!("# comment\n{reordered}"), "b").unwrap();
    assert_eq!(a.config_hash(), b.config_hash());
    let c = ProblemFile::parse(&SIGN_MAP.replace("value = [99.0]", "value = [98.0]"), "c").unwrap();
    assert_ne!(a.config_hash(), c.config_hash());
}

#[test]
fn seed_precedence_is_flag_then_file_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "sign.toml", SIGN_MAP);
    let g = write(dir.path(), "unseeded.toml", &SIGN_MAP.replace("seed = 7", ""));
    let run = |file: &Path, flag: Option<&str>, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_filippov"));
        c.args(["check", p(file)]).env_remove("FILIPPOV_SEED");
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        if let Some(e) = env {
            c.env("FILIPPOV_SEED", e);
        }
        report(&c.output().unwrap()).seed
    };
    assert_eq!(run(&f, None, None), 7);
    assert_eq!(run(&f, Some("3"), Some("11")), 3);
    assert_eq!(run(&f, None, Some("11")), 7);
    assert_eq!(run(&g, None, Some("11")), 11);
    assert_eq!(run(&g, None, None), 0);
}

#[test]
fn ambiguous_stops_are_warned_once() {
    let dir = tempfile::tempdir().unwrap();
    let text = SIGN_MAP
        .replace("\"+\" = [\"-1\"]", "\"+\" = [\"1\"]")
        .replace("\"-\" = [\"1\"]", "\"-\" = [\"-1\"]")
        .replace("x0 = [1.0]", "x0 = [0.0]");
    let f = write(dir.path(), "repulsive.toml", &text);
    let out = filippov(&["solve", p(&f)]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert!(r.warnings.iter().any(|w| w.contains("ambiguous")), "{:?}", r.warnings);
    let mut w = r.warnings.clone();
    w.dedup();
    assert_eq!(w.len(), r.warnings.len());
}

#[test]
fn unknown_queries_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "sign.toml", SIGN_MAP);
    assert_eq!(filippov(&["ess-range", p(&f), "--query", "nope"]).status.code(), Some(2));
    assert_eq!(filippov(&["ess-range", p(&f), "--query", "origin"]).status.code(), Some(2));
}

#[test]
fn quiet_prints_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "sign.toml", SIGN_MAP);
    let out = filippov(&["check", p(&f), "--quiet"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
}
