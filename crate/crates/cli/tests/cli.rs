use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn tunnel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tunnel"))
        .args(args)
        .env_remove("TUNNEL_THREADS")
        .output()
        .expect("binary runs")
}

fn lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).expect("json line"))
        .collect()
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    dir.join(name)
}

#[test]
fn predicted_rate_in_one_dimension() {
    let out = tunnel(&["predict", "--dim", "1", "--side", "1000", "--u1", "1e-8", "--u2", "1e-6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let recs = lines(&out);
    let pred = recs.iter().find(|r| r["record"] == "predictions").unwrap();
    let rate = pred["rate"].as_f64().unwrap();
    assert_eq!(format!("{rate:.4e}"), "7.2901e-8");
}

#[test]
fn zero_u2_gives_zero_nu() {
    let out = tunnel(&["estimate-nu", "--dim", "2", "--u2", "0", "--reps", "50"]);
    assert!(out.status.success());
    let recs = lines(&out);
    let s = recs.last().unwrap();
    assert_eq!(s["record"], "summary");
    assert_eq!(s["nu_hat"].as_f64(), Some(0.0));
}

#[test]
fn tau2_without_type1_mutations_is_a_config_error() {
    let out = tunnel(&["tau2", "--u1", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

#[test]
fn bad_flags_and_unknown_config_keys_exit_two() {
    assert_eq!(tunnel(&["predict", "--dim", "7"]).status.code(), Some(2));
    assert_eq!(tunnel(&["predict", "--no-such-flag"]).status.code(), Some(2));
    let cfg = scratch("bad.toml");
    std::fs::write(&cfg, "dim = 1\nsidez = 4\n").unwrap();
    assert_eq!(tunnel(&["predict", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn output_starts_with_schema_and_resolved_config() {
    let out = tunnel(&["oracle", "--dim", "2", "--max-level", "8"]);
    assert!(out.status.success());
    let recs = lines(&out);
    assert_eq!(recs[0]["schema_version"], 1);
    assert_eq!(recs[0]["command"], "oracle");
    let cfg = &recs[0]["config"];
    assert_eq!(cfg["dim"], 2);
    assert_eq!(cfg["max-level"], 8);
    assert!(cfg["beta"].as_f64().unwrap() > 0.0);
    assert_eq!(recs.iter().filter(|r| r["record"] == "level").count(), 7);
}

fn data_records(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .skip(1)
        .filter(|l| !l.contains("\"summary\""))
        .map(String::from)
        .collect()
}

#[test]
fn reruns_are_byte_identical() {
    let args = ["estimate-nu", "--dim", "2", "--u2", "1e-2", "--reps", "200", "--seed", "5", "--families"];
    let a = tunnel(&args);
    let b = tunnel(&[&args[..], &["--threads", "2"]].concat());
    assert!(a.status.success() && b.status.success());
    let (ra, rb) = (data_records(&a), data_records(&b));
    assert_eq!(ra.len(), 200);
    assert_eq!(ra, rb);
    // Summaries differ only in runtime.
    let strip = |o: &Output| {
        let mut s = lines(o).pop().unwrap();
        s.as_object_mut().unwrap().remove("runtime_s");
        s
    };
    assert_eq!(strip(&a), strip(&b));

    let t = ["tau2", "--dim", "1", "--side", "20", "--u1", "1e-3", "--u2", "1e-2", "--reps", "30", "--seed", "3"];
    assert_eq!(data_records(&tunnel(&t)), data_records(&tunnel(&t)));
}

#[test]
fn resolved_config_round_trips() {
    let printed = tunnel(&["diffusion", "--dim", "3", "--eps", "0.2", "--reps", "50", "--threads", "1", "--print-config"]);
    assert!(printed.status.success());
    let cfg = scratch("diffusion.toml");
    std::fs::write(&cfg, &printed.stdout).unwrap();
    let again = tunnel(&["diffusion", "--config", cfg.to_str().unwrap(), "--print-config"]);
    assert_eq!(printed.stdout, again.stdout);

    let from_file = tunnel(&["diffusion", "--config", cfg.to_str().unwrap()]);
    let from_flags = tunnel(&["diffusion", "--dim", "3", "--eps", "0.2", "--reps", "50", "--threads", "1"]);
    assert!(from_file.status.success());
    assert_eq!(lines(&from_file)[0], lines(&from_flags)[0]);
    assert_eq!(data_records(&from_file), data_records(&from_flags));
}

#[test]
fn flags_override_the_config_file() {
    let cfg = scratch("predict.toml");
    std::fs::write(&cfg, "dim = 2\nside = 10\nu1 = 1e-6\n").unwrap();
    let out = tunnel(&["predict", "--config", cfg.to_str().unwrap(), "--side", "20"]);
    let head = &lines(&out)[0]["config"];
    assert_eq!((head["dim"].as_u64(), head["side"].as_u64()), (Some(2), Some(20)));
}

#[test]
fn files_and_csv_columns() {
    let jl = scratch("boundary.jsonl");
    let csv = scratch("boundary.csv");
    let out = tunnel(&[
        "boundary", "--dim", "3", "--levels", "5,20", "--reps", "4", "--seed", "1",
        "--out", jl.to_str().unwrap(), "--csv", csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&jl).unwrap();
    assert!(text.starts_with("{\"schema_version\":1"));
    let table = std::fs::read_to_string(&csv).unwrap();
    let mut rows = table.lines();
    assert_eq!(rows.next(), Some("k,boundary_mean,boundary_stderr,implied_beta"));
    assert_eq!(rows.count(), 2);
}

#[test]
fn diffusion_reports_the_target() {
    let out = tunnel(&["diffusion", "--dim", "2", "--eps", "0.5", "--reps", "2000", "--u2", "1e-4"]);
    assert!(out.status.success());
    let recs = lines(&out);
    let f = recs.iter().find(|r| r["record"] == "f_eps").unwrap();
    assert!((f["gamma_target"].as_f64().unwrap() - 0.564190).abs() < 1e-6);
    assert!(recs.last().unwrap()["nu_eps_prediction"]["nu_eps"].as_f64().unwrap() > 0.0);
}

#[test]
fn horizon_exhaustion_exits_three() {
    // Paths from 1 almost never die or get killed within 0.01.
    let out = tunnel(&["diffusion", "--dim", "1", "--eps", "1", "--reps", "20", "--horizon", "0.01"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
