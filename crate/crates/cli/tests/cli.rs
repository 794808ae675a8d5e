use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn nesslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nesslab"))
        .args(args)
        .env_remove("NESSLAB_JOBS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

const RUN: &str = r#"{
    "lattice": {"sides": [6], "pair": {"kind": "harmonic", "k": 1.0}},
    "reservoir": {"kind": "langevin", "t_left": 1.2, "t_right": 0.8,
                  "lambda_left": 1.0, "lambda_right": 1.0},
    "integrator": {"dt": 0.05, "steps": 40000, "burn_in": 4000, "stride": 5},
    "study": {"kind": "run", "replicas": 3},
    "seed": 11
}"#;

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

/// Every output file except the wall-clock one.
fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timing.json")
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn run_writes_summary_tables_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.json", RUN);
    let out = tmp.path().join("out");
    let o = nesslab(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert_eq!(s["schema"], "nesslab.result.v1");
    assert_eq!(s["status"], "ok");
    assert_eq!(s["config"]["integrator"]["seed"], 11);
    assert_eq!(s["summary"]["replicas"], 3);
    for f in [
        "checkpoint.json",
        "timing.json",
        "replicas.csv",
        "temperature_profile.csv",
        "plane_flux.csv",
        "series_replica_0.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let profile = fs::read_to_string(out.join("temperature_profile.csv")).unwrap();
    assert!(profile.starts_with("layer,temperature[k_B=1],stderr"));
    assert_eq!(profile.lines().count(), 7);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.json", RUN);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(nesslab(&[
        "run",
        "--config",
        &cfg,
        "--out",
        a.to_str().unwrap(),
        "--jobs",
        "1"
    ])
    .status
    .success());
    assert!(nesslab(&[
        "run",
        "--config",
        &cfg,
        "--out",
        b.to_str().unwrap(),
        "--jobs",
        "3"
    ])
    .status
    .success());
    let (fa, fb) = (outputs(&a), outputs(&b));
    assert_eq!(fa.len(), fb.len());
    for ((na, ca), (nb, cb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        if na != "summary.json" && na != "checkpoint.json" {
            assert_eq!(ca, cb, "{na} differs");
        }
    }
    // the output path is part of the config, so compare the records without it
    let strip = |d: &Path| {
        let mut v = summary(d);
        v["config"]["output"] = Value::Null;
        v["config_hash"] = Value::Null;
        v
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn resume_from_checkpoint_reproduces_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.json", RUN);
    let out = tmp.path().join("out");
    let args = ["run", "--config", &cfg, "--out", out.to_str().unwrap()];
    assert!(nesslab(&args).status.success());
    let full = outputs(&out);

    // pretend the run stopped after the first replica
    let cp_path = out.join("checkpoint.json");
    let mut cp: Value = serde_json::from_str(&fs::read_to_string(&cp_path).unwrap()).unwrap();
    let completed = cp["completed"].as_object_mut().unwrap();
    completed.retain(|k, _| k == "replica_0");
    fs::write(&cp_path, serde_json::to_string(&cp).unwrap()).unwrap();
    fs::remove_file(out.join("summary.json")).unwrap();
    fs::remove_file(out.join("series_replica_2.csv")).unwrap();

    let o = nesslab(&args);
    assert!(o.status.success());
    let timing: Value =
        serde_json::from_str(&fs::read_to_string(out.join("timing.json")).unwrap()).unwrap();
    let ran = timing["tasks_run_this_invocation"].as_object().unwrap();
    assert!(!ran.contains_key("replica_0"));
    assert!(ran.contains_key("replica_2"));
    let resumed = outputs(&out);
    assert_eq!(
        resumed.iter().map(|f| &f.0).collect::<Vec<_>>(),
        full.iter().map(|f| &f.0).collect::<Vec<_>>()
    );
    for ((name, a), (_, b)) in resumed.iter().zip(&full) {
        assert!(a == b, "{name} differs after resume");
    }
}

#[test]
fn checkpoint_of_other_config_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.json", RUN);
    let out = tmp.path().join("out");
    assert!(
        nesslab(&["run", "--config", &cfg, "--out", out.to_str().unwrap()])
            .status
            .success()
    );
    let o = nesslab(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "12",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_summary_has_simulation_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let run_cfg = write_config(tmp.path(), "run.json", RUN);
    let oracle_cfg = write_config(
        tmp.path(),
        "oracle.json",
        &RUN.replace(
            r#""study": {"kind": "run", "replicas": 3}"#,
            r#""study": {"kind": "oracle"}"#,
        ),
    );
    let a = tmp.path().join("sim");
    let b = tmp.path().join("exact");
    assert!(
        nesslab(&["run", "--config", &run_cfg, "--out", a.to_str().unwrap()])
            .status
            .success()
    );
    let o = nesslab(&[
        "oracle",
        "--config",
        &oracle_cfg,
        "--out",
        b.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let keys = |v: &Value| {
        let mut k: Vec<String> = v["summary"].as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    };
    let (sim, exact) = (summary(&a), summary(&b));
    assert_eq!(keys(&sim), keys(&exact));
    assert_eq!(
        sim["summary"]["temperature"].as_array().unwrap().len(),
        exact["summary"]["temperature"].as_array().unwrap().len()
    );
    // the simulated flux agrees with the exact one
    let f = |v: &Value, k: &str| v["summary"]["flux"][k].as_f64().unwrap();
    assert!((f(&sim, "mean") - f(&exact, "mean")).abs() < 4.0 * f(&sim, "stderr"));
}

#[test]
fn sweep_emits_one_row_per_length() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "sweep.json",
        &RUN.replace(
            r#""study": {"kind": "run", "replicas": 3}"#,
            r#""study": {"kind": "sweep", "lengths": [4, 6, 8]}"#,
        ),
    );
    let out = tmp.path().join("out");
    let o = nesslab(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("kappa_scaling.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("length,kappa"));
    assert!(summary(&out)["summary"]["fit"]["alpha"].is_number());
}

#[test]
fn invalid_temperature_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.json",
        &RUN.replace("\"t_left\": 1.2", "\"t_left\": -1"),
    );
    let o = nesslab(&[
        "run",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("reservoir.t_left"));
}

#[test]
fn subcommand_must_match_study() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.json", RUN);
    let o = nesslab(&[
        "gk",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn blow_up_is_recorded_per_replica() {
    let tmp = tempfile::tempdir().unwrap();
    let text = RUN
        .replace(
            r#"{"kind": "harmonic", "k": 1.0}"#,
            r#"{"kind": "fpu_beta", "k2": 1.0, "k4": 1.0}"#,
        )
        .replace("\"dt\": 0.05", "\"dt\": 3.0")
        .replace("\"t_left\": 1.2", "\"t_left\": 100.0")
        .replace("\"t_right\": 0.8", "\"t_right\": 90.0");
    let cfg = write_config(tmp.path(), "boom.json", &text);
    let out = tmp.path().join("out");
    let o = nesslab(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let s = summary(&out);
    assert_eq!(s["status"], "failed");
    assert_eq!(s["tasks"].as_array().unwrap().len(), 3);
    assert!(s["tasks"][0]["error"]
        .as_str()
        .unwrap()
        .contains("non-finite"));
}

#[test]
fn kmp_and_gk_studies_run() {
    let tmp = tempfile::tempdir().unwrap();
    let kmp = write_config(
        tmp.path(),
        "kmp.json",
        r#"{"study": {"kind": "kmp", "sites": 6, "t_left": 2.0, "t_right": 1.0,
            "burn_in_time": 50.0, "run_time": 2000.0, "replicas": 2}}"#,
    );
    let o = nesslab(&[
        "kmp",
        "--config",
        &kmp,
        "--out",
        tmp.path().join("k").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("k/kmp_profile.csv").exists());

    let gk = write_config(
        tmp.path(),
        "gk.json",
        r#"{"lattice": {"sides": [8], "pair": {"kind": "harmonic", "k": 1.0},
                        "onsite": {"kind": "quartic", "a2": 0.0, "a4": 1.0}, "ends": "periodic"},
            "integrator": {"dt": 0.05, "steps": 2, "burn_in": 1},
            "study": {"kind": "gk", "temperature": 1.0, "t_max": 5.0, "trajectory_time": 200.0,
                      "sample_stride": 4, "replicas": 2}}"#,
    );
    let o = nesslab(&[
        "gk",
        "--config",
        &gk,
        "--out",
        tmp.path().join("g").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&tmp.path().join("g"));
    assert!(s["summary"]["kappa"].is_number());
    assert!(tmp.path().join("g/gk_correlation.csv").exists());
}

#[test]
fn ldf_study_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let text = RUN
        .replace(
            r#""study": {"kind": "run", "replicas": 3}"#,
            r#""study": {"kind": "ldf", "segment_samples": 20, "bins": 11, "min_count": 5}"#,
        )
        .replace("\"steps\": 40000", "\"steps\": 200000");
    let cfg = write_config(tmp.path(), "ldf.json", &text);
    let out = tmp.path().join("out");
    let o = nesslab(&["ldf", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert!((s["summary"]["histogram_integral"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(out.join("rate_function.csv").exists());
}
