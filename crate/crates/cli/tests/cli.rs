use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn grape() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_grape"));
    c.env_remove("GRAPE_CACHE_DIR").env_remove("RUST_LOG");
    c
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn golden(name: &str) -> String {
    fixtures().join("golden").join(name).display().to_string()
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn grape");
    if !out.status.success() && out.status.code() != Some(2) {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.json");
    let body = format!(
        r#"{{
  "sources": ["{}", "{}", "{}"],
  "backend": {{"kind": "bigram", "corpus": "{}"}},
  "output_dir": "out",
  "log_level": "warn"{extra}
}}"#,
        golden("alpaca.jsonl"),
        golden("dolly.jsonl"),
        golden("wizard.jsonl"),
        golden("corpus.txt"),
    );
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn prints_version() {
    let out = run(grape().arg("--version"));
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn missing_config_file_exits_1_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(grape()
        .arg("--config")
        .arg(dir.path().join("absent.json"))
        .arg("run"));
    assert_eq!(out.status.code(), Some(1));

    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{"sources": ["gone.jsonl"], "backend": {"kind": "bigram", "corpus": "gone.txt"}, "output_dir": "out"}"#,
    )
    .unwrap();
    let out = run(grape().arg("run").arg("--config").arg(&config));
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("gone.jsonl") && stderr.contains("gone.txt"),
        "{stderr}"
    );
    assert!(!dir.path().join("out").exists());
}

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let out = run(grape().arg("--config").arg(&config).arg("run"));
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    for name in [
        "pools.jsonl",
        "scores.jsonl",
        "sft.jsonl",
        "errors.jsonl",
        "kl_report.json",
        "breakdown.csv",
        "report.json",
        "manifest.json",
    ] {
        assert!(dir.path().join("out").join(name).is_file(), "{name}");
    }
    let leftovers = fs::read_dir(dir.path().join("out"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(".partial")
        })
        .count();
    assert_eq!(leftovers, 0);
}

#[test]
fn cache_dir_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#", "cache_dir": "config-cache""#);
    let env_cache = dir.path().join("env-cache");
    let out = run(grape()
        .arg("--config")
        .arg(&config)
        .arg("run")
        .env("GRAPE_CACHE_DIR", &env_cache));
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_dir(&env_cache).unwrap().count(), 1);
    assert!(!dir.path().join("config-cache").exists());
}

#[test]
fn stages_run_standalone_and_match_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    let config = write_config(dir.path(), "");
    assert!(run(grape().arg("--config").arg(&config).arg("run"))
        .status
        .success());

    let out = run(grape()
        .args(["ingest", "--out"])
        .arg(d("pools.jsonl"))
        .arg("--stats")
        .arg(d("stats.json"))
        .args([
            golden("alpaca.jsonl"),
            golden("dolly.jsonl"),
            golden("wizard.jsonl"),
        ]));
    assert!(out.status.success());
    assert_eq!(
        fs::read(d("pools.jsonl")).unwrap(),
        fs::read(d("out/pools.jsonl")).unwrap()
    );

    let out = run(grape()
        .args([
            "score",
            "--backend",
            "bigram",
            "--bigram-corpus",
            &golden("corpus.txt"),
            "--max-inflight",
            "3",
        ])
        .arg("--pools")
        .arg(d("pools.jsonl"))
        .arg("--out")
        .arg(d("scores.jsonl")));
    assert!(out.status.success());
    assert_eq!(
        fs::read(d("scores.jsonl")).unwrap(),
        fs::read(d("out/scores.jsonl")).unwrap()
    );

    let out = run(grape()
        .args(["select", "--strategy", "grape", "--k", "1"])
        .arg("--pools")
        .arg(d("pools.jsonl"))
        .arg("--scores")
        .arg(d("scores.jsonl"))
        .arg("--out")
        .arg(d("sft.jsonl")));
    assert!(out.status.success());
    assert_eq!(
        fs::read(d("sft.jsonl")).unwrap(),
        fs::read(d("out/sft.jsonl")).unwrap()
    );

    let out = run(grape()
        .args(["analyze", "kl", "--k", "2"])
        .arg("--pools")
        .arg(d("pools.jsonl"))
        .arg("--scores")
        .arg(d("scores.jsonl"))
        .arg("--report")
        .arg(d("kl.json")));
    assert!(out.status.success());
    let kl: serde_json::Value = serde_json::from_slice(&fs::read(d("kl.json")).unwrap()).unwrap();
    assert_eq!(kl["trials"], 10);
    assert_eq!(kl["passes"], 10);
    assert!(kl["max_abs_error"].as_f64().unwrap() <= 1e-10);

    let report = |name: &str| {
        run(grape()
            .arg("report")
            .arg("--pools")
            .arg(d("pools.jsonl"))
            .arg("--scores")
            .arg(d("scores.jsonl"))
            .arg("--out")
            .arg(d(name))
            .arg("--summary")
            .arg(d("summary.json")))
    };
    assert!(report("a.csv").status.success());
    assert!(report("b.csv").status.success());
    let csv = fs::read(d("a.csv")).unwrap();
    assert_eq!(csv, fs::read(d("b.csv")).unwrap());
    assert_eq!(csv, fs::read(d("out/breakdown.csv")).unwrap());
    assert!(String::from_utf8(csv)
        .unwrap()
        .starts_with("scorer_id,source_id,count\n"));
}

#[test]
fn select_partial_failure_exits_2_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let pools = dir.path().join("pools.jsonl");
    let corpus = fixtures().join("corpus");
    assert!(run(grape()
        .arg("ingest")
        .arg("--out")
        .arg(&pools)
        .arg(corpus.join("s1.jsonl"))
        .arg(corpus.join("s2.jsonl")))
    .status
    .success());
    let out_path = dir.path().join("sft.jsonl");
    let out = run(grape()
        .args(["select", "--strategy", "reward"])
        .arg("--pools")
        .arg(&pools)
        .arg("--out")
        .arg(&out_path));
    assert_eq!(out.status.code(), Some(2));
    let errors = fs::read_to_string(dir.path().join("sft.jsonl.errors.jsonl")).unwrap();
    assert_eq!(errors.lines().count(), 3);
    assert!(errors.contains("reward"));

    // sft-only needs no scores and succeeds on every pool
    let out = run(grape()
        .args(["select", "--strategy", "sft-only"])
        .arg("--pools")
        .arg(&pools)
        .arg("--out")
        .arg(&out_path));
    assert_eq!(out.status.code(), Some(0));

    // grape without scores is a usage error
    let out = run(grape()
        .args(["select", "--strategy", "grape"])
        .arg("--pools")
        .arg(&pools)
        .arg("--out")
        .arg(&out_path));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cost_table_csv() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.json");
    fs::write(
        &params,
        r#"{"n": 100, "f_theta": 1.0, "f_ref": 0.5, "t": 4, "m": 2,
            "c_train": {"C(theta_lora,D_warmup,T)": 50, "C(theta,D,1)": 80,
                        "C(theta_ref,D_ref,1)": 30, "C(theta_ref,D,T)": 60}}"#,
    )
    .unwrap();
    let table = dir.path().join("table.csv");
    let out = run(grape()
        .arg("cost")
        .arg("--params")
        .arg(&params)
        .args(["--methods", "all"])
        .arg("--out")
        .arg(&table));
    assert!(out.status.success());
    let csv = fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 11);
    assert!(lines[0].starts_with("method,training_expr,feature_expr"));
    let less = lines
        .iter()
        .find(|l| l.starts_with("gradient_influence_less,"))
        .unwrap();
    assert!(less.contains(",50,1200,1250,"), "{less}");
}

#[test]
fn kl_on_dirichlet_bases() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("kl.json");
    let out = run(grape()
        .args(["analyze", "kl", "--dirichlet", "200", "--seed", "3"])
        .arg("--report")
        .arg(&report));
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["trials"], 200);
    assert_eq!(v["passes"], 200);
}
