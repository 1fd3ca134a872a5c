use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use valprof_core::decoder::{ScoreServer, TableOracleBackend};
use valprof_core::representations::ConditioningTemplate;
use valprof_core::synthetic::{BayesEncoder, GeneratorSpec};

fn mini() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("mini")
}

fn valprof(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_valprof"));
    cmd.args(args)
        .env_remove("VALPROF_ENDPOINT")
        .env_remove("VALPROF_TOKEN")
        .env_remove("VALPROF_CACHE_DIR");
    cmd
}

fn run_mini(out: &Path, args: &[&str]) -> Output {
    let config = mini().join("config.toml");
    let mut all = vec!["--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
    all.extend_from_slice(args);
    valprof(&all).output().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn info_without_predictions_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["ingest", "partition", "encode"] {
        assert!(run_mini(dir.path(), &[stage]).status.success(), "{stage}");
    }
    let out = run_mini(dir.path(), &["info"]);
    assert_eq!(out.status.code(), Some(3));
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "missing_artifact");
    assert_eq!(err["error"]["producer"], "predict");
}

#[test]
fn cluster_sweep_writes_one_result_per_count() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["ingest", "partition", "encode"] {
        assert!(run_mini(dir.path(), &[stage]).status.success());
    }
    let out = run_mini(dir.path(), &["cluster", "--n-cluster", "2,4,8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let clusters = dir.path().join("reports").join("clusters");
    let mut objectives = Vec::new();
    for n in [2usize, 4, 8] {
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(clusters.join(format!("n{n}.json"))).unwrap()).unwrap();
        assert_eq!(v["result"]["clusters"].as_array().unwrap().len(), n);
        assert_eq!(v["result"]["assignments"].as_object().unwrap().len(), 30);
        objectives.push(v["result"]["objective"].as_f64().unwrap());
        assert!(clusters.join(format!("n{n}_crosstab_ideology.csv")).exists());
        let raters = std::fs::read_to_string(clusters.join(format!("n{n}_raters.csv"))).unwrap();
        assert_eq!(raters.lines().count(), 61);
    }
    assert!(objectives.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{objectives:?}");
}

#[test]
fn stages_before_ingest_fail_with_the_producer_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_mini(dir.path(), &["partition"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"]["producer"], "ingest");
}

#[test]
fn config_errors_exit_2_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nunknown_key = 3\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = valprof(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "ingest",
    ])
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "config");
    assert!(!out_dir.exists());

    let out = run_mini(&out_dir, &["--test-fraction", "0", "ingest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

fn http_config(dir: &Path) -> PathBuf {
    let m = mini();
    let text = format!(
        r#"
seed = 3
representations = ["noinfo", "profile"]

[dataset]
name = "mini"
dir = "{}"

[decoder]
kind = "http"
id = "mini-oracle"
retries = 1

[encoder]
kind = "http"
id = "mini-bayes"

[cluster]
n_cluster = [2]
candidates = 10
"#,
        m.display()
    );
    let path = dir.join("http.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn server(token: &str) -> ScoreServer {
    let m = mini();
    let spec = GeneratorSpec::load(&m.join("spec.json")).unwrap();
    ScoreServer::builder()
        .decoder(Arc::new(
            TableOracleBackend::load("oracle", &m.join("oracle.jsonl")).unwrap(),
        ))
        .encoder(Arc::new(
            BayesEncoder::new(&spec, &ConditioningTemplate::default()).unwrap(),
        ))
        .token(token)
        .spawn()
        .unwrap()
}

#[test]
fn rejected_credentials_are_backend_failures() {
    let srv = server("secret");
    let dir = tempfile::tempdir().unwrap();
    let cfg = http_config(dir.path());
    let out_dir = dir.path().join("out");
    let base = [
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ];
    for stage in ["ingest", "partition"] {
        let status = valprof(&[&base[..], &[stage]].concat())
            .env("VALPROF_ENDPOINT", srv.url())
            .status()
            .unwrap();
        assert!(status.success());
    }
    let out = valprof(&[&base[..], &["encode"]].concat())
        .env("VALPROF_ENDPOINT", srv.url())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_json(&out)["error"]["kind"], "backend");

    let out = valprof(&[&base[..], &["encode"]].concat())
        .env("VALPROF_ENDPOINT", srv.url())
        .env("VALPROF_TOKEN", "secret")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(out_dir.join("manifest.json")).unwrap();
    assert!(!manifest.contains("secret"));
}

#[test]
fn synth_writes_a_loadable_population() {
    let dir = tempfile::tempdir().unwrap();
    let spec = mini().join("spec.json");
    let out = valprof(&[
        "synth",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ])
    .output()
    .unwrap();
    assert!(out.status.success());
    for f in [
        "instances.jsonl",
        "raters.jsonl",
        "ratings.jsonl",
        "oracle.jsonl",
        "analytic.json",
    ] {
        let fresh = std::fs::read(dir.path().join(f)).unwrap();
        let bundled = std::fs::read(mini().join(f)).unwrap();
        assert_eq!(fresh, bundled, "{f} differs from the bundled copy");
    }
}
