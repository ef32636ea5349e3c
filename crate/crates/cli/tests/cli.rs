use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output};
use std::time::Duration;

fn pcbm(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_pcbm"))
        .args(args)
        .output()
        .unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) -> String {
    let out = pcbm(args);
    assert!(out.status.success(), "pcbm {args:?} failed");
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn data_train_eval_infer_intervene_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    std::fs::write(
        p("cfg.toml"),
        "total_samples = 120\n[predictor.train]\nepochs = 5\n",
    )
    .unwrap();

    ok(&[
        "gen-data",
        "--profile",
        "tiny",
        "--config",
        &p("cfg.toml"),
        "--out",
        &p("data"),
    ]);
    let table = ok(&[
        "train",
        "--profile",
        "tiny",
        "--config",
        &p("cfg.toml"),
        "--data",
        &p("data"),
        "--variant",
        "pcbm",
        "--seed",
        "2",
        "--out",
        &p("model.pcbm"),
    ]);
    assert!(table.contains("observer") && table.contains("predictor"));

    let table = ok(&[
        "eval",
        "--bundle",
        &p("model.pcbm"),
        "--data",
        &p("data"),
        "--out",
        &p("eval.json"),
    ]);
    assert!(table.contains("pcbm"));
    let eval = json(&dir.path().join("eval.json"));
    assert_eq!(eval["variant"], "pcbm");
    let oa = eval["classification"]["oa"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&oa));

    std::fs::write(
        p("ov.json"),
        r#"{"masks": {"thalamus": "clear"}, "concepts": {"bar_angle_ok": 0.99}}"#,
    )
    .unwrap();
    ok(&[
        "infer",
        "--bundle",
        &p("model.pcbm"),
        "--data",
        &p("data"),
        "--sample",
        "0",
        "--overrides",
        &p("ov.json"),
        "--out",
        &p("inf.json"),
    ]);
    let inf = json(&dir.path().join("inf.json"));
    let concepts = inf["concepts"].as_array().unwrap();
    let edited = concepts
        .iter()
        .find(|c| c["name"] == "bar_angle_ok")
        .unwrap();
    assert_eq!(edited["value"].as_f64(), Some(0.99));
    assert_eq!(edited["overridden"], true);
    assert!(inf["segments"]
        .as_array()
        .unwrap()
        .iter()
        .any(|s| s["overridden"] == true));

    std::fs::write(p("bad.json"), r#"{"concepts": {"bar_angle_ok": 1.5}}"#).unwrap();
    let bad = pcbm(&[
        "infer",
        "--bundle",
        &p("model.pcbm"),
        "--data",
        &p("data"),
        "--sample",
        "0",
        "--overrides",
        &p("bad.json"),
    ]);
    assert!(!bad.status.success());

    let edits = r#"[{"type": "concept", "concept": "bar_angle_ok", "value": 0.99},
                    {"type": "mask", "segment": "thalamus", "source": {"kind": "clear"}}]"#;
    std::fs::write(p("edits.json"), edits).unwrap();
    ok(&[
        "intervene",
        "--bundle",
        &p("model.pcbm"),
        "--data",
        &p("data"),
        "--sample",
        "0",
        "--edits",
        &p("edits.json"),
        "--out",
        &p("local.json"),
    ]);
    let local = json(&dir.path().join("local.json"));
    assert_eq!(local["audit"].as_array().unwrap().len(), 2);

    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let _server = Server(
        Command::new(env!("CARGO_BIN_EXE_pcbm"))
            .args([
                "serve",
                "--bundle",
                &p("model.pcbm"),
                "--data",
                &p("data"),
                "--addr",
                &addr,
            ])
            .stderr(std::process::Stdio::null())
            .spawn()
            .unwrap(),
    );
    let url = format!("http://{addr}");
    let mut remote = None;
    for _ in 0..100 {
        let out = pcbm(&[
            "intervene",
            "--server",
            &url,
            "--sample",
            "0",
            "--edits",
            &p("edits.json"),
            "--out",
            &p("remote.json"),
        ]);
        if out.status.success() {
            remote = Some(json(&dir.path().join("remote.json")));
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    let remote = remote.expect("server answered");
    assert_eq!(remote["payload"], local["payload"]);
    assert_eq!(remote["audit"], local["audit"]);
}

#[test]
fn experiment_writes_metrics_and_curves_and_reports_checks_in_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let run = pcbm(&[
        "experiment",
        "--profile",
        "tiny",
        "--seeds",
        "1,2",
        "--no-standard",
        "--check",
        "--out",
        out.to_str().unwrap(),
    ]);
    let metrics = json(&out.join("metrics.json"));
    assert_eq!(metrics["seeds"], serde_json::json!([1, 2]));
    let checks = json(&out.join("checks.json"));
    let all_passed = checks
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["passed"] == true);
    assert_eq!(run.status.success(), all_passed);
    if !all_passed {
        assert_eq!(run.status.code(), Some(1));
    }
    let curve = std::fs::read_to_string(out.join("curve_pcbm_evaluation_split.tsv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], "k\toa_mean\toa_std");
    assert!(lines.len() > 2);
    assert!(out.join("curve_cbm_held_out.tsv").exists());
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = pcbm(&[
        "gen-data",
        "--profile",
        "huge",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown profile"));
    std::fs::write(dir.path().join("cfg.toml"), "no_such_field = 1\n").unwrap();
    let out = pcbm(&[
        "gen-data",
        "--profile",
        "tiny",
        "--config",
        dir.path().join("cfg.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_field"));
}
