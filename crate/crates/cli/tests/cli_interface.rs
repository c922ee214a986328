//! Binary-level contract tests: exit codes, artifact formats, and
//! replayability of the command surface.

use std::path::Path;
use std::process::Command;

fn flowgeo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowgeo"))
}

fn tiny_config(dir: &Path, mu: f64, iterations: usize) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "schema_version": "1",
        "experiment": "tiny",
        "seed": 5,
        "dataset": { "type": "sinusoid", "n_corrupt": 40, "n_clean": 10, "sigma": 0.1 },
        "corruption": { "type": "identity" },
        "flow": { "dim": 3, "layers": 2, "degree": 2 },
        "posterior": { "template": "sinusoid" },
        "train": {
            "vlb_samples": 2,
            "lambda": 0.1,
            "mu": mu,
            "learning_rate": 0.001,
            "iterations": iterations,
            "batch_size": null,
            "checkpoint_every": null
        },
        "rae": { "latent_dim": 1, "prior_samples": 0, "use_clean_refs": true }
    });
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn dry_run_validates_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1.0, 3);
    let out = flowgeo()
        .args(["train", "--config", cfg.to_str().unwrap(), "--dry-run"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_one() {
    // Both --config and --preset.
    let out = flowgeo()
        .args(["train", "--config", "a.json", "--preset", "sinusoid", "--dry-run"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Unknown preset.
    let out = flowgeo().args(["train", "--preset", "nope", "--dry-run"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Neither source.
    let out = flowgeo().args(["train", "--dry-run"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn schema_errors_exit_two_with_field_context() {
    let dir = tempfile::tempdir().unwrap();
    // Unknown key must be rejected.
    let bad = dir.path().join("bad.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tiny_config(dir.path(), 1.0, 3)).unwrap())
            .unwrap();
    v["train"]["learningrate"] = serde_json::json!(0.1);
    std::fs::write(&bad, serde_json::to_string(&v).unwrap()).unwrap();
    let out = flowgeo()
        .args(["train", "--config", bad.to_str().unwrap(), "--dry-run"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learningrate"), "error should name the offending field: {err}");

    // Missing config file.
    let out = flowgeo()
        .args(["train", "--config", "/nonexistent/x.json", "--dry-run"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Corrupt checkpoint: wrong version.
    let ck = dir.path().join("flow.json");
    std::fs::write(
        &ck,
        r#"{"version":"9","dim":2,"L":0,"degree":1,"layers":[]}"#,
    )
    .unwrap();
    let out = flowgeo()
        .args([
            "sample",
            "--flow",
            ck.to_str().unwrap(),
            "--count",
            "1",
            "--out",
            dir.path().join("s").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('9') && err.contains('1'), "version found/expected: {err}");
}

#[test]
fn train_then_artifacts_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1.0, 8);
    let run1 = dir.path().join("run1");
    let run2 = dir.path().join("run2");
    for run in [&run1, &run2] {
        let out = flowgeo()
            .args([
                "train",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                run.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    // Replayability: identical numeric outputs byte for byte.
    let a = std::fs::read(run1.join("loss.csv")).unwrap();
    let b = std::fs::read(run2.join("loss.csv")).unwrap();
    assert_eq!(a, b, "same config + seed must reproduce the loss history");
    let fa = std::fs::read(run1.join("flow.json")).unwrap();
    let fb = std::fs::read(run2.join("flow.json")).unwrap();
    assert_eq!(fa, fb);

    // Config echo present and loadable.
    let echo = run1.join("config.json");
    assert!(echo.exists());
    // Replay from the echo alone.
    let run3 = dir.path().join("run3");
    let out = flowgeo()
        .args([
            "train",
            "--config",
            echo.to_str().unwrap(),
            "--out",
            run3.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let c = std::fs::read(run3.join("loss.csv")).unwrap();
    assert_eq!(a, c, "replay from the config echo must be byte-identical");

    // RAE build on top of the trained flow.
    let rae_dir = dir.path().join("rae");
    let out = flowgeo()
        .args([
            "rae",
            "--config",
            cfg.to_str().unwrap(),
            "--flow",
            run1.join("flow.json").to_str().unwrap(),
            "--out",
            rae_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(rae_dir.join("rae.json").exists());

    // Check on the identity operator: rric delta is exactly zero.
    let check_dir = dir.path().join("check");
    let out = flowgeo()
        .args([
            "check",
            "--config",
            cfg.to_str().unwrap(),
            "--flow",
            run1.join("flow.json").to_str().unwrap(),
            "--rae",
            rae_dir.join("rae.json").to_str().unwrap(),
            "--pairs",
            "200",
            "--quadruples",
            "200",
            "--out",
            check_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(check_dir.join("check_report.json")).unwrap())
            .unwrap();
    assert!(report["delta_hat_rric"].as_f64().unwrap() < 1e-12);
    assert!(check_dir.join("rip_ratios.csv").exists());

    // Inversion on a synthetic measurement.
    let meas = dir.path().join("y.json");
    std::fs::write(&meas, "[0.05, -0.1, 0.2]").unwrap();
    let inv_dir = dir.path().join("inv");
    let out = flowgeo()
        .args([
            "invert",
            "--config",
            cfg.to_str().unwrap(),
            "--flow",
            run1.join("flow.json").to_str().unwrap(),
            "--rae",
            rae_dir.join("rae.json").to_str().unwrap(),
            "--measurement",
            meas.to_str().unwrap(),
            "--alpha",
            "0.05",
            "--iters",
            "50",
            "--certificate",
            "--out",
            inv_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(inv_dir.join("reconstruction.json").exists());
    assert!(inv_dir.join("invert_loss.csv").exists());
    assert!(inv_dir.join("certificate.json").exists());

    // Recoverability report.
    let ver_dir = dir.path().join("verify");
    let out = flowgeo()
        .args([
            "verify",
            "--config",
            cfg.to_str().unwrap(),
            "--flow",
            run1.join("flow.json").to_str().unwrap(),
            "--rae",
            rae_dir.join("rae.json").to_str().unwrap(),
            "--samples",
            "300",
            "--out",
            ver_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ver_dir.join("recoverability.json")).unwrap())
            .unwrap();
    for key in ["omega_hat", "delta_hat", "operator_norm", "measured_w1"] {
        assert!(rep[key].is_number(), "missing quantity {key}");
    }
}

#[test]
fn geodesic_csv_contract() {
    let dir = tempfile::tempdir().unwrap();
    // A flow checkpoint straight from the library.
    let flow = flowgeo_core::flow::FlowModel::identity(3, 1, 1);
    let fpath = dir.path().join("flow.json");
    flow.save(&fpath).unwrap();
    let gdir = dir.path().join("g");
    let out = flowgeo()
        .args([
            "geodesic",
            "--flow",
            fpath.to_str().unwrap(),
            "--point-a",
            "[0.0, 0.0, 0.0]",
            "--point-b",
            "[1.0, 2.0, -1.0]",
            "--steps",
            "11",
            "--out",
            gdir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(gdir.join("geodesic.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 12, "header + 11 rows");
    let first: Vec<f64> = lines[1].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    let last: Vec<f64> = lines[11].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    for (v, expect) in first.iter().zip([0.0, 0.0, 0.0]) {
        assert!((v - expect).abs() <= 1e-8);
    }
    for (v, expect) in last.iter().zip([1.0, 2.0, -1.0]) {
        assert!((v - expect).abs() <= 1e-8);
    }
}

#[test]
fn sample_zero_count_and_determinism_and_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let flow = flowgeo_core::flow::FlowModel::identity(4, 1, 1);
    let fpath = dir.path().join("flow.json");
    flow.save(&fpath).unwrap();

    // count = 0: empty artifact, exit success.
    let zdir = dir.path().join("zero");
    let out = flowgeo()
        .args([
            "sample", "--flow", fpath.to_str().unwrap(), "--count", "0", "--out",
            zdir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let arrays = flowgeo_core::dataset::read_arrays(&zdir.join("samples.json")).unwrap();
    assert_eq!(arrays[0].1.shape(), &[0, 4]);

    // Same seed, same bytes; PGM grid emitted for square dims.
    let s1 = dir.path().join("s1");
    let s2 = dir.path().join("s2");
    for s in [&s1, &s2] {
        let out = flowgeo()
            .args([
                "sample", "--flow", fpath.to_str().unwrap(), "--count", "16", "--seed", "9",
                "--pgm", "--out", s.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let a = std::fs::read(s1.join("samples.bin")).unwrap();
    let b = std::fs::read(s2.join("samples.bin")).unwrap();
    assert_eq!(a, b);
    let pgm = std::fs::read(s1.join("samples.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
}

#[test]
fn numeric_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1.0, 3);
    // Train a tiny model to get artifacts.
    let run = dir.path().join("run");
    flowgeo()
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()])
        .output()
        .unwrap();
    let rae_dir = dir.path().join("rae");
    flowgeo()
        .args([
            "rae", "--config", cfg.to_str().unwrap(), "--flow",
            run.join("flow.json").to_str().unwrap(), "--out", rae_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();

    // A NaN measurement drives the inversion loss non-finite.
    let meas = dir.path().join("bad.json");
    std::fs::write(&meas, "[null, 0.0, 0.0]").unwrap();
    let out = flowgeo()
        .args([
            "invert",
            "--config",
            cfg.to_str().unwrap(),
            "--flow",
            run.join("flow.json").to_str().unwrap(),
            "--rae",
            rae_dir.join("rae.json").to_str().unwrap(),
            "--measurement",
            meas.to_str().unwrap(),
            "--out",
            dir.path().join("inv").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    // null parses as NaN? No: serde rejects. Either way this must not
    // succeed; a parse failure is a data error (2).
    assert!(!out.status.success());

    let nan_meas = dir.path().join("nan.json");
    std::fs::write(&nan_meas, "[1e400, 0.0, 0.0]").unwrap();
    let out = flowgeo()
        .args([
            "invert",
            "--config",
            cfg.to_str().unwrap(),
            "--flow",
            run.join("flow.json").to_str().unwrap(),
            "--rae",
            rae_dir.join("rae.json").to_str().unwrap(),
            "--measurement",
            nan_meas.to_str().unwrap(),
            "--out",
            dir.path().join("inv2").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
