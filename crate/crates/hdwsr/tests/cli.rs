//! The `hdwsr` binary end to end.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{texture, tiny_run, write};
use hdwsr_core::io::load_png;
use hdwsr_core::presr::bicubic_resize;
use tempfile::tempdir;

fn hdwsr(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hdwsr"));
    c.args(args).env("RUST_LOG", "warn").env_remove(hdwsr::DETERMINISTIC_ENV);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("{key} missing from\n{text}"))
}

fn setup(root: &Path) -> std::path::PathBuf {
    let data = root.join("train");
    write(&data, "a.png", &texture(32, 32, 0.0));
    let mut cfg = tiny_run(&data, &root.join("run"), 6);
    cfg.model.levels = 2;
    cfg.model.dfa_repeats = vec![1, 1];
    cfg.model.decoder_repeats = vec![1, 1];
    cfg.data.patch = 16;
    let file = root.join("run.toml");
    std::fs::write(&file, cfg.to_toml().unwrap()).unwrap();
    file
}

#[test]
fn train_sample_eval_round_trip() {
    let tmp = tempdir().unwrap();
    let root = tmp.path();
    let cfg = setup(root);
    let cfg = cfg.to_str().unwrap();

    let out = ok(&hdwsr(&["train", "--config", cfg, "--set", "optim.iterations=8", "--seed", "4"], &[]));
    assert_eq!(value(&out, "iterations"), "8");
    let ck = root.join("run").join("checkpoint.json");
    assert_eq!(value(&out, "checkpoint"), ck.to_str().unwrap());
    let echoed: serde_json::Value = serde_json::from_slice(&std::fs::read(&ck).unwrap()).unwrap();
    assert_eq!(echoed["config"]["seed"], 4);
    assert_eq!(echoed["config"]["optim"]["iterations"], 8);

    let lr_path = root.join("lr.png");
    hdwsr_core::io::save_png(&lr_path, &bicubic_resize(&texture(32, 24, 0.3), 8, 6).unwrap(), false).unwrap();
    let ck_s = ck.to_str().unwrap();
    let sr = |name: &str| {
        let p = root.join(name);
        let args = ["sample", "--checkpoint", ck_s, "--input", lr_path.to_str().unwrap(), "--output", p.to_str().unwrap(), "--seed", "2"];
        ok(&hdwsr(&args, &[(hdwsr::DETERMINISTIC_ENV, "1")]));
        p
    };
    let (a, b) = (sr("a.png"), sr("b.png"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(load_png(&a).unwrap().shape(), (3, 32, 24));

    let eval_dir = root.join("eval");
    write(&eval_dir, "e1.png", &texture(32, 32, 0.1));
    write(&eval_dir, "e2.png", &texture(32, 48, 0.9));
    let json = root.join("report.json");
    let out = ok(&hdwsr(
        &["eval", "--checkpoint", ck_s, "--dir", eval_dir.to_str().unwrap(), "--flops", "--json", json.to_str().unwrap()],
        &[],
    ));
    let p1: f64 = value(&out, "image.e1.psnr_db").parse().unwrap();
    let p2: f64 = value(&out, "image.e2.psnr_db").parse().unwrap();
    let mean: f64 = value(&out, "mean.psnr_db").parse().unwrap();
    assert!((mean - (p1 + p2) / 2.0).abs() < 1e-5);
    assert!(value(&out, "flops.total").parse::<u64>().unwrap() > 0);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(report["images"].as_array().unwrap().len(), 2);
}

#[test]
fn flops_and_subband_verbs() {
    let tmp = tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = ok(&hdwsr(&["flops", "--config", cfg.to_str().unwrap(), "--attention", "dtb,dense", "--height", "8", "--width", "8"], &[]));
    let dtb: u64 = value(&out, "dtb.attention").parse().unwrap();
    let dense: u64 = value(&out, "dense.attention").parse().unwrap();
    assert!(dtb < dense, "{out}");

    let img = tmp.path().join("img.png");
    hdwsr_core::io::save_png(&img, &texture(16, 16, 0.0), false).unwrap();
    let bands = tmp.path().join("bands");
    let out = ok(&hdwsr(&["dwt-debug", "--input", img.to_str().unwrap(), "--levels", "2", "--out", bands.to_str().unwrap()], &[]));
    assert_eq!(out.lines().count(), 8);
    assert!(bands.join("level2_hh.png").exists());
}

#[test]
fn bad_invocations_fail_cleanly() {
    let tmp = tempdir().unwrap();
    let cfg = setup(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let out = hdwsr(&["train", "--config", cfg, "--set", "model.no_such_key=1"], &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));

    let out = hdwsr(&["train", "--config", cfg], &[(hdwsr::DETERMINISTIC_ENV, "1")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));

    let out = hdwsr(&["sample", "--checkpoint", "/no/such/file", "--input", "x", "--output", "y"], &[]);
    assert!(!out.status.success());
}
