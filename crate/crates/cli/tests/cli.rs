use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn connseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_connseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dataset(dir: &Path, count: usize) -> PathBuf {
    let out = dir.join("data");
    let r = connseg(&["gen-data", "--out", s(&out), "--count", &count.to_string(), "--seed", "5"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    out
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&connseg(&["--help"])), 0);
    assert_eq!(code(&connseg(&["--version"])), 0);
    assert_eq!(code(&connseg(&["frobnicate"])), 1);
}

#[test]
fn encode_decode_roundtrip_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path(), 4);
    for stem in ["00000", "00003"] {
        let mask = data.join("masks").join(format!("{stem}.png"));
        for pattern in ["n4", "n8", "n12"] {
            let cube = tmp.path().join(format!("{stem}.{pattern}.ccub"));
            let back = tmp.path().join(format!("{stem}.{pattern}.png"));
            assert_eq!(code(&connseg(&["encode", "--mask", s(&mask), "--pattern", pattern, "--out", s(&cube)])), 0);
            assert_eq!(code(&connseg(&["decode", "--cube", s(&cube), "--out", s(&back)])), 0);
            assert_eq!(std::fs::read(&mask).unwrap(), std::fs::read(&back).unwrap());

            let again = tmp.path().join("again.ccub");
            assert_eq!(code(&connseg(&["encode", "--mask", s(&back), "--pattern", pattern, "--out", s(&again)])), 0);
            assert_eq!(std::fs::read(&cube).unwrap(), std::fs::read(&again).unwrap());
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path(), 3);
    let mask = data.join("masks/00000.png");
    let cube = tmp.path().join("m.ccub");
    assert_eq!(code(&connseg(&["encode", "--mask", s(&mask), "--pattern", "n5", "--out", s(&cube)])), 1);
    assert_eq!(code(&connseg(&["encode", "--mask", s(&mask), "--out", s(&cube)])), 0);
    let out = tmp.path().join("o.png");
    assert_eq!(code(&connseg(&["decode", "--cube", s(&cube), "--t", "1.5", "--out", s(&out)])), 1);
    assert_eq!(code(&connseg(&["decode", "--cube", s(&cube), "--k", "0", "--out", s(&out)])), 1);

    let manifest = data.join("manifest.csv");
    let run = tmp.path().join("run");
    for bad in [
        r#"{"modle": {}}"#,
        r#"{"train": {"epochs": 1, "lr": {"start": 0.1}}}"#,
        r#"{"model": {"widths": [4, 8]}}"#,
        r#"{"train": {"batch_size": 0}}"#,
        "not json",
    ] {
        let cfg = write(tmp.path(), "bad.json", bad);
        let r = connseg(&["train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&run)]);
        assert_eq!(code(&r), 1, "{bad}: {}", String::from_utf8_lossy(&r.stderr));
    }
    let spec = write(tmp.path(), "spec.json", r#"{"cont": 3}"#);
    assert_eq!(code(&connseg(&["gen-data", "--spec", s(&spec), "--out", s(&run)])), 1);
    let gc = write(tmp.path(), "gc.json", r#"{"model": {"head": "segmentaton"}}"#);
    assert_eq!(code(&connseg(&["gradcheck", "--config", s(&gc)])), 1);
    // predict needs exactly one input mode
    assert_eq!(code(&connseg(&["predict", "--checkpoint", "x.cnw1"])), 1);
}

#[test]
fn corrupt_files_exit_two() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path(), 4);
    let mask = data.join("masks/00001.png");
    let cube = tmp.path().join("m.ccub");
    assert_eq!(code(&connseg(&["encode", "--mask", s(&mask), "--out", s(&cube)])), 0);
    let bytes = std::fs::read(&cube).unwrap();
    let out = tmp.path().join("o.png");

    let mut magic = bytes.clone();
    magic[0] = b'X';
    let truncated = &bytes[..bytes.len() - 1];
    for (name, b) in [("magic.ccub", &magic[..]), ("trunc.ccub", truncated), ("header.ccub", &bytes[..7])] {
        let p = tmp.path().join(name);
        std::fs::write(&p, b).unwrap();
        let r = connseg(&["decode", "--cube", s(&p), "--out", s(&out)]);
        assert_eq!(code(&r), 2, "{name}");
        assert!(String::from_utf8_lossy(&r.stderr).contains(name));
    }
    assert_eq!(code(&connseg(&["decode", "--cube", "/nonexistent.ccub", "--out", s(&out)])), 2);

    let notpng = write(tmp.path(), "mask.png", "definitely not a png");
    assert_eq!(code(&connseg(&["encode", "--mask", s(&notpng), "--out", s(&cube)])), 2);

    // checkpoints
    let cfg = write(tmp.path(), "cfg.json", r#"{"model": {"widths": [4, 4, 4, 4], "branch_width": 2}}"#);
    let run = tmp.path().join("run");
    let r = connseg(&[
        "train", "--config", s(&cfg), "--data", s(&data.join("manifest.csv")), "--out", s(&run), "--max-steps", "1",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let ckpt = std::fs::read(run.join("last.cnw1")).unwrap();
    let image = data.join("images/00000.png");
    let ok = connseg(&["predict", "--checkpoint", s(&run.join("last.cnw1")), "--image", s(&image), "--out", s(&out)]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));

    let mut magic = ckpt.clone();
    magic[1] ^= 0xff;
    let mut body = ckpt.clone();
    body.truncate(ckpt.len() - 3);
    for (name, b) in [("magic.cnw1", magic), ("trunc.cnw1", body), ("empty.cnw1", Vec::new())] {
        let p = tmp.path().join(name);
        std::fs::write(&p, b).unwrap();
        std::fs::copy(run.join("last.json"), p.with_extension("json")).unwrap();
        let r = connseg(&["predict", "--checkpoint", s(&p), "--image", s(&image), "--out", s(&out)]);
        assert_eq!(code(&r), 2, "{name}: {}", String::from_utf8_lossy(&r.stderr));
    }
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "gc.json", r#"{"model": {"widths": [4, 8, 8, 8]}}"#);
    let r = connseg(&["gradcheck", "--config", s(&cfg)]);
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert_eq!(code(&r), 0, "{stdout}");
    for name in ["conv2d", "softmax", "nonlocal_block", "connnet_mini+nonlocal", "connnet_mini "] {
        assert!(stdout.contains(name), "{name} missing");
    }
    // a step this coarse cannot resolve the curvature of the nonlinear ops
    let r = connseg(&["gradcheck", "--config", s(&cfg), "--eps", "0.1"]);
    assert_eq!(code(&r), 3);
    assert_eq!(code(&connseg(&["gradcheck", "--eps", "-1"])), 1);
}

#[test]
fn train_predict_eval_pipeline() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path(), 6);
    let manifest = data.join("manifest.csv");
    let cfg = write(
        tmp.path(),
        "cfg.json",
        r#"{"model": {"widths": [4, 8, 8, 8], "branch_width": 4},
            "train": {"batch_size": 2, "val_every": 1},
            "fusion": {"scales": [0.75, 1.0]}}"#,
    );
    let run = tmp.path().join("run");
    let r = connseg(&[
        "train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&run), "--max-steps", "3", "--seed", "2",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["best.cnw1", "best.json", "last.cnw1", "last.json", "train_log.csv", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,val_maxF"));
    assert_eq!(log.lines().count(), 4);

    let preds = tmp.path().join("preds");
    let fusion = write(tmp.path(), "fusion.json", r#"{"scales": [1.0, 0.5], "use_flip": true}"#);
    let r = connseg(&[
        "predict", "--checkpoint", s(&run.join("best.cnw1")), "--manifest", s(&manifest), "--out-dir", s(&preds),
        "--fusion", s(&fusion),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(preds.join("00005.ccub").exists() && preds.join("00005.mask.png").exists());

    let report = tmp.path().join("report.json");
    let pr = tmp.path().join("pr.csv");
    let r = connseg(&[
        "eval", "--pred-dir", s(&preds), "--gt-manifest", s(&manifest), "--report", s(&report), "--grid", "32",
        "--pr-csv", s(&pr), "--dataset", "synthetic",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));

    let schema: serde_json::Value =
        serde_json::from_str(include_str!("../schemas/eval_report.schema.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    assert_eq!(value["dataset"], "synthetic");
    assert_eq!(value["count"], 6);
    assert_eq!(value["per_threshold"].as_array().unwrap().len(), 32);
    assert!(value["mapr"].is_number());
    assert_eq!(std::fs::read_to_string(&pr).unwrap().lines().count(), 33);

    // a missing prediction is a data error
    std::fs::remove_file(preds.join("00002.ccub")).unwrap();
    let r = connseg(&["eval", "--pred-dir", s(&preds), "--gt-manifest", s(&manifest), "--report", s(&report)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn eval_accepts_saliency_maps_and_perfect_scores() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path(), 3);
    let manifest = data.join("manifest.csv");
    let preds = tmp.path().join("preds");
    std::fs::create_dir(&preds).unwrap();
    // the ground truth itself as a 0/255 saliency map
    for stem in ["00000", "00001", "00002"] {
        std::fs::copy(data.join(format!("masks/{stem}.png")), preds.join(format!("{stem}.png"))).unwrap();
    }
    let report = tmp.path().join("r.json");
    let r = connseg(&["eval", "--pred-dir", s(&preds), "--gt-manifest", s(&manifest), "--report", s(&report)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(value["maxF"], 1.0);
    assert_eq!(value["mapr"], 1.0);
}
