use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use brau_net::data::{save_dataset, synth_dataset};
use brau_net::pnm;
use brau_net::Config;
use serde_json::Value;
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn braunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_braunet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = braunet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    braunet(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn smoke() -> String {
    p(&configs().join("smoke.cfg")).to_string()
}

fn train_smoke(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("run");
    let s = smoke();
    let mut args = vec!["--threads", "1", "train", "--config", &s, "--out", p(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Square RGB test image.
fn image(dir: &Path, side: usize) -> PathBuf {
    let data = (0..side * side * 3)
        .map(|i| ((i * 37) % 251) as u8)
        .collect();
    let path = dir.join("img.ppm");
    pnm::write(&path, &pnm::Image::rgb(side, side, data)).unwrap();
    path
}

#[test]
fn train_writes_logs_checkpoints_and_config() {
    let dir = TempDir::new().unwrap();
    let run = train_smoke(dir.path(), &[]);
    for f in [
        "config.cfg",
        "splits.txt",
        "train.jsonl",
        "metrics.jsonl",
        "best.ckpt",
        "last.ckpt",
    ] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let echoed = Config::parse(&fs::read_to_string(run.join("config.cfg")).unwrap()).unwrap();
    let direct = Config::parse(&fs::read_to_string(configs().join("smoke.cfg")).unwrap()).unwrap();
    assert_eq!(echoed, direct);
    let steps = lines(&run.join("train.jsonl"));
    assert_eq!(steps.iter().filter(|v| v["event"] == "step").count(), 6);
    let metrics = lines(&run.join("metrics.jsonl"));
    assert_eq!(metrics.len(), 4);
    assert_eq!(metrics[3]["event"], "final");
    assert_eq!(metrics[3]["epochs"], 3);
}

#[test]
fn set_overrides_and_bad_keys() {
    let dir = TempDir::new().unwrap();
    let run = train_smoke(dir.path(), &["--set", "epochs=1", "--set", "lr = 0.01"]);
    let echoed = Config::parse(&fs::read_to_string(run.join("config.cfg")).unwrap()).unwrap();
    assert_eq!(echoed.optim.epochs, 1);
    assert_eq!(echoed.optim.lr, 0.01);
    let s = smoke();
    let o = p(&dir.path().join("x")).to_string();
    assert_eq!(
        code(&["train", "--config", &s, "--set", "nope=1", "--out", &o]),
        2
    );
    assert_eq!(
        code(&["train", "--config", &s, "--set", "lr", "--out", &o]),
        2
    );
    assert_eq!(
        code(&["train", "--config", "/nonexistent.cfg", "--out", &o]),
        3
    );
    assert_eq!(
        code(&[
            "train",
            "--config",
            &s,
            "--set",
            "synthetic=false",
            "--out",
            &o
        ]),
        3
    );
}

#[test]
fn divergence_exits_with_numeric_code() {
    let dir = TempDir::new().unwrap();
    let s = smoke();
    let o = p(&dir.path().join("x")).to_string();
    assert_eq!(
        code(&["train", "--config", &s, "--set", "lr=1e30", "--out", &o]),
        4
    );
}

#[test]
fn resume_continues_the_same_run() {
    let dir = TempDir::new().unwrap();
    let full = train_smoke(dir.path(), &[]);
    let part = dir.path().join("part");
    let s = smoke();
    ok(&[
        "--threads",
        "1",
        "train",
        "--config",
        &s,
        "--out",
        p(&part),
        "--epochs",
        "2",
    ]);
    let ck = part.join("last.ckpt");
    ok(&[
        "--threads",
        "1",
        "train",
        "--resume",
        p(&ck),
        "--out",
        p(&part),
    ]);
    for f in ["train.jsonl", "last.ckpt"] {
        assert_eq!(
            fs::read(full.join(f)).unwrap(),
            fs::read(part.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        code(&[
            "train",
            "--resume",
            p(&ck),
            "--set",
            "base_channels=16",
            "--out",
            p(&part)
        ]),
        2
    );
}

fn dataset(dir: &Path) -> (PathBuf, PathBuf) {
    let root = dir.join("data");
    save_dataset(&root, &synth_dataset(5, 32, 3, 3, 11).unwrap()).unwrap();
    let cfg = dir.join("data.cfg");
    let text = fs::read_to_string(configs().join("smoke.cfg")).unwrap()
        + &format!("synthetic = false\ndataset = {}\n", root.display());
    fs::write(&cfg, text).unwrap();
    (root, cfg)
}

fn eval_with(dir: &Path, cfg: &Path, preds: &Path) -> Value {
    let out = dir.join("eval");
    let rec: Value = serde_json::from_str(
        ok(&[
            "eval",
            "--config",
            p(cfg),
            "--predictions",
            p(preds),
            "--out",
            p(&out),
        ])
        .trim(),
    )
    .unwrap();
    assert!(out.join("config.cfg").is_file());
    assert_eq!(lines(&out.join("metrics.jsonl"))[0], rec);
    rec
}

#[test]
fn eval_ground_truth_as_predictions_is_perfect() {
    let dir = TempDir::new().unwrap();
    let (root, cfg) = dataset(dir.path());
    let rec = eval_with(dir.path(), &cfg, &root.join("masks"));
    assert_eq!(rec["samples"], 5);
    for key in ["mean_dsc", "miou", "accuracy"] {
        assert_eq!(rec[key], 1.0, "{key}");
    }
    assert_eq!(rec["mean_hd"], 0.0);
    for key in ["dsc", "iou", "precision", "recall"] {
        assert!(
            rec[key].as_array().unwrap().iter().all(|v| v == 1.0),
            "{key}"
        );
    }
}

#[test]
fn eval_all_background_and_miou_identity() {
    let dir = TempDir::new().unwrap();
    let (root, cfg) = dataset(dir.path());
    let preds = dir.path().join("bg");
    fs::create_dir(&preds).unwrap();
    for e in fs::read_dir(root.join("masks")).unwrap() {
        let e = e.unwrap();
        let m = pnm::read(&e.path()).unwrap();
        let zero = pnm::Image::gray(m.width, m.height, vec![0; m.data.len()]);
        pnm::write(&preds.join(e.file_name()), &zero).unwrap();
    }
    let rec = eval_with(dir.path(), &cfg, &preds);
    let recall = rec["recall"].as_array().unwrap();
    assert_eq!(recall[0], 1.0);
    assert!(recall[1..].iter().all(|v| v == 0.0));
    // a class missed entirely scores the image diagonal
    let diag = (2.0f64 * 32.0 * 32.0).sqrt();
    assert!(rec["hd"].as_array().unwrap()[1..]
        .iter()
        .all(|v| v.is_null() || v.as_f64() == Some(diag)));

    // a trained model's report: mIoU is the mean of the foreground IoUs
    let run = train_smoke(dir.path(), &[]);
    let out = dir.path().join("ev2");
    let ck = run.join("last.ckpt");
    let rec: Value = serde_json::from_str(
        ok(&[
            "eval",
            "--checkpoint",
            p(&ck),
            "--dataset",
            p(&root),
            "--out",
            p(&out),
        ])
        .trim(),
    )
    .unwrap();
    let iou: Vec<f64> = rec["iou"].as_array().unwrap()[1..]
        .iter()
        .filter_map(Value::as_f64)
        .collect();
    let mean = iou.iter().sum::<f64>() / iou.len() as f64;
    assert!((rec["miou"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert_eq!(code(&["eval", "--out", p(&out)]), 2);
    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            p(&ck),
            "--split",
            "bogus",
            "--out",
            p(&out)
        ]),
        2
    );
}

#[test]
fn infer_is_repeatable_and_probabilities_agree() {
    let dir = TempDir::new().unwrap();
    let run = train_smoke(dir.path(), &[]);
    let img = image(dir.path(), 32);
    let ck = run.join("best.ckpt");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&[
        "infer",
        "--checkpoint",
        p(&ck),
        "--image",
        p(&img),
        "--out",
        p(&a),
        "--probs",
    ]);
    ok(&[
        "infer",
        "--checkpoint",
        p(&ck),
        "--image",
        p(&img),
        "--out",
        p(&b),
    ]);
    let mask_bytes = fs::read(a.join("mask.pgm")).unwrap();
    assert_eq!(mask_bytes, fs::read(b.join("mask.pgm")).unwrap());
    let mask = pnm::read(&a.join("mask.pgm")).unwrap();
    assert_eq!((mask.width, mask.height), (32, 32));
    assert!(mask.data.iter().all(|&v| v < 3));
    let probs: Vec<_> = (0..3)
        .map(|k| pnm::read(&a.join(format!("prob_{k}.pgm"))).unwrap())
        .collect();
    for (i, &m) in mask.data.iter().enumerate() {
        let chosen = probs[m as usize].data[i];
        assert!(probs.iter().all(|q| q.data[i] <= chosen));
        let total: i32 = probs.iter().map(|q| q.data[i] as i32).sum();
        assert!((total - 255).abs() <= 2);
    }
    // 40 is not a multiple of the 32-pixel bottleneck stride
    let bad = image(dir.path(), 40);
    assert_eq!(
        code(&[
            "infer",
            "--checkpoint",
            p(&ck),
            "--image",
            p(&bad),
            "--out",
            p(&a)
        ]),
        2
    );
}

#[test]
fn report_compares_against_targets() {
    let s = smoke();
    let out = ok(&["report", "--config", &s]);
    for name in ["params ", "params_no_sccsa", "params_tiny", "macs_256"] {
        let line = out.lines().find(|l| l.starts_with(name)).expect(name);
        assert!(line.ends_with("PASS") || line.ends_with("FAIL"));
    }
    let v: Value = serde_json::from_str(&ok(&["report", "--config", &s, "--json"])).unwrap();
    let rows = v["modules"].as_array().unwrap();
    let params: u64 = rows.iter().map(|r| r["params"].as_u64().unwrap()).sum();
    let macs: u64 = rows.iter().map(|r| r["macs"].as_u64().unwrap()).sum();
    assert_eq!(params, v["params"].as_u64().unwrap());
    assert_eq!(macs, v["macs"].as_u64().unwrap());
    assert_eq!(v["checks"].as_array().unwrap().len(), 4);
}

#[test]
fn bench_scaling_fits_exponents() {
    let v: Value = serde_json::from_str(&ok(&["bench-scaling", "--json"])).unwrap();
    for r in v["rows"].as_array().unwrap() {
        assert!(r["bra_macs"].as_u64() < r["full_macs"].as_u64());
    }
    assert!((v["bra_exponent"].as_f64().unwrap() - 4.0 / 3.0).abs() < 0.1);
    assert!((v["full_exponent"].as_f64().unwrap() - 2.0).abs() < 0.01);
    assert_eq!(code(&["bench-scaling", "--resolutions", "32,64"]), 2);
}

fn check_dump(dir: &Path, ck: &Path, img: &Path, stage: &str, k: usize) {
    let out = dir.join(format!("att{stage}"));
    ok(&[
        "dump-attention",
        "--checkpoint",
        p(ck),
        "--image",
        p(img),
        "--stage",
        stage,
        "--row",
        "5",
        "--col",
        "50",
        "--out",
        p(&out),
    ]);
    let meta: Value =
        serde_json::from_str(&fs::read_to_string(out.join("routing.json")).unwrap()).unwrap();
    let s = meta["S"].as_u64().unwrap() as usize;
    let routed: Vec<usize> = meta["routed"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap() as usize)
        .collect();
    assert_eq!(routed.len(), k);
    let regions = pnm::read(&out.join("regions.pgm")).unwrap();
    let heat = pnm::read(&out.join("heatmap.pgm")).unwrap();
    let (h, w) = (regions.height, regions.width);
    let region = |i: usize| (i / w) / (h / s) * s + (i % w) / (w / s);
    let mut marked: Vec<usize> = (0..h * w)
        .filter(|&i| regions.data[i] == 255)
        .map(region)
        .collect();
    marked.dedup();
    marked.sort();
    marked.dedup();
    let mut want = routed.clone();
    want.sort();
    assert_eq!(marked, want);
    assert!((0..h * w).all(|i| heat.data[i] == 0 || routed.contains(&region(i))));
    assert!(heat.data.contains(&255));
    let weights: Vec<f64> = fs::read_to_string(out.join("attention.txt"))
        .unwrap()
        .split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(weights.len(), h * w);
    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-5);
}

#[test]
fn dump_attention_marks_routed_regions() {
    let dir = TempDir::new().unwrap();
    let run = train_smoke(dir.path(), &["--set", "input_hw=64", "--set", "epochs=1"]);
    let img = image(dir.path(), 64);
    let ck = run.join("last.ckpt");
    // stage 1 routes 2 of 4 regions on a 16x16 map, stage 3 routes 3
    check_dump(dir.path(), &ck, &img, "1", 2);
    check_dump(dir.path(), &ck, &img, "3", 3);
    let out = p(&dir.path().join("bad")).to_string();
    let base = [
        "dump-attention",
        "--checkpoint",
        p(&ck),
        "--image",
        p(&img),
        "--out",
        &out,
    ];
    assert_eq!(code(&[&base[..], &["--stage", "9"]].concat()), 2);
    assert_eq!(code(&[&base[..], &["--block", "4"]].concat()), 2);
    assert_eq!(code(&[&base[..], &["--row", "64"]].concat()), 2);
}

#[test]
fn gradcheck_exit_codes() {
    let out = braunet(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for kind in brau_tensor::OpKind::DIFFERENTIABLE {
        let name = kind.name();
        assert!(
            text.lines().any(|l| l.starts_with(name)),
            "{name} not listed"
        );
    }
    assert!(text.contains("micro_network"));
    let bad = braunet(&["gradcheck", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("custom_square"));
}
