use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mat-bench"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bench(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn quick_train(dir: &Path, extra: &[&str]) {
    let d = dir.to_str().unwrap();
    let mut args = vec![
        "train",
        "--out-dir",
        d,
        "--epochs",
        "150",
        "--n-test",
        "200",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn train_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        quick_train(
            dir,
            &[
                "--mode",
                "baseline",
                "--dataset",
                "two-moons",
                "--seed",
                "7",
            ],
        );
    }
    for f in ["report.jsonl", "model.matnet", "gmm.json"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let report = fs::read_to_string(a.path().join("report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 150);
}

#[test]
fn zero_budget_attack_matches_eval() {
    let dir = tempfile::tempdir().unwrap();
    quick_train(dir.path(), &["--mode", "vat"]);
    let d = dir.path().to_str().unwrap();
    let eval = ok(&["eval", "--out-dir", d, "--n-test", "200"]);
    let acc = eval
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("accuracy="))
        .unwrap()
        .to_string();
    ok(&[
        "attack",
        "--out-dir",
        d,
        "--n-test",
        "200",
        "--family",
        "fgsm",
        "--sigmas",
        "0,1,2",
    ]);
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sigma,accuracy"));
    assert_eq!(lines.next().unwrap(), format!("0,{acc}"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn embed_two_dimensional_latent() {
    let dir = tempfile::tempdir().unwrap();
    quick_train(dir.path(), &["--hidden", "16,2"]);
    let d = dir.path().to_str().unwrap();
    ok(&[
        "embed",
        "--out-dir",
        d,
        "--hidden",
        "16,2",
        "--n-test",
        "200",
    ]);
    let csv = fs::read_to_string(dir.path().join("embeddings.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "z_0,z_1,label,predicted");
    assert_eq!(lines.len(), 201);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 4));
}

#[test]
fn gmm_dump_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    quick_train(dir.path(), &[]);
    ok(&["gmm-dump", "--out-dir", dir.path().to_str().unwrap()]);
    let csv = fs::read_to_string(dir.path().join("gmm.csv")).unwrap();
    assert!(csv.starts_with("# dim=8,components=2,covariance=full\nclass,mu_0,"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"train": {"epochs": 5, "seed": 3, "objective": {"mode": "vat", "lambda1": 0.5}},
            "dataset": {"n_test": 50}}"#,
    )
    .unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        d,
        "--seed",
        "9",
    ]);
    let snap: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["train"]["seed"], 9);
    assert_eq!(snap["train"]["epochs"], 5);
    assert_eq!(snap["train"]["objective"]["mode"], "vat");
    assert_eq!(snap["train"]["objective"]["lambda1"], 0.5);
    assert_eq!(snap["dataset"]["n_test"], 50);
    assert_eq!(snap["architecture"]["covariance"], "full");

    // The snapshot alone reproduces the run.
    let again = tempfile::tempdir().unwrap();
    let a = again.path().to_str().unwrap();
    ok(&[
        "train",
        "--config",
        dir.path().join("config.json").to_str().unwrap(),
        "--out-dir",
        a,
    ]);
    assert_eq!(
        fs::read(dir.path().join("model.matnet")).unwrap(),
        fs::read(again.path().join("model.matnet")).unwrap()
    );
}

#[test]
fn exit_codes() {
    assert_eq!(bench(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bench(&["train", "--epochs", "many"]).status.code(), Some(2));
    assert_eq!(bench(&["train", "--mode", "adv"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(bench(&["eval", "--out-dir", d]).status.code(), Some(1));
    assert_eq!(
        bench(&["train", "--out-dir", d, "--dataset", "idx"])
            .status
            .code(),
        Some(1)
    );
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epochz": 3}}"#).unwrap();
    let out = bench(&["train", "--out-dir", d, "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(
        bench(&["train", "--out-dir", d, "--lr=-1"]).status.code(),
        Some(1)
    );
    assert_eq!(bench(&["--help"]).status.code(), Some(0));
}

#[test]
fn idx_dataset_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let write_idx = |name: &str, n: u32, seed: u8| {
        let mut img = Vec::new();
        for v in [2051u32, n, 2, 2] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        let mut lab = Vec::new();
        for v in [2049u32, n] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        for i in 0..n {
            let y = (i % 2) as u8;
            let base = if y == 0 { 20u8 } else { 220 };
            for k in 0..4u8 {
                img.push(base.wrapping_add((i as u8).wrapping_mul(7).wrapping_add(k * seed) % 30));
            }
            lab.push(y);
        }
        fs::write(dir.path().join(format!("{name}-images")), img).unwrap();
        fs::write(dir.path().join(format!("{name}-labels")), lab).unwrap();
    };
    write_idx("train", 40, 3);
    write_idx("test", 20, 5);
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    let d = p("out");
    let files = [
        "--dataset",
        "idx",
        "--train-images",
        &p("train-images"),
        "--train-labels",
        &p("train-labels"),
        "--test-images",
        &p("test-images"),
        "--test-labels",
        &p("test-labels"),
    ];
    let mut args = vec![
        "train",
        "--out-dir",
        &d,
        "--n-labeled",
        "all",
        "--epochs",
        "30",
        "--batch-labeled",
        "8",
        "--hidden",
        "6,3",
    ];
    args.extend_from_slice(&files);
    let out = ok(&args);
    assert!(out.contains("test_accuracy=1"), "{out}");
    let mut args = vec!["eval", "--out-dir", &d, "--n-labeled", "all"];
    args.extend_from_slice(&files);
    assert!(ok(&args).starts_with("error_rate=0 "));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        let cfg: mat_cli::RunConfig = serde_json::from_str(&fs::read_to_string(&path).unwrap())
            .unwrap_or_else(|err| panic!("{}: {err}", path.display()));
        cfg.train.validate().unwrap();
        n += 1;
    }
    assert!(n > 0);
}
