//! End-to-end tests of the command-line surface on a synthetic dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mspcaps"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn mspcaps")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Deterministic 10-class raw dataset in the MSPD container layout.
fn write_toy_dataset(dir: &Path, n_train: usize, n_test: usize) {
    let write = |split: &str, n: usize, salt: u32| {
        let mut bytes = Vec::new();
        bytes.extend(b"MSPD");
        for d in [n as u32, 3, 32, 32] {
            bytes.extend(d.to_le_bytes());
        }
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 10) as u8;
            labels.push(label);
            for j in 0..3 * 32 * 32 {
                let v = ((i as u32 * 131 + j as u32 * 31 + salt * 7 + label as u32 * 997) % 256) as f32 / 255.0;
                bytes.extend(v.to_le_bytes());
            }
        }
        std::fs::write(dir.join(format!("toy-{split}.mspd")), &bytes).unwrap();
        std::fs::write(dir.join(format!("toy-{split}.labels")), &labels).unwrap();
    };
    write("train", n_train, 1);
    write("test", n_test, 2);
}

/// Small custom architecture so CLI runs stay fast.
fn write_toy_config(path: &Path, data_dir: &Path, out_dir: &Path) {
    let json = format!(
        r#"{{
  "preset": "custom",
  "channels": [4, 6, 8],
  "convs_per_block": 2,
  "capsule_dims": [4, 4, 6],
  "d_mid": 6,
  "d_out": 8,
  "num_classes": 10,
  "dataset": "toy",
  "data_dir": "{}",
  "epochs": 1,
  "batch_size": 16,
  "out_dir": "{}"
}}"#,
        data_dir.display(),
        out_dir.display()
    );
    std::fs::write(path, json).unwrap();
}

struct ToyRun {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    out_dir: PathBuf,
    data_dir: PathBuf,
}

fn trained_toy_run() -> ToyRun {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    std::fs::create_dir_all(&data_dir).unwrap();
    write_toy_dataset(&data_dir, 64, 32);
    let out_dir = tmp.path().join("run");
    let config = tmp.path().join("run.json");
    write_toy_config(&config, &data_dir, &out_dir);
    let out = run(&["train", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));
    ToyRun {
        config: out_dir.join("config.resolved.json"),
        out_dir,
        data_dir,
        _tmp: tmp,
    }
}

#[test]
fn train_writes_all_artifacts_and_metrics_header() {
    let run_dir = trained_toy_run();
    for name in ["metrics.csv", "best.ckpt", "last.ckpt", "config.resolved.json"] {
        assert!(run_dir.out_dir.join(name).exists(), "missing artifact {name}");
    }
    let csv = std::fs::read_to_string(run_dir.out_dir.join("metrics.csv")).unwrap();
    assert!(
        csv.starts_with("epoch,split,loss,accuracy,lr,seconds\n"),
        "metrics header wrong: {}",
        csv.lines().next().unwrap_or("")
    );
    assert!(csv.lines().count() >= 3, "expected train and test rows");

    // resolved config reloads and reproduces the run configuration
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&run_dir.config).unwrap()).unwrap();
    assert_eq!(resolved["epochs"], 1);
    assert_eq!(resolved["batch_size"], 16);
}

#[test]
fn tiny_preset_resolved_config_echoes_table_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    std::fs::create_dir_all(&data_dir).unwrap();
    write_toy_dataset(&data_dir, 16, 8);
    let out_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--preset",
        "tiny",
        "--dataset",
        "toy",
        "--data-dir",
        data_dir.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch-size",
        "16",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["preset"], "tiny");
    assert_eq!(resolved["patch_size"], 4);
    assert_eq!(resolved["weight_shared"], true);
}

#[test]
fn eval_prints_accuracy_and_appends_csv() {
    let run_dir = trained_toy_run();
    let ckpt = run_dir.out_dir.join("last.ckpt");
    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        run_dir.config.to_str().unwrap(),
        "--limit",
        "32",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.trim().starts_with("accuracy 0."),
        "expected 4-decimal accuracy, got: {stdout}"
    );
    let csv = std::fs::read_to_string(run_dir.out_dir.join("metrics.csv")).unwrap();
    assert!(csv.lines().any(|l| l.contains(",eval,")), "eval row appended");

    // evaluating twice is deterministic
    let out2 = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        run_dir.config.to_str().unwrap(),
        "--limit",
        "32",
    ]);
    assert_eq!(out.stdout, out2.stdout);
}

#[test]
fn eval_rejects_mismatched_config_fingerprint() {
    let run_dir = trained_toy_run();
    // tamper with the architecture: d_out differs from the checkpoint's
    let mut resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&run_dir.config).unwrap()).unwrap();
    resolved["d_out"] = serde_json::json!(16);
    let bad = run_dir.out_dir.join("bad.json");
    std::fs::write(&bad, serde_json::to_string(&resolved).unwrap()).unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        run_dir.out_dir.join("last.ckpt").to_str().unwrap(),
        "--config",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "fingerprint mismatch should exit 2");
    assert!(stderr_of(&out).contains("incompatible"));
}

#[test]
fn attack_zero_epsilon_matches_clean_accuracy() {
    let run_dir = trained_toy_run();
    let ckpt = run_dir.out_dir.join("last.ckpt");
    let csv_path = run_dir.out_dir.join("rob.csv");
    let out = run(&[
        "attack",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        run_dir.config.to_str().unwrap(),
        "--attack",
        "fgsm",
        "--eps-list",
        "0",
        "--limit",
        "32",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epsilon,accuracy,attack,model"));
    let row = lines.next().expect("one row");
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[0], "0");
    assert_eq!(fields[2], "fgsm");
    let attacked: f64 = fields[1].parse().unwrap();

    // library-path clean accuracy over the same 32 samples
    let eval_out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        run_dir.config.to_str().unwrap(),
        "--limit",
        "32",
    ]);
    let text = String::from_utf8_lossy(&eval_out.stdout);
    let clean: f64 = text.trim().strip_prefix("accuracy ").unwrap().parse().unwrap();
    assert!(
        (attacked - clean).abs() < 5e-5,
        "eps=0 accuracy {attacked} differs from clean {clean}"
    );
}

#[test]
fn attack_default_grid_and_bim() {
    let run_dir = trained_toy_run();
    let ckpt = run_dir.out_dir.join("last.ckpt");
    let csv_path = run_dir.out_dir.join("rob-bim.csv");
    let out = run(&[
        "attack",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        run_dir.config.to_str().unwrap(),
        "--attack",
        "bim",
        "--limit",
        "8",
        "--batch-size",
        "8",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    // default grid has 7 epsilons
    assert_eq!(csv.lines().count(), 8, "header + 7 rows: {csv}");
    assert!(csv.lines().nth(1).unwrap().ends_with("bim,custom"));
}

#[test]
fn inspect_tiny_reports_capsules_groups_params() {
    let out = run(&["inspect", "--preset", "tiny"]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("primary capsules total: 84"), "{text}");
    assert!(text.contains("car group sizes: (4, 4)"), "{text}");
    let total: f64 = text
        .lines()
        .find(|l| l.starts_with("total"))
        .and_then(|l| l.split_whitespace().nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!((total - 344_300.0).abs() / 344_300.0 < 0.05, "total {total}");

    // the dynamic-routing ablation costs strictly more parameters
    let dr = run(&["inspect", "--preset", "tiny", "--routing", "dr"]);
    let dr_text = String::from_utf8_lossy(&dr.stdout);
    let dr_total: f64 = dr_text
        .lines()
        .find(|l| l.starts_with("total"))
        .and_then(|l| l.split_whitespace().nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!(dr_total > total, "dr {dr_total} vs car {total}");
}

#[test]
fn convert_round_trips_idx_and_rejects_unknown() {
    let tmp = tempfile::tempdir().unwrap();
    // 2-image 3x3 IDX fixture
    let mut images = Vec::new();
    images.extend(0x0000_0803u32.to_be_bytes());
    images.extend(2u32.to_be_bytes());
    images.extend(3u32.to_be_bytes());
    images.extend(3u32.to_be_bytes());
    images.extend((0u8..18).map(|i| i * 9));
    let mut labels = Vec::new();
    labels.extend(0x0000_0801u32.to_be_bytes());
    labels.extend(2u32.to_be_bytes());
    labels.extend([4u8, 9]);
    let img_path = tmp.path().join("imgs-idx3-ubyte");
    let lbl_path = tmp.path().join("lbls-idx1-ubyte");
    std::fs::write(&img_path, &images).unwrap();
    std::fs::write(&lbl_path, &labels).unwrap();

    let out_prefix = tmp.path().join("converted");
    let out = run(&[
        "convert",
        "--input",
        img_path.to_str().unwrap(),
        "--labels",
        lbl_path.to_str().unwrap(),
        "--output",
        out_prefix.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    let mspd = std::fs::read(out_prefix.with_extension("mspd")).unwrap();
    assert_eq!(&mspd[..4], b"MSPD");
    let n = u32::from_le_bytes(mspd[4..8].try_into().unwrap());
    assert_eq!(n, 2);
    let first_pixel = f32::from_le_bytes(mspd[20..24].try_into().unwrap());
    assert_eq!(first_pixel, 0.0);
    let back_labels = std::fs::read(out_prefix.with_extension("labels")).unwrap();
    assert_eq!(back_labels, vec![4, 9]);

    // undetectable input errors out with a nonzero exit
    let junk = tmp.path().join("junk.xyz");
    std::fs::write(&junk, b"not a dataset").unwrap();
    let out = run(&[
        "convert",
        "--input",
        junk.to_str().unwrap(),
        "--output",
        out_prefix.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"preset": "tiny", "learning_rate_typo": 1}"#).unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("learning_rate_typo") && err.contains("line"), "{err}");
}

#[test]
fn missing_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--preset",
        "tiny",
        "--dataset",
        "mnist",
        "--data-dir",
        tmp.path().join("nope").to_str().unwrap(),
        "--epochs",
        "1",
        "--out-dir",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr_of(&out));
}

#[test]
fn metrics_csv_deterministic_across_runs_modulo_seconds() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    std::fs::create_dir_all(&data_dir).unwrap();
    write_toy_dataset(&data_dir, 48, 16);

    let strip_seconds = |csv: &str| -> Vec<String> {
        csv.lines()
            .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_else(|| l.to_string()))
            .collect()
    };
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = tmp.path().join(name);
        let config = tmp.path().join(format!("{name}.json"));
        write_toy_config(&config, &data_dir, &out_dir);
        let out = run(&["train", "--config", config.to_str().unwrap(), "--epochs", "2"]);
        assert!(out.status.success(), "{}", stderr_of(&out));
        csvs.push(strip_seconds(&std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap()));
    }
    assert_eq!(csvs[0], csvs[1], "same seed triple must give identical metric streams");
}

#[test]
fn input_datasets_are_never_mutated() {
    let run_dir = trained_toy_run();
    let before = std::fs::read(run_dir.data_dir.join("toy-train.mspd")).unwrap();
    // one more training run over the same files
    let tmp_out = run_dir.out_dir.join("again");
    let out = run(&[
        "train",
        "--config",
        run_dir.config.to_str().unwrap(),
        "--out-dir",
        tmp_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let after = std::fs::read(run_dir.data_dir.join("toy-train.mspd")).unwrap();
    assert_eq!(before, after);
}
