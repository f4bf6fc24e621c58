//! End-to-end checks of the binary: flag parsing, artifact contracts, exit
//! codes, and byte-level determinism of reruns.

use std::path::Path;
use std::process::{Command, Output};

fn eqcl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqcl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small but complete run: 4 classes over 2 tasks, a couple of epochs.
const TINY_SETS: &[&str] = &[
    "--set",
    "dataset.source={kind=\"synthetic\", classes=[\"cube\",\"sphere\",\"cylinder\",\"cone\"]}",
    "--set",
    "dataset.per_class=6",
    "--set",
    "dataset.points=24",
    "--set",
    "model.widths=[2,3]",
    "--set",
    "model.head_dim=4",
    "--set",
    "model.knn=4",
    "--set",
    "optimizer.epochs=2",
    "--set",
    "optimizer.batch_size=4",
    "--set",
    "memory.M=8",
    "--set",
    "seed=11",
];

#[test]
fn gen_data_writes_dataset_and_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let flags =
        ["gen-data", "--classes", "3", "--per-class", "4", "--points", "24", "--seed", "5"];
    let run1 = eqcl(&[&flags[..], &["--out", "a"]].concat(), tmp.path());
    assert!(run1.status.success(), "{}", stderr(&run1));
    assert!(stdout(&run1).contains("3 classes, 12 samples"));

    let manifest_a = std::fs::read(tmp.path().join("a/manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&manifest_a).unwrap();
    assert!(manifest.to_string().contains("cube"));

    let run2 = eqcl(&[&flags[..], &["--out", "b"]].concat(), tmp.path());
    assert!(run2.status.success());
    let manifest_b = std::fs::read(tmp.path().join("b/manifest.json")).unwrap();
    assert_eq!(manifest_a, manifest_b);

    let sample = |dir: &str| {
        let points = tmp.path().join(dir).join("points");
        let mut files: Vec<_> =
            std::fs::read_dir(points).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        std::fs::read(&files[0]).unwrap()
    };
    assert_eq!(sample("a"), sample("b"));
}

#[test]
fn gen_data_rejects_unknown_class_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let out = eqcl(
        &["gen-data", "--classes", "cube,teapot", "--per-class", "4", "--points", "24", "--out", "x"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("teapot"), "{}", stderr(&out));
}

#[test]
fn gen_data_rejects_count_beyond_catalog() {
    let tmp = tempfile::tempdir().unwrap();
    let out = eqcl(&["gen-data", "--classes", "40", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--classes"));
}

#[test]
fn train_writes_contracted_artifacts_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let run = eqcl(&[&["train", "--out", "r1"], TINY_SETS].concat(), tmp.path());
    assert!(run.status.success(), "{}", stderr(&run));

    let csv = std::fs::read_to_string(tmp.path().join("r1/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "task,epoch,loss_total,loss1,loss2,loss3,loss4,loss_exemplar,acc_seen"
    );
    // 2 tasks x 2 epochs of rows, each parseable.
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 9);
        for f in &fields[2..] {
            f.parse::<f64>().unwrap();
        }
    }

    let summary = std::fs::read(tmp.path().join("r1/summary.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_slice(&summary).unwrap();
    let obj = parsed.as_object().unwrap();
    let text = String::from_utf8(summary.clone()).unwrap();
    let mut last = 0;
    for key in ["avg_acc", "per_task_acc", "forgetting", "retention", "config_hash", "seed"] {
        let at = text.find(&format!("\"{key}\"")).unwrap_or_else(|| panic!("missing {key}"));
        assert!(at > last, "{key} out of order");
        last = at;
    }
    assert_eq!(obj.len(), 6);
    assert_eq!(obj["seed"], serde_json::json!(11));
    assert_eq!(obj["per_task_acc"].as_array().unwrap().len(), 2);

    assert!(tmp.path().join("r1/checkpoints/task_0.json").is_file());
    assert!(tmp.path().join("r1/checkpoints/task_1.json").is_file());
    let effective =
        std::fs::read_to_string(tmp.path().join("r1/effective-config.toml")).unwrap();
    assert!(effective.contains("M = 8"));
    assert!(effective.contains("seed = 11"));

    let rerun = eqcl(&[&["train", "--out", "r2"], TINY_SETS].concat(), tmp.path());
    assert!(rerun.status.success());
    let summary2 = std::fs::read(tmp.path().join("r2/summary.json")).unwrap();
    assert_eq!(summary, summary2);
}

#[test]
fn train_set_overrides_reach_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = ["--set", "memory.M=0", "--set", "scenario=PA/PA", "--quiet"];
    let run = eqcl(&[&["train", "--out", "r"], TINY_SETS, &extra].concat(), tmp.path());
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(stdout(&run).is_empty());

    let effective = std::fs::read_to_string(tmp.path().join("r/effective-config.toml")).unwrap();
    assert!(effective.contains("M = 0"));
    assert!(effective.contains("\"PA/PA\""));

    // No rehearsal memory: the exemplar column stays zero.
    let csv = std::fs::read_to_string(tmp.path().join("r/metrics.csv")).unwrap();
    for row in csv.lines().skip(1) {
        assert_eq!(row.split(',').nth(7).unwrap(), "0");
    }
}

#[test]
fn train_config_file_is_shadowed_by_set() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("cfg.toml"), "seed = 3\n[memory]\nM = 40\n").unwrap();
    let args = [
        &["train", "--config", "cfg.toml", "--out", "r"],
        TINY_SETS,
        &["--set", "memory.M=4"][..],
    ]
    .concat();
    let run = eqcl(&args, tmp.path());
    assert!(run.status.success(), "{}", stderr(&run));
    let effective = std::fs::read_to_string(tmp.path().join("r/effective-config.toml")).unwrap();
    assert!(effective.contains("M = 4"), "{effective}");
    // TINY_SETS pins seed after the file would have set it.
    assert!(effective.contains("seed = 11"));
}

#[test]
fn train_unknown_field_exits_2_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = eqcl(&["train", "--out", "r", "--set", "optimizer.epcohs=3"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("optimizer"), "{msg}");
    assert!(msg.contains("epcohs"), "{msg}");
}

#[test]
fn train_wrong_type_exits_2_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = eqcl(&["train", "--out", "r", "--set", "optimizer.epochs=soon"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("optimizer.epochs"), "{}", stderr(&out));
}

#[test]
fn train_divergence_exits_3_with_last_finite_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = ["--set", "optimizer.learning_rate=1e30", "--set", "optimizer.epochs=3"];
    let out = eqcl(&[&["train", "--quiet", "--out", "r"], TINY_SETS, &extra].concat(), tmp.path());
    assert_eq!(out.status.code(), Some(3));
    let msg = stderr(&out);
    assert!(msg.contains("non-finite loss"), "{msg}");
    assert!(msg.contains("last finite"), "{msg}");
}

#[test]
fn train_unwritable_output_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("blocker"), b"file, not dir").unwrap();
    let out = eqcl(&["train", "--out", "blocker/run"], tmp.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn verify_passes_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = eqcl(&["verify", "--trials", "5", "--seed", "3"], tmp.path());
    assert!(a.status.success(), "{}", stderr(&a));
    let text = stdout(&a);
    assert!(text.contains("equivariance/trunk"));
    assert!(text.contains("gradients/full-objective"));
    assert!(!text.contains("FAIL"));
    let b = eqcl(&["verify", "--trials", "5", "--seed", "3"], tmp.path());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn verify_corrupted_layer_fails_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let out = eqcl(
        &["verify", "--trials", "5", "--seed", "3", "--corrupt", "vn-nonlinear"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("FAIL equivariance/vn-nonlinear"), "{text}");
    assert!(stderr(&out).contains("vn-nonlinear"));

    let bad = eqcl(&["verify", "--corrupt", "everything"], tmp.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("everything"));
}

#[test]
fn metrics_reads_a_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let run = eqcl(&[&["train", "--quiet", "--out", "r"], TINY_SETS].concat(), tmp.path());
    assert!(run.status.success(), "{}", stderr(&run));
    let out = eqcl(&["metrics", "--run", "r"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("avg_acc"));
    assert!(text.contains("retention"));

    let variant = eqcl(&["metrics", "--run", "r", "--forgetting", "max-seen"], tmp.path());
    assert!(variant.status.success());

    let missing = eqcl(&["metrics", "--run", "nowhere"], tmp.path());
    assert_eq!(missing.status.code(), Some(4));
}
