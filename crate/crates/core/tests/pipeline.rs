mod common;

use std::fs;
use std::path::Path;

use common::*;
use openset_har::pipeline::{
    eval_id, eval_ood, export, features, hierarchy, localize, prepare, run_all, sweep_window,
    train_stage, ExportTarget, RunConfig,
};
use openset_har::{Error, ExportFormat, FoldPlan, Hierarchy};

const CLASSES: [&str; 4] = ["walk", "run", "jump", "sit"];

fn config(dir: &Path, extra: &str) -> RunConfig {
    let data = dir.join("data.csv");
    if !data.exists() {
        write_recordings(&data, 4, &CLASSES, 30.0, 30.0, 1);
    }
    let text = format!(
        "data_path = {:?}\noutput_dir = {:?}\nwindow_seconds = 2.0\nsubjects_per_fold = 2\n\
         repeats = 1\nood_classes = [\"sit\"]\n{extra}\n\
         [train]\nmax_epochs = 200\nhidden_sizes = [16]\nlearning_rate = 0.001\n{SCHEMA_TOML}",
        data,
        dir.join("out")
    );
    RunConfig::parse(&text).unwrap()
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .count()
        - 1
}

#[test]
fn full_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    run_all(&cfg).unwrap();
    let out = tmp.path().join("out");
    let plan: FoldPlan =
        serde_json::from_str(&fs::read_to_string(out.join("folds.json")).unwrap()).unwrap();
    assert_eq!(plan.folds.len(), 2);
    for i in 0..2 {
        let fold = out.join(format!("fold_{i}"));
        for f in ["scaler.json", "hierarchy.json", "hierarchy.dot", "reference.json"] {
            assert!(fold.join(f).exists(), "{f}");
        }
        let run = fold.join("repeat_0");
        for f in ["checkpoint.json", "train_log.csv", "thresholds.json", "predictions.csv"] {
            assert!(run.join(f).exists(), "{f}");
        }
        assert_eq!(data_rows(&run.join("localization.csv")), 21);
        let deploy = Hierarchy::<f64>::import(&fold.join("hierarchy.json")).unwrap();
        assert_eq!(deploy.classes(), vec!["jump", "run", "walk"]);
        let reference = Hierarchy::<f64>::import(&fold.join("reference.json")).unwrap();
        assert_eq!(reference.class_count(), 4);
    }
    for stage in ["eval_id", "eval_ood", "localize"] {
        let csv = fs::read_to_string(out.join(format!("reports/{stage}.csv"))).unwrap();
        assert!(csv.starts_with(&format!("# config_hash={}\n", cfg.hash())));
        assert!(out.join(format!("reports/{stage}.json")).exists());
    }
    assert_eq!(data_rows(&out.join("reports/localize_per_fold.csv")), 42);

    let report = eval_ood(&cfg).unwrap();
    assert_eq!(report.runs.len(), 2);
    for key in ["auroc", "detection_error", "id_macro_f1", "knn_auroc"] {
        let s = &report.aggregate[key];
        assert!(s.mean.is_finite() && s.std.is_finite(), "{key}");
    }
    let id = eval_id(&cfg).unwrap();
    let f1 = id.aggregate["macro_f1"].mean;
    assert!(f1 > 0.8, "macro F1 {f1}");
}

#[test]
fn stages_can_be_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    prepare(&cfg).unwrap();
    let first = fs::read(tmp.path().join("out/folds.json")).unwrap();
    prepare(&cfg).unwrap();
    assert_eq!(first, fs::read(tmp.path().join("out/folds.json")).unwrap());
    features(&cfg).unwrap();
    hierarchy(&cfg).unwrap();
    let tree = fs::read(tmp.path().join("out/fold_0/hierarchy.json")).unwrap();
    hierarchy(&cfg).unwrap();
    assert_eq!(tree, fs::read(tmp.path().join("out/fold_0/hierarchy.json")).unwrap());
}

#[test]
fn replaced_hierarchy_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    prepare(&cfg).unwrap();
    features(&cfg).unwrap();
    hierarchy(&cfg).unwrap();
    train_stage(&cfg).unwrap();
    let path = tmp.path().join("out/fold_0/hierarchy.json");
    let h = Hierarchy::<f64>::import(&path).unwrap();
    let flat = Hierarchy::<f64>::flat(&h.classes()).unwrap();
    fs::write(&path, flat.to_json_tree()).unwrap();
    let err = eval_id(&cfg).unwrap_err();
    assert!(matches!(err, Error::Fingerprint { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn imported_tree_without_distances_cannot_localize() {
    let tmp = tempfile::tempdir().unwrap();
    let tree = tmp.path().join("tree.json");
    fs::write(
        &tree,
        r#"{"name":"all","children":[
            {"name":"moving","children":[{"name":"walk"},{"name":"run"},{"name":"jump"}]},
            {"name":"sit"}]}"#,
    )
    .unwrap();
    let cfg = config(
        tmp.path(),
        &format!("[hierarchy]\nsource = \"imported\"\npath = {tree:?}"),
    );
    prepare(&cfg).unwrap();
    features(&cfg).unwrap();
    hierarchy(&cfg).unwrap();
    train_stage(&cfg).unwrap();
    eval_ood(&cfg).unwrap();
    let deploy = Hierarchy::<f64>::import(&tmp.path().join("out/fold_0/hierarchy.json")).unwrap();
    // The three-way `moving` node is chained into two binary splits.
    assert_eq!(deploy.len(), 5);
    assert!(deploy.is_binary());
    let err = localize(&cfg).unwrap_err();
    assert!(matches!(err, Error::Capability(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn flat_source_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "[hierarchy]\nsource = \"flat\"");
    run_all(&cfg).unwrap();
    let text = export(&cfg, 1, ExportTarget::Hierarchy, ExportFormat::JsonTree).unwrap();
    let tree: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(tree["children"].as_array().unwrap().len(), 3);
    let dot = export(&cfg, 0, ExportTarget::Reference, ExportFormat::Dot).unwrap();
    assert!(dot.starts_with("digraph"));
}

#[test]
fn missing_column_is_a_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), "");
    cfg.schema.as_mut().unwrap().channels.push("gyro_x".into());
    let err = prepare(&cfg).unwrap_err();
    assert!(matches!(err, Error::Schema(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn unknown_ood_class_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), "");
    cfg.ood_classes = vec!["swim".into()];
    let err = prepare(&cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn later_stage_without_earlier_output_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    assert!(features(&cfg).is_err());
    assert!(export(&cfg, 0, ExportTarget::Hierarchy, ExportFormat::Dot).is_err());
}

#[test]
fn window_sweep_tabulates_each_length() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), "");
    cfg.sweep_window_seconds = vec![1.0, 2.0];
    let rows = sweep_window(&cfg).unwrap();
    for w in [1.0, 2.0] {
        assert!(rows.iter().any(|r| r.window_seconds == w && r.metric == "macro_f1"));
        assert!(rows.iter().any(|r| r.window_seconds == w && r.metric == "auroc"));
    }
    assert!(tmp.path().join("out/reports/sweep_window.csv").exists());
    assert!(tmp.path().join("out/sweep/w_1/folds.json").exists());
}

#[test]
fn config_file_paths_resolve_against_its_directory() {
    let tmp = tempfile::tempdir().unwrap();
    write_recordings(&tmp.path().join("data.csv"), 2, &CLASSES, 10.0, 30.0, 2);
    let path = tmp.path().join("run.toml");
    fs::write(
        &path,
        format!("data_path = \"data.csv\"\noutput_dir = \"out\"\n{SCHEMA_TOML}"),
    )
    .unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.data_path.as_deref(), Some(tmp.path().join("data.csv").as_path()));
    assert_eq!(cfg.output_dir, tmp.path().join("out"));
}
