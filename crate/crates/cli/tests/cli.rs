use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_openset-har");

/// Three subjects, four classes of sinusoids with a class-specific offset on
/// the third channel; the "noise" is a fixed high-frequency wobble.
fn write_data(path: &Path) {
    let mut s = String::from("subject,activity,acc_x,acc_y,acc_z\n");
    for sub in 0..4 {
        for (c, class) in ["walk", "run", "jump", "sit"].iter().enumerate() {
            for t in 0..600 {
                let time = t as f64 / 30.0;
                let phase = 2.0 * std::f64::consts::PI * (0.5 + c as f64) * time;
                let wobble = 0.2 * (13.7 * time + sub as f64).sin();
                let amp = 1.0 + 0.5 * c as f64;
                let _ = writeln!(
                    s,
                    "s{sub},{class},{:.5},{:.5},{:.5}",
                    amp * phase.sin() + wobble,
                    amp * phase.cos() - wobble,
                    0.5 * c as f64 + wobble
                );
            }
        }
    }
    fs::write(path, s).unwrap();
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    write_data(&dir.join("data.csv"));
    let cfg = dir.join("run.toml");
    fs::write(
        &cfg,
        format!(
            r#"data_path = "data.csv"
output_dir = "out"
window_seconds = 2.0
subjects_per_fold = 2
repeats = 1
ood_classes = ["sit"]
{extra}

[train]
max_epochs = 60
hidden_sizes = [16]
learning_rate = 0.002

[schema]
subject = "subject"
label = "activity"
channels = ["acc_x", "acc_y", "acc_z"]
sample_rate_hz = 30.0
"#
        ),
    )
    .unwrap();
    cfg
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("OPENSET_HAR_OUTPUT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["train", "--lambda-hat", "x"])), 2);
}

#[test]
fn missing_data_path_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run(&["prepare", "--output", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("data_path"));
}

#[test]
fn out_of_range_override_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let o = run(&["prepare", "-c", cfg.to_str().unwrap(), "--lambda-hat", "1.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn malformed_value_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let data = tmp.path().join("data.csv");
    let mut text = fs::read_to_string(&data).unwrap();
    text.push_str("s0,walk,oops,0,0\n");
    fs::write(&data, text).unwrap();
    assert_eq!(code(&run(&["prepare", "-c", cfg.to_str().unwrap()])), 3);
}

#[test]
fn full_run_then_stage_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let c = cfg.to_str().unwrap();
    let o = run(&["run", "-c", c]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reports = tmp.path().join("out/reports");
    for f in ["eval_id.csv", "eval_ood.json", "localize.csv", "localize_per_fold.csv"] {
        assert!(reports.join(f).exists(), "{f}");
    }

    let o = run(&["eval-id", "-c", c]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("macro_f1: "));
    let o = run(&["eval-ood", "-c", c]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("auroc: ") && stdout.contains("knn_auroc: "));

    let o = run(&["export", "-c", c, "--format", "dot", "--target", "reference"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("digraph"));
    let dest = tmp.path().join("tree.json");
    let o = run(&["export", "-c", c, "--fold", "1", "--out", dest.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(fs::read_to_string(&dest).unwrap().contains("\"jump\""));
    assert_eq!(code(&run(&["export", "-c", c, "--fold", "9"])), 2);
}

#[test]
fn localize_without_distances_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("tree.json"),
        r#"{"name":"all","children":[{"name":"walk"},{"name":"run"},{"name":"jump"},{"name":"sit"}]}"#,
    )
    .unwrap();
    let cfg = write_config(tmp.path(), "");
    let c = cfg.to_str().unwrap();
    let imported = [
        "--hierarchy-source",
        "imported",
        "--hierarchy-path",
        tmp.path().join("tree.json").to_str().unwrap(),
    ]
    .map(String::from);
    for stage in ["prepare", "features", "hierarchy", "train"] {
        let mut args = vec![stage, "-c", c];
        args.extend(imported.iter().map(String::as_str));
        assert_eq!(code(&run(&args)), 0, "{stage}");
    }
    let mut args = vec!["localize", "-c", c];
    args.extend(imported.iter().map(String::as_str));
    let o = run(&args);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("merge distances"));
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let elsewhere = tmp.path().join("elsewhere");
    let o = Command::new(BIN)
        .args(["prepare", "-c", cfg.to_str().unwrap()])
        .env("OPENSET_HAR_OUTPUT", &elsewhere)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(elsewhere.join("folds.json").exists());
    assert!(!tmp.path().join("out").exists());
}
