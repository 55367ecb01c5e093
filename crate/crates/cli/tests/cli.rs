use std::path::Path;
use std::process::{Command, Output};

fn iwr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iwr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into_owned(), String::from_utf8_lossy(&o.stderr).into_owned())
}

const SMALL: &str = r#"
[experiment]
seeds = [0]
rounds = 1
n_initial_demos = 4
eval_rollouts = 5
methods = ["full-demos", "iwr"]

[train]
epochs = 10
checkpoint_every = 5
"#;

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nepochs = 5\nlearnig_rate = 1.0\n").unwrap();
    let o = iwr(dir.path(), &["--config", "bad.toml", "demos", "--n", "1"]);
    let (_, err) = text(&o);
    assert_eq!(o.status.code(), Some(3), "{err}");
    assert!(err.contains("learnig_rate"), "{err}");
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = iwr(dir.path(), &["train", "--data", "absent.jsonl"]);
    assert_eq!(o.status.code(), Some(4), "{:?}", text(&o));
}

#[test]
fn demos_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let base = ["--config", "small.toml", "--out", "run"];

    let o = iwr(dir.path(), &[&base[..], &["demos", "--n", "3"]].concat());
    assert!(o.status.success(), "{:?}", text(&o));
    assert!(text(&o).0.starts_with("3 demonstrations"));
    let demos = dir.path().join("run/datasets/demos.jsonl");
    assert_eq!(std::fs::read_to_string(&demos).unwrap().lines().count(), 3);
    assert!(dir.path().join("run/config.resolved").is_file());

    let o = iwr(
        dir.path(),
        &[&base[..], &["train", "--data", "run/datasets/demos.jsonl", "--method", "full-demos"]].concat(),
    );
    assert!(o.status.success(), "{:?}", text(&o));
    assert_eq!(text(&o).0.lines().count(), 2);
    for f in ["epoch_00005.ckpt", "epoch_00010.ckpt", "final.ckpt"] {
        assert!(dir.path().join("run/checkpoints").join(f).is_file(), "{f}");
    }

    let o = iwr(dir.path(), &[&base[..], &["eval", "--policy", "run/checkpoints/final.ckpt"]].concat());
    assert!(o.status.success(), "{:?}", text(&o));
    let out = text(&o).0;
    let rate: f64 = out
        .split_whitespace()
        .find_map(|w| w.parse().ok())
        .unwrap_or_else(|| panic!("no rate in {out}"));
    assert!((0.0..=1.0).contains(&rate));
}

#[test]
fn iwr_without_interventions_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = iwr(dir.path(), &["--config", "small.toml", "demos", "--n", "2"]);
    assert!(o.status.success());
    // Demonstrations land entirely in the intervention bucket, so the
    // balanced sampler has no on-policy rows.
    let o = iwr(dir.path(), &["--config", "small.toml", "train", "--data", "iwr-out/datasets/demos.jsonl"]);
    let (_, err) = text(&o);
    assert_eq!(o.status.code(), Some(5), "{err}");
    assert!(err.starts_with("error [data]"), "{err}");
}

#[test]
fn experiment_writes_table_csv_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = iwr(dir.path(), &["--config", "small.toml", "--out", "exp", "experiment"]);
    assert!(o.status.success(), "{:?}", text(&o));
    let table = std::fs::read_to_string(dir.path().join("exp/reports/summary.txt")).unwrap();
    assert!(table.contains("IWR") && table.contains("Base") && table.contains("Final"), "{table}");
    assert_eq!(text(&o).0.trim(), table.trim());

    let csv = std::fs::read_to_string(dir.path().join("exp/reports/summary.csv")).unwrap();
    let rows = iwr_core::report::parse_csv(&csv).unwrap();
    assert!(rows.iter().any(|r| r.method == "iwr"));
    assert!(rows.iter().all(|r| r.cell.n_seeds == 1 && (0.0..=1.0).contains(&r.cell.mean)));

    for f in ["datasets/seed0/initial.jsonl", "datasets/seed0/iwr.jsonl", "checkpoints/seed0/base.ckpt"] {
        assert!(dir.path().join("exp").join(f).is_file(), "{f}");
    }

    // The resolved config reproduces the report.
    let o2 = iwr(dir.path(), &["--config", "exp/config.resolved", "--out", "exp2", "experiment"]);
    assert!(o2.status.success(), "{:?}", text(&o2));
    assert_eq!(
        std::fs::read(dir.path().join("exp2/reports/summary.csv")).unwrap(),
        csv.as_bytes()
    );
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(iwr(dir.path(), &["frobnicate"]).status.code(), Some(2));
}
