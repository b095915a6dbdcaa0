use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn cfsl(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfsl"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_metrics_and_events() {
    let dir = tempfile::tempdir().unwrap();
    let o = cfsl(dir.path(), &["run", config("smoke.ini").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    assert!(dir.path().join("events.jsonl").exists());
}

#[test]
fn seed_and_baseline_flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = cfsl(
        dir.path(),
        &["--seed", "7", "--baseline", "hfl-ssl", "run", config("smoke.ini").to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let first = metrics.lines().nth(1).unwrap();
    assert!(first.starts_with("hfl-ssl,hfl-ssl,7,"), "{first}");
}

#[test]
fn sweep_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let o = cfsl(
        dir.path(),
        &[
            "sweep",
            config("smoke.ini").to_str().unwrap(),
            "--axis",
            "labeled_fraction",
            "--values",
            "0.05,0.1",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let combined = dir.path().join("sweep_metrics.csv");
    let text = std::fs::read_to_string(&combined).unwrap();
    assert_eq!(text.lines().count(), 11);

    let o = cfsl(dir.path(), &["plot", combined.to_str().unwrap(), "--figure", "accuracy"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("plot_accuracy.csv")).unwrap();
    assert!(table.lines().count() >= 3, "{table}");
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let smoke = std::fs::read_to_string(config("smoke.ini")).unwrap();
    for (name, extra) in [("phi.ini", "[ssl]\nphi = 1.5\n"), ("key.ini", "[run]\nnot_a_key = 3\n")] {
        let path = dir.path().join(name);
        std::fs::write(&path, format!("{smoke}\n{extra}")).unwrap();
        let o = cfsl(dir.path(), &["run", path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "{name}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error:"));
    }
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn missing_file_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = cfsl(dir.path(), &["run", dir.path().join("absent.ini").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = cfsl(dir.path(), &["plot", dir.path().join("absent.csv").to_str().unwrap(), "--figure", "accuracy"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
