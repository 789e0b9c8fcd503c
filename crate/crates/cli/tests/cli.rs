use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[suite]
shifts = [0.5, 2.0]
[suite.source]
num_nodes = 50
feature_dim = 4
[suite.target]
num_nodes = 50
feature_dim = 4

[train]
epochs = 1
batch_size = 16
hidden = 4
critic_steps = 1

[experiment]
seeds = [0]
"#;

fn bottrans(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bottrans"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn full_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    for args in [
        &["generate"][..],
        &["orbits"],
        &["train", "--variant", "+csd", "--trace-topology"],
        &["evaluate", "--variant", "+csd"],
    ] {
        let o = bottrans(args, &cfg, &out);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let v = out.join("seed-0/csd");
    for f in ["checkpoint.txt", "history.csv", "stages.log", "topology.trace", "metrics.csv", "metrics.json"] {
        assert!(v.join(f).exists(), "{f}");
    }
}

#[test]
fn seed_flag_selects_the_output_subdirectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let o = bottrans(&["generate", "--seed", "3"], &cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("seed-3/graphs/suite.json").exists());
}

fn error_line(o: &Output) -> String {
    assert!(!o.status.success());
    let s = stderr(o);
    let line = s.lines().last().unwrap_or_default().to_string();
    assert!(line.starts_with("error["), "{s}");
    line
}

#[test]
fn errors_are_one_classified_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let bad = write_config(dir.path(), "[suite.source]\nhomophily = 1.5\n");
    let line = error_line(&bottrans(&["generate"], &bad, &out));
    assert!(line.starts_with("error[config]"), "{line}");
    assert!(line.contains("suite.source.homophily"), "{line}");

    let typo = write_config(dir.path(), "[train]\nepoch = 3\n");
    let line = error_line(&bottrans(&["generate"], &typo, &out));
    assert!(line.starts_with("error[parse]") && line.contains("epoch"), "{line}");

    let cfg = write_config(dir.path(), CONFIG);
    let line = error_line(&bottrans(&["evaluate"], &cfg, &out));
    assert!(line.starts_with("error[missing]") && line.contains("checkpoint not found"), "{line}");

    let line = error_line(&bottrans(&["train", "--variant", "+gat"], &cfg, &out));
    assert!(line.starts_with("error[config]") && line.contains("experiment.variant"), "{line}");

    let line = error_line(&bottrans(&["generate"], &dir.path().join("absent.toml"), &out));
    assert!(line.starts_with("error[missing]"), "{line}");
}
