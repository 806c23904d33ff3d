use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
seed = 3
suite.tasks = 2
suite.dim = 4
suite.classes = 3
suite.n_train = 60
suite.n_test = 40
model.dims = 6,6,4
train.iterations = 30
merge.grid = 0.2,0.5
merge.ada_iterations = 5
surgery.rank = 2
surgery.iterations = 20
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_merge-surgeon")).args(args).env("MERGE_SURGEON_THREADS", "1").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["merge", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: kind=usage"));
}

#[test]
fn unknown_algorithm_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = run(&["--run-dir", d, "merge", "--algo", "bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=unknown_algorithm"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = run(&["--run-dir", d, "--set", "merge.lamda=0.3", "gen"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=config"), "{}", stderr(&o));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let d = dir.path().join("run");
    let d = d.to_str().unwrap();
    let o = run(&["--config", &cfg, "--run-dir", d, "--set", "suite.tasks=3", "gen", "--dim", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let spec = fs::read_to_string(Path::new(d).join("suite").join("suite.txt")).unwrap();
    assert!(spec.contains("tasks = 3"), "{spec}");
    assert!(spec.contains("dim = 5"), "{spec}");
}

#[test]
fn tiny_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut manifests = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "3")] {
        let d = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_merge-surgeon"))
            .args(["--config", &cfg, "--run-dir", d.to_str().unwrap(), "pipeline"])
            .env("MERGE_SURGEON_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let results = fs::read_to_string(d.join("results.csv")).unwrap();
        assert!(results.lines().any(|l| l.starts_with("ta+v2")), "{results}");
        manifests.push(fs::read(d.join("manifest.txt")).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);
}
