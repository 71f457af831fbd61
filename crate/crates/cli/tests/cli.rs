use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(format!("{name}.json"))
}

fn slopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slopt"))
        .args(args)
        .env_remove("SLOPT_BACKEND")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn optimize_smoke_writes_four_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let r = slopt(&[
        "optimize",
        "--jsonFile",
        s(&fixture("add1")),
        "--evals",
        "100",
        "--backend",
        "simulate",
        "--seed",
        "0",
        "--out",
        s(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["add1.asm", "history.csv", "convergence.svg", "model.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 101);
    let status = String::from_utf8_lossy(&r.stderr);
    assert!(
        status.contains("[0/100]") && status.contains("ratio 1.00"),
        "{status}"
    );
}

#[test]
fn emit_reproduces_listing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let r = slopt(&[
        "optimize",
        "--jsonFile",
        s(&fixture("mul8")),
        "--evals",
        "300",
        "--backend",
        "simulate",
        "--out",
        s(&out),
    ]);
    assert!(r.status.success());
    let again = dir.path().join("again.asm");
    let r = slopt(&["emit", s(&out.join("model.json")), "--out", s(&again)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(
        std::fs::read(out.join("mul8.asm")).unwrap(),
        std::fs::read(again).unwrap()
    );
}

#[test]
fn missing_file_is_an_io_error() {
    let r = slopt(&[
        "optimize",
        "--jsonFile",
        "/nonexistent/f.json",
        "--backend",
        "simulate",
    ]);
    assert_eq!(r.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&r.stderr).contains("/nonexistent/f.json"));
}

#[test]
fn invalid_spec_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"name":"f","args":[{"name":"a","type":"u64"}],"returns":["y"],
            "body":[{"out":["y"],"op":"+","in":["a","nope"]}]}"#,
    )
    .unwrap();
    let r = slopt(&["optimize", "--jsonFile", s(&bad), "--backend", "simulate"]);
    assert_eq!(r.status.code(), Some(3));

    let r = slopt(&[
        "optimize",
        "--jsonFile",
        s(&fixture("add1")),
        "--backend",
        "simulate",
        "--repetitions",
        "30",
    ]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn validate_only_reports_operations() {
    let r = slopt(&[
        "optimize",
        "--jsonFile",
        s(&fixture("p25519_mul")),
        "--validate-only",
    ]);
    assert!(r.status.success());
    assert!(String::from_utf8_lossy(&r.stdout).contains("67"));
}

#[test]
fn eval_prints_outputs() {
    let r = slopt(&[
        "eval",
        "--jsonFile",
        s(&fixture("add1")),
        "--input",
        "0xffffffffffffffff,1",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("outputs: 0x0000000000000000"));
}

#[test]
fn emulated_selftest_passes() {
    let r = slopt(&["selftest", "--backend", "simulate", "--inputs", "50"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stdout));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(slopt(&["optimize"]).status.code(), Some(2));
}
