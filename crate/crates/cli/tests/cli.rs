use std::process::Command;

fn frm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_frm"))
}

#[test]
fn check_passes_on_a_fresh_build() {
    let out = frm().arg("check").output().unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.lines().filter(|l| l.starts_with("PASS ")).count() >= 30);
}

#[test]
fn corrupted_gradient_exits_one_and_names_the_check() {
    let out = frm()
        .args(["check", "--override", "check.corrupt_gradient=true"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let failed: Vec<&str> = stdout.lines().filter(|l| l.starts_with("FAIL ")).collect();
    assert_eq!(failed.len(), 1);
    assert!(failed[0].contains("objective_gradients_match_finite_differences"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seeds = []\n").unwrap();
    let out = frm().args(["linreg", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = frm().args(["linreg", "--override", "linreg.nope=1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = frm().args(["linreg", "--config", "/nonexistent/cfg.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn linreg_run_writes_reproducible_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("linreg.toml");
    std::fs::write(&cfg, "[linreg]\nalphas = [0.0, 1.0]\ndims = [1]\nn_test = 300\n").unwrap();
    let run = |out: &std::path::Path| {
        let status = frm()
            .args(["linreg", "--seeds", "0..4", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a);
    let rows = std::fs::read_to_string(a.join("rows.csv")).unwrap();
    assert!(rows.starts_with("seed,alpha,dim,method,test_mse\n"));
    assert_eq!(rows.lines().count(), 1 + 4 * 2 * 2);
    assert!(!rows.contains('\r'));
    // the echo alone reproduces the run
    let echo = a.join("config.echo");
    let status = frm()
        .args(["linreg", "--config"])
        .arg(&echo)
        .arg("--out")
        .arg(&b)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
    assert_eq!(rows, std::fs::read_to_string(b.join("rows.csv")).unwrap());
    let summary = std::fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.contains("ratio:erm/frm"));
}
