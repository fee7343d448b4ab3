use std::path::Path;
use std::process::{Command, Output};

fn mgdif(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgdif"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DIFMG_OUT")
        .env_remove("DIFMG_WORKERS")
        .output()
        .unwrap()
}

#[test]
fn simulate_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let out = mgdif(&["simulate", "g2-large_low-dif_b-p20", "--rep", "1", "-o", "data/g2.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let truth = std::fs::read_to_string(dir.path().join("data/g2.truth.json")).unwrap();
    assert!(truth.contains("\"truth\""));

    let out = mgdif(
        &["analyze", "data/g2.csv", "-o", "res.csv", "--methods", "rmsd_predicted,gmh_adjusted"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("res.csv")).unwrap();
    assert!(text.starts_with("condition,rep,method,item"));
    assert!(text.lines().any(|l| l.contains(",rmsd_predicted,")));
    assert!(text.lines().any(|l| l.contains(",gmh_adjusted,")));
}

#[test]
fn run_and_report_honor_output_env() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("plan.toml"),
        "replications = 1\nmethods = [\"rmsd_predicted\", \"rmsd_fixed\"]\n\n[[condition]]\nn_groups = 2\nscenario = \"small_low\"\nstudy = \"dif_free\"\n",
    )
    .unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_mgdif"))
        .args(["run", "--config", "plan.toml"])
        .current_dir(dir.path())
        .env("DIFMG_OUT", "elsewhere")
        .env("DIFMG_WORKERS", "1")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("elsewhere/metrics.csv").exists());

    for format in ["csv", "markdown", "svg"] {
        let out = mgdif(&["report", "--dir", "elsewhere", "--format", format], dir.path());
        assert!(out.status.success(), "{format}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(dir.path().join("elsewhere/report/report.md").exists());
}

#[test]
fn verify_exit_status_follows_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = mgdif(&["verify", "--criteria", "8"], dir.path());
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("criterion 8 PASS"));
    assert!(!mgdif(&["verify", "--criteria", "12"], dir.path()).status.success());
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("plan.toml"), "replication = 3\n").unwrap();
    let out = mgdif(&["run", "--config", "plan.toml"], dir.path());
    assert!(!out.status.success());
}
