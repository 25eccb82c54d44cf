use std::path::Path;
use std::process::{Command, Output};

const GRID: &str = "[grid]\nextents = [[0.0, 1.0]]\nnodes = [17]\nhorizon = 1.0\ntime_nodes = 17\n";

fn run(dir: &Path, name: &str, body: &str, extra: &[&str]) -> Output {
    let cfg = dir.join(format!("{name}.toml"));
    std::fs::write(&cfg, body).unwrap();
    Command::new(env!("CARGO_BIN_EXE_mfglab"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join(name))
        .args(extra)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn solve_passes_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "solve", &format!("command = \"solve\"\n{GRID}"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["config.json", "report.json", "residuals.csv", "solution.csv", "manifest.json"] {
        assert!(dir.path().join("solve").join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(dir.path().join("solve/solution.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("n,t,x0,u,m"));
    assert_eq!(csv.lines().count(), 1 + 17 * 17);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("solve/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["pass"], true);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 4);
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "bad", &format!("command = \"solve\"\n{GRID}[solver]\ntheta = 0.5\nthetta = 1.0\n"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("solver"), "{}", stderr(&o));
}

#[test]
fn invalid_k_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("command = \"stability\"\n{GRID}[stability]\nproblem_id = \"P1\"\nepsilon = 0.5\nk = 2.0\ndelta_levels = [0.1, 0.01, 0.001, 0.0001]\n");
    let o = run(dir.path(), "k", &body, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stability.k"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_mfglab")).args(["--config", "/nonexistent/run.toml"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn blow_up_is_a_numerical_abort() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("command = \"solve\"\n{GRID}[problem.bounds]\nd1 = 10.0\nd2 = 10.0\nd3 = 0.01\nd4 = 0.01\n");
    let o = run(dir.path(), "blow", &body, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).to_lowercase().contains("hjb"), "{}", stderr(&o));
}

#[test]
fn unmet_tolerance_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("command = \"reconstruct\"\n{GRID}[reconstruct]\nproblem_id = \"P1\"\nouter_iters = 1\nerror_tolerance = 1e-300\n");
    let o = run(dir.path(), "strict", &body, &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(dir.path().join("strict/iterations.csv").exists());
}

#[test]
fn seed_flag_overrides_config_and_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "command = \"stability\"\nseed = 1\n{GRID}[stability]\nproblem_id = \"P1\"\nepsilon = 0.5\ndelta_levels = [0.1, 0.01, 0.001, 0.0001]\n"
    );
    let a = run(dir.path(), "a", &body, &[]);
    let b = run(dir.path(), "b", &body, &["--seed", "1"]);
    let c = run(dir.path(), "c", &body, &["--seed", "2", "--threads", "1"]);
    for o in [&a, &b, &c] {
        assert!(matches!(o.status.code(), Some(0 | 1)), "{}", stderr(o));
    }
    let read = |n: &str| std::fs::read(dir.path().join(n).join("stability.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("c/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 2);
}

#[test]
fn verify_reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "command = \"verify\"\nseed = 4\n{GRID}[verify]\nestimates = [\"T3.1\", \"L3.1\"]\nlambdas = [5.0, 10.0]\n\n[verify.family]\ncount = 4\n\n[verify.lemma]\nfields = 3\n\n[verify.lemma.spectrum]\nmode_cap = 3\ndecay = 2.0\n"
    );
    let a = run(dir.path(), "a", &body, &[]);
    let b = run(dir.path(), "b", &body, &[]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(b.status.code(), Some(0));
    for f in ["config.json", "report.json", "margins.csv", "lemma_gaps.csv"] {
        let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}
