use std::path::Path;
use std::process::{Command, Output};

fn fpsi(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpsi"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn config_errors_exit_4_and_list_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        "[physics]\na = 3.0\nq = 4.0\n[scheme]\ntau = 0.003\n",
    );
    let out = fpsi(&["fpsi", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("a > 2q/(q-2) = 4"), "{err}");
    assert!(err.contains("h/tau"), "{err}");

    let cfg = write(dir.path(), "typo.toml", "[scheme]\ntua = 0.1\n");
    let out = fpsi(&["fpsi", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = fpsi(&["fpsi", "--tau", "0.003"], dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fpsi(&["fpsi", "--config", "nope.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

const EQUILIBRIUM: &str = r#"
[domain]
solid_nodes = [7, 7]
container_nodes = [13, 13]
pinning = "none"
[scheme]
tau = 0.01
h = 0.05
horizon = 0.1
[initial]
eta0 = { kind = "equilibrium-dilation" }
b = { kind = "zero" }
[force]
kind = "zero"
"#;

#[test]
fn equilibrium_run_gives_a_constant_ledger_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "eq.toml", EQUILIBRIUM);
    let out = fpsi(
        &["fpsi", "--config", &cfg, "--out", "run", "--snapshot-every", "5"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("# effective config") && stdout.contains("[physics]"));

    let ledger = std::fs::read_to_string(dir.path().join("run/ledger.csv")).unwrap();
    let rows: Vec<Vec<&str>> = ledger.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 10);
    for r in &rows {
        // everything but window, step and time is constant
        assert_eq!(r[3..], rows[0][3..]);
        assert_eq!(r[4], "converged");
    }
    let run = dir.path().join("run");
    assert!(run.join("snapshots/solid_000000.txt").exists());
    assert!(run.join("snapshots/fluid_000010.txt").exists());
    let manifest = std::fs::read_to_string(run.join("manifest.toml")).unwrap();
    let m: toml::Table = toml::from_str(&manifest).unwrap();
    let hash = m["outputs"]["ledger.csv"].as_str().unwrap();
    assert_eq!(hash, fpsi::cli::content_hash(ledger.as_bytes()));
    assert_eq!(
        m["inputs"]["config"].as_str().unwrap(),
        fpsi::cli::content_hash(EQUILIBRIUM.as_bytes())
    );
    // the echoed config re-parses to the effective one
    let echoed: fpsi::config::RunConfig = m["config"].clone().try_into().unwrap();
    assert_eq!(echoed.domain.solid_nodes, [7, 7]);
    assert_eq!(echoed.output.dir, Path::new("run"));
}

#[test]
fn initial_contact_exits_2_with_the_collision_time() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "wall.toml",
        "[domain]\nsolid_nodes = [7, 7]\ncontainer_nodes = [13, 13]\ncontainer = [-0.5, -0.5, 1.005, 1.5]\n[scheme]\ntau = 0.01\nh = 0.05\nhorizon = 0.1\n",
    );
    let out = fpsi(&["fpsi", "--config", &cfg, "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("T* = 0"));
}

#[test]
fn content_hash_matches_git_sha256_objects() {
    // sha256 of "blob 6\0hello\n"
    assert_eq!(
        fpsi::cli::content_hash(b"hello\n"),
        "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
    );
}

#[test]
fn toy_writes_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = fpsi(
        &[
            "toy",
            "--energy",
            "quadratic",
            "--tau",
            "0.001",
            "--h",
            "0.01",
            "--horizon",
            "1",
            "--out",
            "toy",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "toy_two_scale.csv",
        "toy_naive.csv",
        "toy_reference.csv",
        "toy_windows.csv",
        "manifest.toml",
    ] {
        assert!(dir.path().join("toy").join(f).exists(), "{f}");
    }
    let windows = std::fs::read_to_string(dir.path().join("toy/toy_windows.csv")).unwrap();
    assert!(windows.lines().skip(1).all(|l| l.ends_with("true")));
}

#[test]
fn check_passes_on_a_fresh_build() {
    let dir = tempfile::tempdir().unwrap();
    let out = fpsi(&["check", "--states", "5", "--out", "chk"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let s = String::from_utf8_lossy(&out.stdout);
    assert!(!s.contains("FAIL") && s.matches("PASS").count() == 10, "{s}");
}

#[test]
fn study_table_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "study.toml",
        "[toy]\nx0 = [1.0, 0.0]\nxstar = [0.0, 0.5]\n[study]\ntoy_hs = [0.1, 0.05, 0.025]\nfpsi_levels = [[0.02, 0.04], [0.01, 0.04], [0.005, 0.04]]\n",
    );
    let out = fpsi(&["study", "--config", &cfg, "--out", "st"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("st/study.csv")).unwrap();
    let two_scale: Vec<&str> = table.lines().filter(|l| l.starts_with("toy-two-scale")).collect();
    assert_eq!(two_scale.len(), 6);
    assert!(two_scale.iter().all(|l| l.ends_with(",true")));
    let fpsi_rows: Vec<f64> = table
        .lines()
        .filter(|l| l.starts_with("fpsi,"))
        .skip(1)
        .map(|l| l.split(',').nth(5).unwrap().parse().unwrap())
        .collect();
    assert_eq!(fpsi_rows.len(), 2);
    assert!(fpsi_rows[1] < fpsi_rows[0]);
}

#[test]
fn mid_run_collision_exits_2_and_keeps_the_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "push.toml",
        "[domain]\nsolid_nodes = [7, 7]\ncontainer_nodes = [13, 13]\ncontainer = [-0.5, -0.5, 1.1, 1.5]\n\
         [scheme]\ntau = 0.01\nh = 0.05\nhorizon = 1.0\n[initial]\nb = { kind = \"compression\", rate = -3.0 }\n\
         [force]\nkind = \"zero\"\n",
    );
    let out = fpsi(&["fpsi", "--config", &cfg, "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("collision at T* = 0.07"), "{stdout}");
    assert!(dir.path().join("run/ledger.csv").exists());
}
