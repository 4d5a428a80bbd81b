use std::path::Path;
use std::process::{Command, Output};

fn msf_sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msf-sim")).args(args).output().expect("spawn msf-sim")
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "fleet_size = 4\nhorizon_typo = 3\n");
    let out = msf_sim(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizon_typo"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = msf_sim(&["run", "--config", "/nonexistent/scenario.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn overlapping_start_is_initially_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let body = "fleet_size = 2\nduration = 0.1\n\n[initial_conditions]\nkind = \"explicit\"\nstates = [[0.0, 0.0, 0.0], [0.1, 0.0, 3.14]]\n";
    let cfg = write(dir.path(), "overlap.toml", body);
    let out = msf_sim(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn selftest_passes() {
    let out = msf_sim(&["selftest"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(!stdout.contains("FAIL"));
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 5);
}

#[test]
fn run_then_metrics_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let cfg = configs().join("covert.toml");
    let cfg = cfg.to_str().unwrap();
    for format in ["csv", "json"] {
        let run = msf_sim(&["run", "--config", cfg, "--agents", "5", "--duration", "12", "--out", out_dir, "--format", format]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
        let run_out = String::from_utf8_lossy(&run.stdout).to_string();
        assert!(run_out.contains("steps: 600"));

        let log = dir.path().join(format!("log.{format}"));
        let metrics = msf_sim(&["metrics", log.to_str().unwrap(), "--config", cfg]);
        assert!(metrics.status.success(), "{}", String::from_utf8_lossy(&metrics.stderr));
        let m = String::from_utf8_lossy(&metrics.stdout);
        for key in ["min pairwise distance", "min wall clearance", "first alarm: 10.00", "fallback"] {
            let line = |s: &str| s.lines().find(|l| l.starts_with(key.split(':').next().unwrap())).map(str::to_string);
            assert_eq!(line(&run_out), line(&m), "{format}: {key}");
            assert!(m.contains(key), "{format}: {m}");
        }
    }
}

#[test]
fn no_filter_flag_disables_the_filter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("fdi.toml");
    let out = msf_sim(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--no-filter",
        "--agents",
        "3",
        "--duration",
        "11",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0 pass-through, 0 modified, 0 fallback"), "{stdout}");
    let header = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap().split(',').count(), 1 + 7 * 3 + 6);
}

#[test]
fn bad_attack_value_is_rejected() {
    let out = msf_sim(&["run", "--config", "configs/default.toml", "--attack", "replay"]);
    assert_eq!(out.status.code(), Some(2));
}
