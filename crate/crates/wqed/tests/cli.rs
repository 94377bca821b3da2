//! End-to-end behaviour of the `wqed` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn scratch(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("wqed-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn wqed(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wqed"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const G2_SMALL: &str = r#"kind = "g2-dynamics"
seed = 3

[params]
topology = "braided"
atoms = 2
legs = 2
gamma1D = 1.0
varphi = [0.6283185307179586]
epsilon = -6.0
Omega = 4.0
tones = [{ A = 0.07, alpha = 0.0 }, { A = 0.07, alpha = 1.5707963267948966 }]
periods = 4.0
samples_per_period = 10
compare_from = 2.0
"#;

#[test]
fn missing_key_is_config_invalid_with_exit_two() {
    let d = scratch("missing");
    std::fs::write(d.join("s.toml"), G2_SMALL.replace("Omega = 4.0\n", "")).unwrap();
    let o = wqed(&["g2-dynamics", "--config", "s.toml"], &d);
    let err = text(&o.stderr);
    assert_eq!(o.status.code(), Some(2), "{err}");
    assert!(err.contains("ConfigInvalid") && err.contains("Omega"), "{err}");
    assert!(!d.join("runs").exists());
}

#[test]
fn unknown_key_is_named_with_its_line() {
    let d = scratch("unknown");
    std::fs::write(d.join("s.toml"), G2_SMALL.replace("periods =", "perods =")).unwrap();
    let o = wqed(&["g2-dynamics", "--config", "s.toml"], &d);
    let err = text(&o.stderr);
    assert_eq!(o.status.code(), Some(2), "{err}");
    assert!(err.contains("`perods`") && err.contains(":13:"), "{err}");
}

#[test]
fn command_must_match_the_scenario_kind() {
    let d = scratch("kind");
    std::fs::write(d.join("s.toml"), G2_SMALL).unwrap();
    let o = wqed(&["mps-run", "--config", "s.toml"], &d);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("kind"));
}

#[test]
fn validate_lists_every_violation() {
    let d = scratch("validate");
    let bad = r#"kind = "lattice-run"
[params]
t_max = 10.0
packets = [{ k0 = 1.5707963267948966, sigma = 8.0, offset = -2.0 }]
[params.lattice]
N_c = 30
J = 1.0
g = 0.6
atom_sites = [14, 16]
"#;
    std::fs::write(d.join("bad.toml"), bad).unwrap();
    let o = wqed(&["validate", "--config", "bad.toml"], &d);
    let out = text(&o.stdout);
    assert_eq!(o.status.code(), Some(1), "{out}");
    assert!(out.contains("TooCloseToEdge"), "{out}");
    assert!(out.contains("N_c"), "{out}");

    let ok = wqed(&["validate", "--preset", "fig5b"], &d);
    assert!(ok.status.success());
    assert!(text(&ok.stdout).ends_with(": ok\n"));
}

#[test]
fn runs_are_reproducible_and_the_manifest_checksums_match() {
    let d = scratch("repeat");
    std::fs::write(d.join("s.toml"), G2_SMALL).unwrap();
    for out in ["a", "b"] {
        let o = wqed(&["g2-dynamics", "--config", "s.toml", "--out", out], &d);
        assert!(o.status.success(), "{}", text(&o.stderr));
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["status"], "ok");
    let files = manifest["files"].as_array().unwrap();
    assert!(!files.is_empty());
    for f in files {
        let name = f["name"].as_str().unwrap();
        let a = std::fs::read(d.join("a").join(name)).unwrap();
        assert_eq!(a, std::fs::read(d.join("b").join(name)).unwrap(), "{name}");
        assert_eq!(f["sha256"].as_str().unwrap(), format!("{:x}", Sha256::digest(&a)));
    }
    // no temporaries left behind
    for e in std::fs::read_dir(d.join("a")).unwrap() {
        assert!(!e.unwrap().file_name().to_string_lossy().starts_with('.'));
    }
}

#[test]
fn seed_flag_overrides_the_file() {
    let d = scratch("seed");
    std::fs::write(d.join("s.toml"), G2_SMALL).unwrap();
    let o = wqed(&["g2-dynamics", "--config", "s.toml", "--seed", "9", "--out", "o"], &d);
    assert!(o.status.success());
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("o/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
}

#[test]
fn sweep_runs_each_point_in_its_own_directory() {
    let d = scratch("sweep");
    std::fs::write(d.join("s.toml"), G2_SMALL).unwrap();
    std::fs::write(
        d.join("grid.toml"),
        "jobs = 2\n[axes]\n\"params.epsilon\" = [-6.0, -5.0]\n\"params.varphi.0\" = [0.6, 1.9]\n",
    )
    .unwrap();
    let o = wqed(
        &["sweep", "--config", "s.toml", "--grid", "grid.toml", "--out", "sw"],
        &d,
    );
    assert!(o.status.success(), "{}", text(&o.stderr));
    let index = std::fs::read_to_string(d.join("sw/sweep.csv")).unwrap();
    let lines: Vec<&str> = index.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("point,dir,params.epsilon,params.varphi.0,status"));
    for i in 0..4 {
        assert!(d.join(format!("sw/point-{i:04}/g2.csv")).exists());
        assert!(lines[i + 1].contains(",ok,"));
    }

    // a bad point stops the sweep before anything runs
    std::fs::write(d.join("bad.toml"), "[axes]\n\"params.periods\" = [4.0, -1.0]\n").unwrap();
    let o = wqed(
        &["sweep", "--config", "s.toml", "--grid", "bad.toml", "--out", "sw2"],
        &d,
    );
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("point 1"));
    assert!(!d.join("sw2/point-0000").exists());
}
