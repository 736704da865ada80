use std::fs;
use std::process::{Command, Output};

fn koopmon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_koopmon")).args(args).output().unwrap()
}

#[test]
fn presets_lists_all_benchmarks() {
    let out = koopmon(&["presets"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["tully1", "tully2", "tully3", "rabi_us", "rabi_ds"] {
        assert!(text.contains(name), "{name}");
    }
}

#[test]
fn run_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "preset = \"rabi_ds\"\nn = 40\nt_final = 2\nsnapshot_times = [0, 1, 2]\n").unwrap();
    for (dir, method) in [(&a, "koopmon"), (&b, "ehrenfest")] {
        let out = koopmon(&["run", cfg.to_str().unwrap(), "--method", method, "--out", dir.to_str().unwrap(), "--workers", "2"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.join("manifest.json").is_file());
    }
    let out = koopmon(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("max |dP1|"));

    let c = tmp.path().join("c");
    let out = koopmon(&["run", "--preset", "tully1", "--method", "ehrenfest", "--set", "n=10", "--set", "t_final=20", "--set", "snapshot_times=[]", "--out", c.to_str().unwrap()]);
    assert!(out.status.success());
    let out = koopmon(&["compare", a.to_str().unwrap(), c.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "preset = \"tully1\"\nmethod = \"koopmon\"\nbogus = 3\n").unwrap();
    let out = koopmon(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains(":3:"));

    let out = koopmon(&["run", "--preset", "tully1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("method"));

    let out = koopmon(&["run", tmp.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn solver_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("x");
    let out = koopmon(&[
        "run", "--preset", "rabi_us", "--method", "koopmon", "--set", "n=20", "--set", "dt=2.5", "--set", "drift_tolerance=1e-6",
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let manifest = fs::read_to_string(out_dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"partial\": true"));
}
