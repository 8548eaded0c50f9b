use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pillsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pillsim")).args(args).output().unwrap()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Short D1 run written to `dir`.
fn short_config(dir: &Path, name: &str, extra: &[(&str, &str)]) -> PathBuf {
    let text = fs::read_to_string(configs_dir().join("d1_fltrust_trim_augmented.json")).unwrap();
    let mut tree: serde_json::Value = serde_json::from_str(&text).unwrap();
    tree["rounds"] = 3.into();
    for (k, v) in extra {
        tree[*k] = serde_json::from_str(v).unwrap();
    }
    let path = dir.join(name);
    fs::write(&path, tree.to_string()).unwrap();
    path
}

#[test]
fn run_writes_logs_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), "a.json", &[]);
    let out_dir = dir.path().join("out");
    let out = pillsim(&["run", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));

    let csv = fs::read_to_string(out_dir.join("log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 20);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["error_rates"].as_array().unwrap().len(), 1 + 3);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let final_error: f64 = stdout.trim().rsplit('\t').next().unwrap().parse().unwrap();
    assert_eq!(final_error, summary["final_error_rate"].as_f64().unwrap());
}

#[test]
fn seed_and_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), "a.json", &[]);
    let run = |out: &str, extra: &[&str]| {
        let out_dir = dir.path().join(out);
        let mut args = vec!["run", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        let res = pillsim(&args);
        assert!(res.status.success(), "{}", stderr(&res));
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
        summary["config"].clone()
    };
    let config = run("o1", &["--seed", "9", "--override", "attack.kind=min_max", "--override", "rounds=2"]);
    assert_eq!(config["seed"], 9);
    assert_eq!(config["attack"]["kind"], "min_max");
    assert_eq!(config["rounds"], 2);
    let csv = fs::read_to_string(dir.path().join("o1/log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 20);
}

#[test]
fn same_config_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), "a.json", &[]);
    for out in ["x", "y"] {
        let o = dir.path().join(out);
        assert!(pillsim(&["run", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()]).status.success());
    }
    let read = |d: &str| fs::read(dir.path().join(d).join("log.csv")).unwrap();
    assert_eq!(read("x"), read("y"));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(pillsim(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(pillsim(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let cfg = short_config(dir.path(), "a.json", &[]);
    let out = pillsim(&["run", "--config", cfg.to_str().unwrap(), "--override", "malicious=50"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = pillsim(&["run", "--config", cfg.to_str().unwrap(), "--override", "no_equals_sign"]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(pillsim(&["sweep", "--configs", dir.path().join("empty").to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    // strict Bulyan cannot aggregate 8 participants with 4 assumed attackers
    let cfg = short_config(dir.path(), "a.json", &[("participation", "0.4")]);
    let out = pillsim(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--override",
        "defense.kind=bulyan",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("runtime error"));
}

#[test]
fn sweep_runs_every_config_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let configs = dir.path().join("configs");
    fs::create_dir(&configs).unwrap();
    short_config(&configs, "b.json", &[("seed", "2")]);
    short_config(&configs, "a.json", &[("seed", "1")]);
    fs::write(configs.join("notes.txt"), "ignored").unwrap();
    let out_dir = dir.path().join("out");
    let out = pillsim(&["sweep", "--configs", configs.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].contains("/a/") && lines[1].contains("/b/"));
    for name in ["a", "b"] {
        assert!(out_dir.join(name).join("log.csv").exists());
        assert!(out_dir.join(name).join("summary.json").exists());
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let out = pillsim(&[
            "run",
            "--config",
            path.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
            "--override",
            "rounds=1",
        ]);
        assert!(out.status.success(), "{}: {}", path.display(), stderr(&out));
    }
}
