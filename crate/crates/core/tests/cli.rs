use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tailsampler::cli::RunManifest;

fn tool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tailsampler"))
        .args(args)
        .env_remove("TAILSAMPLER_SEED")
        .output()
        .unwrap()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn simulate_twice_gives_identical_digests() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        let o = tool(&["simulate", "--strategy", "rio", "--epochs", "3", "--seed", "7", "--out-dir", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (a, b) = (manifest(&dirs[0]), manifest(&dirs[1]));
    assert_eq!(a, b);
    assert_eq!(a.seed, Some(7));
    let names: Vec<&str> = a.outputs.iter().map(|o| o.path.as_str()).collect();
    for f in ["report.json", "fig4a.csv", "fig4b.csv", "fig4c.csv", "fig4d.csv", "staleness.csv"] {
        assert!(names.contains(&f), "{f} missing from {names:?}");
    }
}

#[test]
fn missing_dataset_exits_2_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let o = tool(&["analyze", "--dataset", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(missing.to_str().unwrap()));
}

#[test]
fn invalid_overrides_fail_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o_str = out.to_str().unwrap();
    for args in [
        vec!["simulate", "--strategy", "rio", "--x", "0", "--out-dir", o_str],
        vec!["simulate", "--strategy", "ocs", "--rfs-t", "2", "--out-dir", o_str],
        vec!["simulate", "--strategy", "warp", "--out-dir", o_str],
        vec!["simulate", "--out-dir", o_str],
    ] {
        let o = tool(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
    assert!(!out.exists());

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[sim]\nstrategy = \"rio\"\nbogus = 3\n").unwrap();
    let o = tool(&["simulate", "--config", cfg.to_str().unwrap(), "--out-dir", o_str]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn baseline_has_no_augmentation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let o = tool(&["simulate", "--strategy", "baseline", "--epochs", "2", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success());
    let rows = rows(&out.join("fig4d.csv"));
    assert!(!rows.is_empty());
    for r in rows {
        // augmented_per_epoch column
        assert_eq!(r[6].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[5], r[7]);
    }
}

#[test]
fn x_sweep_raises_rare_augmentation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let o = tool(&["simulate", "--strategy", "rio", "--epochs", "2", "--x", "5..30", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = rows(&out.join("sweep.csv"));
    let xs: Vec<u64> = sweep.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(xs, (5..=30).collect::<Vec<_>>());
    let aug: Vec<u64> = sweep.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(aug.windows(2).all(|w| w[0] < w[1]), "{aug:?}");
    assert!(out.join("x17/report.json").exists());
}

#[test]
fn seed_precedence_is_flag_over_env_over_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "seed = 3\n[sim]\nstrategy = \"ocs\"\nepochs = 1\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let run = |extra: &[&str], env: Option<&str>, name: &str| {
        let out = tmp.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tailsampler"));
        cmd.args(["simulate", "--config", cfg, "--out-dir", out.to_str().unwrap()]).args(extra);
        match env {
            Some(v) => cmd.env("TAILSAMPLER_SEED", v),
            None => cmd.env_remove("TAILSAMPLER_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        manifest(&out).seed
    };
    assert_eq!(run(&[], None, "file"), Some(3));
    assert_eq!(run(&[], Some("5"), "env"), Some(5));
    assert_eq!(run(&["--seed", "9"], Some("5"), "flag"), Some(9));
}

#[test]
fn compare_writes_tables_and_rejects_a_single_report() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    for s in ["baseline", "rfs"] {
        let d = root.join(s);
        assert!(tool(&["simulate", "--strategy", s, "--epochs", "2", "--out-dir", d.to_str().unwrap()]).status.success());
    }
    let a = root.join("baseline/report.json");
    let b = root.join("rfs/report.json");
    let out = root.join("cmp");
    let o = tool(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let frequent = rows(&out.join("fig4b.csv"))
        .into_iter()
        .find(|r| &r[0] == "1" && &r[2] == "frequent")
        .unwrap();
    assert!(frequent[6].parse::<f64>().unwrap() > 0.0);

    let o = tool(&["compare", a.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generate_then_analyze_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = tmp.path().join("gen");
    assert!(tool(&["generate", "--out-dir", gen.to_str().unwrap()]).status.success());
    let data = gen.join("dataset.json");
    let an = tmp.path().join("an");
    let o = tool(&["analyze", "--dataset", data.to_str().unwrap(), "--out-dir", an.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read(gen.join("index.json")).unwrap(), fs::read(an.join("index.json")).unwrap());
    let synthetic = tool(&["analyze"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(
        text.lines().find(|l| l.starts_with("bins")),
        String::from_utf8_lossy(&synthetic.stdout).lines().find(|l| l.starts_with("bins"))
    );
}
