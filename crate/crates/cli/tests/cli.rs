use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kronnet::experiment::{ExperimentConfig, EXPERIMENTS};

fn kronnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kronnet"))
        .args(args)
        .env("KRONNET_THREADS", "1")
        .output()
        .expect("spawn kronnet")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every `.csv` under `dir`, sorted by name.
fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn print_config_is_total_for_every_experiment() {
    for name in EXPERIMENTS {
        let o = kronnet(&["print-config", name]);
        assert_eq!(code(&o), 0, "{name}: {}", stderr(&o));
        let text = String::from_utf8(o.stdout).unwrap();
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, ExperimentConfig::named(name).unwrap());
        for section in ["[run]", "[model]", "[optimizer]", "[loss]", "[data]", "[schedule]"] {
            assert!(text.contains(section), "{name} lacks {section}");
        }
    }
}

#[test]
fn config_errors_exit_with_2() {
    let o = kronnet(&["run", "no-such-experiment"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown experiment"));

    let o = kronnet(&["print-config", "helmholtz", "--set", "optimizer.momentun=0.5"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("optimizer.momentun"));

    let o = kronnet(&["print-config", "helmholtz", "--set", "optimizer.lr=fast"]);
    assert_eq!(code(&o), 2);

    let o = kronnet(&["theory", "no-such-check"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn lambda0_with_more_points_than_slots_is_a_precondition_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let o = kronnet(&["theory", "lambda0", "--k", "3", "--m", "4", "--seeds", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("K >= m"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn dldt_identity_report_has_one_passing_row_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dldt.csv");
    let o = kronnet(&["theory", "dldt-identity", "--seeds", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("seed,quantity,lhs,rhs,pass"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], i.to_string());
        assert_eq!(r[4], "true");
        assert!(r[2].parse::<f64>().unwrap() < 1e-3);
    }
}

#[test]
fn failing_theory_rows_exit_with_4() {
    // The exponential-decay bound with rate lambda0 / 2 does not hold in the
    // regime the condition admits; see the README.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cond.csv");
    let o = kronnet(&["theory", "cond-k", "--seeds", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(fs::read_to_string(&out).unwrap().contains("decay-lambda0,"));
}

#[test]
fn non_finite_loss_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = kronnet(&[
        "run",
        "discontinuous",
        "--set",
        "optimizer.kind=gd",
        "--set",
        "optimizer.lr=1e12",
        "--set",
        "optimizer.iterations=200",
        "--set",
        "model.schemes=fixed",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let row = summary.lines().find(|l| l.starts_with("fixed,0,")).unwrap();
    assert!(!row.split(',').nth(6).unwrap().is_empty());
}

#[test]
fn refeeding_printed_config_reproduces_csvs_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let sets = [
        "optimizer.iterations=40".to_string(),
        "run.eval_every=10".to_string(),
        "run.timing=false".to_string(),
        "model.schemes=fixed,llaaf,rowdy3".to_string(),
        "run.seeds=0,1".to_string(),
        format!("run.out_dir={out_s}"),
    ];
    let mut args = vec!["print-config", "discontinuous"];
    for s in &sets {
        args.extend(["--set", s.as_str()]);
    }
    let printed = kronnet(&args);
    assert_eq!(code(&printed), 0, "{}", stderr(&printed));
    let cfg_path = dir.path().join("cfg.toml");
    fs::write(&cfg_path, &printed.stdout).unwrap();

    let mut args = vec!["run", "discontinuous"];
    for s in &sets {
        args.extend(["--set", s.as_str()]);
    }
    let o = kronnet(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = csv_files(&out);
    assert_eq!(first.len(), 3 * 2 * 2 + 1);

    fs::remove_dir_all(&out).unwrap();
    let o = kronnet(&["run", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(csv_files(&out), first);
    assert_eq!(fs::read(out.join("config.toml")).unwrap(), printed.stdout);
}

#[test]
fn seeds_and_out_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = kronnet(&[
        "run",
        "highfreq-1",
        "--set",
        "optimizer.iterations=5",
        "--set",
        "model.schemes=rowdy9",
        "--seeds",
        "4,7",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("rowdy9_seed4.csv").exists());
    assert!(dir.path().join("rowdy9_seed7_pred.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([4, 7]));
}
