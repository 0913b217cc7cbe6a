use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use afcl_core::checkpoint;
use afcl_core::train::{TrainConfig, CONFIG_KEYS};
use serde_json::Value;

fn afcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afcl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = afcl(args);
    assert_eq!(code(&o), 0, "{args:?} failed: {}", stderr(&o));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, prefix: &str, count: &str) {
    ok(&["gen-data", "--out", p(dir), "--count", count, "--size", "32", "--prefix", prefix, "--seed", "5"]);
}

fn run_json(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

/// Flags for a one-epoch run at the smallest input size.
const QUICK: [&str; 6] = ["--epochs", "1", "--input-size", "32", "--batch-size", "3"];

#[test]
fn help_exits_zero_and_lists_commands() {
    let o = ok(&["--help"]);
    for cmd in ["gen-data", "select-k", "train", "eval", "ablate", "robustness", "model-info"] {
        assert!(stdout(&o).contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn every_config_key_has_a_documented_flag() {
    let help = stdout(&ok(&["train", "--help"]));
    for key in CONFIG_KEYS {
        let flag = format!("--{}", key.replace('_', "-"));
        let line = help
            .lines()
            .position(|l| l.trim_start().starts_with(&format!("{flag} ")))
            .unwrap_or_else(|| panic!("{flag} not in train --help"));
        let doc = help.lines().nth(line + 1).unwrap_or("").trim();
        assert!(!doc.is_empty(), "{flag} has no description");
    }
}

#[test]
fn usage_errors_exit_one() {
    let o = afcl(&["train"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--dataset"), "{}", stderr(&o));

    assert_eq!(code(&afcl(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&afcl(&["train", "--dataset", "x", "--epochs", "0"])), 1);
    assert_eq!(code(&afcl(&["train", "--dataset", "x", "--views", "crop"])), 1);
    assert_eq!(code(&afcl(&["ablate", "--views", "msvg,bogus", "--dataset", "x"])), 1);
    assert_eq!(code(&afcl(&["gen-data", "--kinds", "splice,warp"])), 1);
    assert_eq!(code(&afcl(&["robustness", "--distortions", "smear:3"])), 1);
    let o = afcl(&["eval", "--dataset", "x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--checkpoint"));
}

#[test]
fn runtime_failures_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let o = afcl(&["train", "--dataset", p(&missing), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let data = tmp.path().join("data");
    gen(&data, "a", "3");
    let o = afcl(&["eval", "--dataset", p(&data), "--checkpoint", p(&missing), "--out", p(&tmp.path().join("e"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_data_is_reproducible_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "s", "4");
    gen(&b, "s", "4");
    let (ra, rb) = (run_json(&a), run_json(&b));
    assert_eq!(ra["artifacts"], rb["artifacts"]);
    assert_eq!(ra["seed"], 5);
    let artifacts = ra["artifacts"].as_object().unwrap();
    assert!(artifacts.contains_key("manifest.jsonl"));
    assert_eq!(artifacts.len(), 1 + 2 * 4);
    assert_eq!(fs::read_to_string(a.join("manifest.jsonl")).unwrap().lines().count(), 4);
}

#[test]
fn train_eval_and_rerun_from_recorded_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (train, test) = (tmp.path().join("train"), tmp.path().join("test"));
    gen(&train, "tr", "6");
    gen(&test, "te", "3");
    let out = tmp.path().join("run");
    let mut args = vec!["train", "--dataset", p(&train), "--test-dataset", p(&test), "--out", p(&out), "--seed", "3"];
    args.extend(QUICK);
    ok(&args);
    for f in ["checkpoint.afcl", "loss.csv", "config.txt", "per_image.csv", "summary.csv", "run.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let rec = run_json(&out);
    assert_eq!(rec["command"], "train");
    assert_eq!(rec["config"]["epochs"], "1");
    assert_eq!(fs::read_to_string(out.join("loss.csv")).unwrap().lines().count(), 2);

    // the recorded config alone reproduces the checkpoint bit for bit
    let again = tmp.path().join("again");
    ok(&["train", "--config", p(&out.join("config.txt")), "--out", p(&again)]);
    assert_eq!(run_json(&again)["artifacts"]["checkpoint.afcl"], rec["artifacts"]["checkpoint.afcl"]);

    let ev = tmp.path().join("eval");
    let ckpt = out.join("checkpoint.afcl");
    ok(&["eval", "--dataset", p(&test), "--checkpoint", p(&ckpt), "--input-size", "32", "--out", p(&ev)]);
    assert_eq!(
        fs::read_to_string(ev.join("summary.csv")).unwrap(),
        fs::read_to_string(out.join("summary.csv")).unwrap()
    );
    assert!(run_json(&ev)["inputs"].as_object().unwrap().contains_key(p(&ckpt)));
}

#[test]
fn model_info_lists_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ok(&["model-info", "--out", p(tmp.path())]);
    let text = stdout(&o);
    assert!(text.contains("encoder.0.weight\t16x3x3x3\t432"));
    assert!(text.contains("trm.m0\t64x32\t2048"));
    let o = ok(&["model-info", "--trm", "false", "--out", p(tmp.path())]);
    assert!(!stdout(&o).contains("trm.m0"));
}

#[test]
fn ablate_rows_match_per_run_evaluations() {
    let tmp = tempfile::tempdir().unwrap();
    let (train, test) = (tmp.path().join("train"), tmp.path().join("test"));
    gen(&train, "tr", "4");
    gen(&test, "te", "2");
    let out = tmp.path().join("abl");
    let mut args = vec![
        "ablate", "--views", "msvg-notrm,randomcrop", "--seeds", "2", "--dataset", p(&train), "--test-dataset",
        p(&test), "--out", p(&out),
    ];
    args.extend(QUICK);
    let o = ok(&args);
    assert!(stdout(&o).contains("median F1"));

    let rows = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<String>> = rows.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        let dir = out.join("runs").join(format!("{}-seed{}", r[0], r[1]));
        let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
        let f1 = summary.lines().nth(1).unwrap().split(',').nth(1).unwrap();
        assert_eq!(f1, r[2], "{dir:?}");
        let names: Vec<String> = checkpoint::load(&dir.join("checkpoint.afcl")).unwrap().into_iter().map(|e| e.0).collect();
        assert_eq!(names.iter().any(|n| n == "trm.m0"), !r[0].ends_with("-notrm"));
    }
    let medians = fs::read_to_string(out.join("ablation_median.csv")).unwrap();
    for line in medians.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let mut f1s: Vec<f64> = rows.iter().filter(|r| r[0] == cols[0]).map(|r| r[2].parse().unwrap()).collect();
        f1s.sort_by(f64::total_cmp);
        assert_eq!(cols[1], "2");
        assert_eq!(cols[2].parse::<f64>().unwrap(), 0.5 * (f1s[0] + f1s[1]));
    }
}

#[test]
fn robustness_and_select_k() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "d", "3");
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--dataset", p(&data), "--out", p(&run)];
    args.extend(QUICK);
    ok(&args);
    let ckpt = run.join("checkpoint.afcl");

    let rob = tmp.path().join("rob");
    ok(&[
        "robustness", "--distortions", "identity,blur:3,jpeg:50", "--dataset", p(&data), "--checkpoint", p(&ckpt),
        "--input-size", "32", "--out", p(&rob),
    ]);
    let csv = fs::read_to_string(rob.join("robustness.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "distortion,f1,auc,delta_f1,delta_auc");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("None,"));
    let identity: Vec<&str> = lines[2].split(',').collect();
    assert_eq!((identity[3], identity[4]), ("0", "0"));

    let sk = tmp.path().join("sk");
    let o = ok(&["select-k", "--dataset", p(&data), "--input-size", "32", "--out", p(&sk)]);
    assert!(stdout(&o).starts_with("chosen k = "));
    let csv = fs::read_to_string(sk.join("k_selection.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "k,S12,S2min,absdiff");
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.lines().last().unwrap().starts_with("1,0,"));
    assert!(sk.join("embeddings.json").is_file());
}

#[test]
fn shipped_toy_config_matches_the_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.conf");
    let text = fs::read_to_string(path).unwrap();
    let parsed = TrainConfig::from_text(&text).unwrap();
    let expect = TrainConfig {
        dataset: Some("data/train".into()),
        test_dataset: Some("data/test".into()),
        ..TrainConfig::toy()
    };
    assert_eq!(parsed, expect);
}
