use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use ncgnn::data::import_sparse;

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy() -> String {
    repo().join("fixtures/toy").display().to_string()
}

fn ncgnn<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncgnn"))
        .args(args)
        .env_remove("NCGNN_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_json(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().expect("stderr has the error object");
    serde_json::from_str(line).expect("error is JSON")
}

fn only_subdir(dir: &Path) -> PathBuf {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1, "{entries:?}");
    entries.pop().unwrap()
}

fn toy_train(out: &Path, extra: &[&str]) -> Output {
    let cfg = repo().join("configs/toy.json").display().to_string();
    let out = out.display().to_string();
    let mut args = vec![
        "train", "--dataset", &toy(), "--config", &cfg, "--epochs", "5", "--train-per-class", "4",
        "--val-size", "6", "--out-dir", &out,
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    args.extend(extra.iter().map(|s| s.to_string()));
    ncgnn(&args)
}

#[test]
fn ppr_filter_respects_top_k_and_hits_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let args = [
        "prepare-filter", "--dataset", &toy(), "--mode", "ppr", "--alpha", "0.1", "--truncate", "20",
        "--sparsify", "topk:8", "--out", &out,
    ];
    let first = ncgnn(&args);
    assert!(first.status.success(), "{first:?}");
    let dir = only_subdir(tmp.path());
    let m = import_sparse(&dir.join("ppr.txt")).unwrap();
    assert!((0..m.n_rows()).all(|r| m.row_nnz(r) <= 8));
    let before = std::fs::metadata(dir.join("ppr.txt")).unwrap().modified().unwrap();

    let second = ncgnn(&args);
    assert!(second.status.success());
    assert!(stdout(&second).starts_with("cache hit"), "{}", stdout(&second));
    assert_eq!(std::fs::metadata(dir.join("ppr.txt")).unwrap().modified().unwrap(), before);
}

#[test]
fn attention_filter_writes_one_file_per_hop() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let o = ncgnn(&["prepare-filter", "--dataset", &toy(), "--mode", "attention", "--max-hop", "5", "--out", &out]);
    assert!(o.status.success(), "{o:?}");
    let dir = only_subdir(tmp.path());
    for h in 1..=5 {
        assert!(dir.join(format!("hop{h}.txt")).is_file());
    }
    assert!(!dir.join("hop6.txt").exists());
}

#[test]
fn mode_specific_flags_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let o = ncgnn(&["prepare-filter", "--dataset", &toy(), "--mode", "attention", "--alpha", "0.1", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["kind"], "usage");
    let o = ncgnn(&["prepare-filter", "--dataset", &toy(), "--mode", "ppr", "--max-hop", "3", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    let o = ncgnn(&["prepare-filter", "--dataset", &toy(), "--sparsify", "top:3", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn unknown_flags_fail_and_help_lists_flags() {
    let o = ncgnn(&["train", "--dataset", &toy(), "--out-dir", "x", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let help = stdout(&ncgnn(&["train", "--help"]));
    for flag in ["--dataset", "--config", "--split-seed", "--weight-seed", "--out-dir", "--max-hop", "--sparsify"] {
        assert!(help.contains(flag), "train --help lacks {flag}");
    }
    for cmd in ["prepare-filter", "eval", "sweep", "explain", "gradcheck", "synth"] {
        let o = ncgnn(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd} --help");
    }
    assert!(!stdout(&ncgnn(&["gradcheck", "--help"])).contains("corrupt"));
}

#[test]
fn toy_training_is_fast_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = toy_train(tmp.path(), &["--learning-rate", "0.02"]);
    assert!(o.status.success(), "{o:?}");
    assert!(start.elapsed().as_secs_f64() < 5.0);
    for f in ["checkpoint.json", "history.jsonl", "report.json"] {
        assert!(tmp.path().join(f).is_file(), "{f} missing");
    }
    let history = std::fs::read_to_string(tmp.path().join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 5);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("report.json")).unwrap()).unwrap();
    // flags override the config file and the effective values are echoed
    assert_eq!(report["config"]["learning_rate"], 0.02);
    assert_eq!(report["config"]["epochs"], 5);
    assert_eq!(report["config"]["n_primary"], 2);
    assert_eq!(report["runs"][0]["history_ref"], "history.jsonl");
}

#[test]
fn missing_dataset_exits_2_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no-such-dataset");
    let out = tmp.path().join("out");
    let o = ncgnn(&[
        "train", "--dataset", &missing.display().to_string(), "--out-dir", &out.display().to_string(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = error_json(&o);
    assert_eq!(err["error"]["path"], missing.display().to_string());
    assert!(!out.exists());
}

#[test]
fn fixed_seeds_give_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = toy_train(dir, &["--split-seed", "3", "--weight-seed", "7"]);
        assert!(o.status.success(), "{o:?}");
    }
    for f in ["checkpoint.json", "history.jsonl", "report.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let c = tmp.path().join("c");
    assert!(toy_train(&c, &["--split-seed", "3", "--weight-seed", "8"]).status.success());
    assert_ne!(std::fs::read(a.join("checkpoint.json")).unwrap(), std::fs::read(c.join("checkpoint.json")).unwrap());
}

#[test]
fn cached_filter_gives_the_same_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache").display().to_string();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert!(toy_train(&a, &[]).status.success());
    assert!(toy_train(&b, &["--filter-cache", &cache]).status.success());
    assert!(toy_train(&c, &["--filter-cache", &cache]).status.success());
    let ck = |d: &Path| std::fs::read(d.join("checkpoint.json")).unwrap();
    assert_eq!(ck(&a), ck(&b));
    assert_eq!(ck(&b), ck(&c));
}

#[test]
fn eval_and_explain_read_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert!(toy_train(&run, &[]).status.success());
    let ck = run.join("checkpoint.json").display().to_string();
    let eval_out = tmp.path().join("eval.json");
    let o = ncgnn(&[
        "eval", "--dataset", &toy(), "--checkpoint", &ck, "--train-per-class", "4", "--val-size", "6",
        "--out", &eval_out.display().to_string(),
    ]);
    assert!(o.status.success(), "{o:?}");
    let eval: serde_json::Value = serde_json::from_slice(&std::fs::read(&eval_out).unwrap()).unwrap();
    let acc = eval["test_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"][0]["test_accuracy"].as_f64().unwrap(), acc);

    let ex = tmp.path().join("explain");
    let o = ncgnn(&["explain", "--dataset", &toy(), "--checkpoint", &ck, "--out-dir", &ex.display().to_string()]);
    assert!(o.status.success(), "{o:?}");
    let bundle: serde_json::Value =
        serde_json::from_slice(&std::fs::read(ex.join("explanations.json")).unwrap()).unwrap();
    for row in bundle["explanation"]["coupling_summary"].as_array().unwrap() {
        let s: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-10);
    }
    let tsv = std::fs::read_to_string(ex.join("embeddings.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 24);
    let csv = std::fs::read_to_string(ex.join("coupling.csv")).unwrap();
    assert!(csv.starts_with("class,k0,k1\n"));
}

#[test]
fn gradcheck_passes_fails_on_corruption_and_marks_unused() {
    let start = Instant::now();
    let o = ncgnn(&["gradcheck", "--size", "tiny"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(start.elapsed().as_secs_f64() < 60.0);

    let o = ncgnn(&["gradcheck", "--size", "tiny", "--corrupt-adjoint", "1.5"]);
    assert_eq!(o.status.code(), Some(1));

    let o = ncgnn(&["gradcheck", "--size", "tiny", "--filter", "ppr"]);
    assert!(o.status.success());
    let zeta = stdout(&o).lines().find(|l| l.starts_with("zeta")).unwrap().to_string();
    assert!(zeta.ends_with("unused"), "{zeta}");
}

#[test]
fn synth_then_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("sbm").display().to_string();
    let o = ncgnn(&["synth", "--n-per-class", "30", "--seed", "4", "--out", &data]);
    assert!(o.status.success(), "{o:?}");
    let out = tmp.path().join("sweep.json");
    let o = ncgnn(&[
        "sweep", "--dataset", &data, "--epochs", "3", "--n-primary", "2", "--primary-dim", "4", "--class-dim", "4",
        "--train-per-class", "5", "--val-size", "10", "--splits", "2", "--seeds", "2", "--hops", "1,2",
        "--out", &out.display().to_string(),
    ]);
    assert!(o.status.success(), "{o:?}");
    let reports: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[1]["config"]["filter"]["max_hop"], 2);
    assert_eq!(reports[0]["runs"].as_array().unwrap().len(), 4);
    let o = ncgnn(&["sweep", "--dataset", &data, "--hops", "2", "--mode", "ppr", "--out", "x.json"]);
    assert_eq!(o.status.code(), Some(2));
}
