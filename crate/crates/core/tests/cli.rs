//! End-to-end runs of the `spacefusion` binary on a small synthetic corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spacefusion"));
    c.env_remove("SPACEFUSION_PRECISION");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

impl Fixture {
    fn data(&self) -> &Path {
        &self.data
    }
    fn ckpt(&self) -> &Path {
        &self.ckpt
    }
}

/// Corpus plus one tiny trained checkpoint, shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Fixture { _dir: dir, data: root.join("data"), ckpt: root.join("ckpt"), root };
        ok(&["synth", "--contexts", "40", "--seed", "4", "--out", s(f.data())]);
        train_into(&f, f.ckpt(), &[]);
        f
    })
}

fn train_into(f: &Fixture, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train", "--data", s(f.data()), "--profile", "desk", "--hidden", "8", "--epochs", "2", "--seed", "5", "--out", s(out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

fn kv(path: &Path) -> Vec<(String, String)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn value(path: &Path, key: &str) -> Option<String> {
    kv(path).into_iter().find(|(k, _)| k == key).map(|(_, v)| v)
}

#[test]
fn synth_is_reproducible_and_guarded() {
    let f = fixture();
    let again = f.root.join("data2");
    ok(&["synth", "--contexts", "40", "--seed", "4", "--out", s(&again)]);
    for name in ["train.txt", "valid.txt", "test.txt"] {
        assert_eq!(fs::read(f.data().join(name)).unwrap(), fs::read(again.join(name)).unwrap());
    }
    let out = run(&["synth", "--contexts", "40", "--seed", "4", "--out", s(&again)]);
    assert_eq!(out.status.code(), Some(2));
    ok(&["synth", "--contexts", "40", "--seed", "4", "--out", s(&again), "--force"]);
    assert_eq!(run(&["synth", "--clusters", "1", "--out", s(&f.root.join("x"))]).status.code(), Some(2));
}

#[test]
fn training_is_deterministic_and_records_config() {
    let f = fixture();
    let again = f.root.join("ckpt_again");
    train_into(f, &again, &[]);
    for name in ["loss_log.csv", "params.bin", "manifest.txt", "vocab.txt"] {
        assert_eq!(fs::read(f.ckpt().join(name)).unwrap(), fs::read(again.join(name)).unwrap(), "{name}");
    }
    let without_out = |p: &Path| kv(p).into_iter().filter(|(k, _)| k != "out").collect::<Vec<_>>();
    assert_eq!(without_out(&f.ckpt().join("run_config.txt")), without_out(&again.join("run_config.txt")));
    let cfg = f.ckpt().join("run_config.txt");
    assert_eq!(value(&cfg, "hidden_size").as_deref(), Some("8"));
    assert_eq!(value(&cfg, "max_epochs").as_deref(), Some("2"));
    assert_eq!(value(&cfg, "patience").as_deref(), Some("2"));
    assert_eq!(value(&cfg, "regularization_enabled").as_deref(), Some("true"));
    let log = fs::read_to_string(f.ckpt().join("loss_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_total,"));
    assert_eq!(log.lines().count(), 3);

    // the recorded config alone reproduces the run
    let replay = f.root.join("ckpt_replay");
    ok(&["train", "--config", s(&cfg), "--out", s(&replay)]);
    assert_eq!(fs::read(f.ckpt().join("params.bin")).unwrap(), fs::read(replay.join("params.bin")).unwrap());
}

#[test]
fn mtask_flag_turns_off_the_regularizers() {
    let f = fixture();
    let out = f.root.join("ckpt_mtask");
    train_into(f, &out, &["--mtask"]);
    assert_eq!(value(&out.join("manifest.txt"), "regularization_enabled").as_deref(), Some("false"));
    let log = fs::read_to_string(out.join("loss_log.csv")).unwrap();
    let row: Vec<&str> = log.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[4..6], &["0.0", "0.0"]);
}

#[test]
fn flags_override_the_config_file() {
    let f = fixture();
    let cfg = f.root.join("override.txt");
    fs::write(&cfg, "max_epochs=1\nhidden_size=6\n").unwrap();
    let out = f.root.join("ckpt_override");
    ok(&["train", "--config", s(&cfg), "--data", s(f.data()), "--profile", "desk", "--hidden", "4", "--out", s(&out)]);
    let resolved = out.join("run_config.txt");
    assert_eq!(value(&resolved, "hidden_size").as_deref(), Some("4"));
    assert_eq!(value(&resolved, "max_epochs").as_deref(), Some("1"));
}

#[test]
fn generation_is_seeded_and_radius_zero_collapses() {
    let f = fixture();
    let input = f.data().join("test.txt");
    let gen = |out: &Path, extra: &[&str]| {
        let mut args = vec!["generate", "--checkpoint", s(f.ckpt()), "--input", s(&input), "--seed", "3", "--out", s(out)];
        args.extend_from_slice(extra);
        ok(&args);
        fs::read_to_string(out.join("generations.txt")).unwrap()
    };
    let a = gen(&f.root.join("gen_a"), &["--pool", "10"]);
    let b = gen(&f.root.join("gen_b"), &["--pool", "10"]);
    assert_eq!(a, b);
    let contexts = fs::read_to_string(&input).unwrap().lines().count();
    assert_eq!(a.lines().count(), contexts);

    let single = gen(&f.root.join("gen_r0"), &["--radius", "0", "--pool", "5", "--responses", "3", "--scores"]);
    for line in single.lines() {
        let (_, hyps) = line.split_once('\t').unwrap();
        assert_eq!(hyps.split('|').count(), 1, "{line}");
        assert!(hyps.contains('^'));
    }
    assert_eq!(value(&f.root.join("gen_r0/run_config.txt"), "radius").as_deref(), Some("0.0"));
}

#[test]
fn eval_writes_a_report() {
    let f = fixture();
    let out = f.root.join("eval_fixed");
    ok(&[
        "eval", "--checkpoint", s(f.ckpt()), "--test", s(&f.data().join("test.txt")), "--lambda", "0", "--pool", "8", "--out", s(&out),
    ]);
    let report = out.join("eval_report.txt");
    for key in ["precision", "recall", "f1"] {
        let v: f64 = value(&report, key).unwrap().parse().unwrap();
        assert!((0.0..=100.0).contains(&v));
    }
    assert_eq!(value(&report, "lambda").as_deref(), Some("0.000000"));
    assert!(fs::read_to_string(&report).unwrap().contains("context,num_refs,num_hyps,precision,recall"));

    let tuned = f.root.join("eval_tuned");
    ok(&[
        "eval", "--checkpoint", s(f.ckpt()), "--test", s(&f.data().join("test.txt")), "--valid", s(&f.data().join("valid.txt")),
        "--pool", "8", "--out", s(&tuned),
    ]);
    assert!(value(&tuned.join("run_config.txt"), "tuned_lambda").is_some());

    let code = run(&["eval", "--checkpoint", s(f.ckpt()), "--test", s(&f.data().join("test.txt")), "--out", s(&f.root.join("e3"))]).status.code();
    assert_eq!(code, Some(2));
}

#[test]
fn diagnose_writes_the_bundle() {
    let f = fixture();
    let out = f.root.join("diag");
    ok(&["diagnose", "--checkpoint", s(f.ckpt()), "--data", s(&f.data().join("train.txt")), "--out", s(&out)]);
    for name in ["cosine_hist.csv", "perp_curve.csv", "fusion_scatter.csv", "interp_table.csv", "run_config.txt"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let hist = fs::read_to_string(out.join("cosine_hist.csv")).unwrap();
    assert!(hist.starts_with("# bin_width=0.02 "));
    let curve = fs::read_to_string(out.join("perp_curve.csv")).unwrap();
    let rows: Vec<&str> = curve.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 11);
    for r in rows {
        let p: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert!(p >= 1.0);
    }
    let scatter = fs::read_to_string(out.join("fusion_scatter.csv")).unwrap();
    assert!(scatter.lines().nth(1) == Some("x,y,source_label"));
}

#[test]
fn error_exit_codes() {
    let f = fixture();
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--epochs", "nope"]).status.code(), Some(2));

    let bad = f.root.join("bad.txt");
    fs::write(&bad, "only one field\n").unwrap();
    let code = run(&["eval", "--checkpoint", s(f.ckpt()), "--test", s(&bad), "--lambda", "0", "--out", s(&f.root.join("e1"))])
        .status
        .code();
    assert_eq!(code, Some(3));
    let code = run(&["generate", "--checkpoint", s(&f.root.join("missing")), "--input", s(&bad), "--out", s(&f.root.join("e2"))])
        .status
        .code();
    assert_eq!(code, Some(3));

    let out = bin()
        .env("SPACEFUSION_PRECISION", "half")
        .args(["synth", "--out", s(&f.root.join("e4"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
