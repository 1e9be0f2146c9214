use std::fs;
use std::path::Path;
use std::process::Command;

use tgdecode::cli::{self, MethodName, RunConfig};
use tgdecode::Error;

fn tiny(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.out_dir = dir.to_path_buf();
    cfg.data.vocab_size = 8;
    cfg.data.len_min = 2;
    cfg.data.len_max = 4;
    cfg.data.n_train = 60;
    cfg.data.n_test = 8;
    cfg.model.d_emb = 8;
    cfg.model.d_h = 8;
    cfg.model.n_layers = 1;
    cfg.base.epochs = 2;
    cfg.base.optim.lr = 1e-2;
    cfg.distill.beam_k = 3;
    cfg.actor.train.epochs = 1;
    cfg.actor.probe_sentences = 3;
    cfg.bench.warmup = 2;
    cfg
}

#[test]
fn invalid_config_fails_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = tiny(&out);
    cfg.model.d_h = 0;
    assert!(matches!(cli::cmd_pipeline(&cfg), Err(Error::Config(_))));
    let mut cfg = tiny(&out);
    cfg.decode.beam_k = 0;
    assert!(matches!(cli::cmd_train_base(&cfg), Err(Error::Config(_))));
    let mut cfg = tiny(&out);
    cfg.data.len_min = 5;
    assert!(cli::cmd_gen_data(&cfg).is_err());
    assert!(!out.exists());
}

#[test]
fn sentinel_marks_failed_runs_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    // no data yet
    let err = cli::cmd_train_base(&cfg).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert!(dir.path().join(".incomplete").exists());

    cli::cmd_gen_data(&cfg).unwrap();
    assert!(!dir.path().join(".incomplete").exists());
    let written: RunConfig = RunConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(written.version, cli::VERSION);
    assert_eq!(written.data, cfg.data);
}

#[test]
fn stage_errors_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    // a plain file where the checkpoint directory should be
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, b"").unwrap();
    cfg.paths.base_ckpt = Some(blocker.join("base.ckpt"));
    let err = cli::cmd_pipeline(&cfg).unwrap_err();
    match err {
        Error::Stage { stage, .. } => assert_eq!(stage, "train-base"),
        other => panic!("unexpected error {other}"),
    }
    assert!(dir.path().join(".incomplete").exists());
}

#[test]
fn pipeline_is_byte_for_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = cli::cmd_pipeline(&tiny(a.path())).unwrap();
    let rb = cli::cmd_pipeline(&tiny(b.path())).unwrap();
    assert_eq!(ra.pseudo_records, rb.pseudo_records);
    assert_eq!(ra.base, rb.base);
    assert_eq!(ra.actor, rb.actor);
    assert!(ra.tg_used_actor);
    let files = [
        "data/train.src",
        "data/test.tgt",
        "base.ckpt",
        "pseudo.jsonl",
        "actor.ckpt",
        "decode.greedy.txt",
        "decode.beam4.txt",
        "decode.tg.txt",
        "decode.tg+beam4.txt",
    ];
    for f in files {
        let x = fs::read(a.path().join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        let y = fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    assert!(!a.path().join(".incomplete").exists());
    for m in ["greedy", "beam4", "tg", "tg+beam4"] {
        assert!(ra.table.get(m).is_some(), "{m} missing");
    }
}

#[test]
fn single_stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cli::cmd_gen_data(&cfg).unwrap();
    cli::cmd_train_base(&cfg).unwrap();
    let d = cli::cmd_distill(&cfg).unwrap();
    assert_eq!(d.records, 60);
    cli::cmd_train_actor(&cfg).unwrap();
    let dec = cli::cmd_decode(&cfg, MethodName::Tg).unwrap();
    assert_eq!(dec.sentences, 8);
    let mut eval_cfg = cfg.clone();
    eval_cfg.decode.method = MethodName::Tg;
    let e = cli::cmd_eval(&eval_cfg).unwrap();
    assert!((0.0..=100.0).contains(&e.bleu));
    let cont = cli::cmd_train_cont(&cfg).unwrap();
    assert_eq!(cont.epoch_losses.len(), 1);
    assert!(dir.path().join("cont.ckpt").exists());
}

#[test]
fn binary_reports_config_errors_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"model": {"d_h": 0}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tgdecode"))
        .args(["gen-data", "--config"])
        .arg(&path)
        .arg("--out-dir")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error"), "{stderr}");
    assert!(!dir.path().join("run").exists());

    let help = Command::new(env!("CARGO_BIN_EXE_tgdecode")).arg("--help").output().unwrap();
    assert!(help.status.success());
    assert!(String::from_utf8_lossy(&help.stdout).contains("train-actor"));
}
