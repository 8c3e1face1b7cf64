use std::path::Path;
use std::process::{Command, Output};

use bsg::harness::{RunConfig, MANIFEST_FILE};
use bsg::synthworld::SizeClass;

fn bsg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsg")).args(args).current_dir(dir).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = RunConfig { seed: 3, ..RunConfig::default() };
    cfg.detector.iterations = 3;
    cfg.detector.batch = 2;
    cfg.detector.eval_scenes = 2;
    cfg.agent.iterations = 2;
    cfg.agent.batch = 2;
    cfg.agent.validate_every = 1;
    cfg.corpus.size = SizeClass::Small;
    cfg.corpus.train_worlds = 3;
    cfg.corpus.val_worlds = 1;
    cfg.corpus.test_worlds = 2;
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn gen_world_writes_json_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = bsg(&["gen-world", "--seed", "9", "--size", "small", "--out", "w"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("w/world_9.json").exists());
    assert!(dir.path().join("w").join(MANIFEST_FILE).exists());
    assert!(stdout(&o).starts_with("world 9 with"));
}

#[test]
fn gen_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for out in ["a", "b"] {
        let o = bsg(&["gen-corpus", "--config", &cfg, "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for split in ["train", "val", "test"] {
        let a = std::fs::read(dir.path().join("a").join(split).join("episodes.json")).unwrap();
        let b = std::fs::read(dir.path().join("b").join(split).join("episodes.json")).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn grad_check_passes_and_flags_injected_faults() {
    let dir = tempfile::tempdir().unwrap();
    let ok = bsg(&["grad-check", "--out", "g"], dir.path());
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let bad = bsg(&["grad-check", "--out", "g", "--inject-fault", "temporal_update"], dir.path());
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("temporal_update"));
}

#[test]
fn invalid_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"seed": 1}"#).unwrap();
    assert!(!bsg(&["gen-corpus", "--config", "bad.json"], dir.path()).status.success());
    let cfg = RunConfig { fusion_weight: 1.5, ..RunConfig::default() };
    std::fs::write(dir.path().join("range.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    assert!(!bsg(&["gen-corpus", "--config", "range.json"], dir.path()).status.success());
    assert!(!bsg(&["eval", "--checkpoint", "missing.ckpt"], dir.path()).status.success());
    assert!(!bsg(&["trace-dump", "--traces", "missing.jsonl"], dir.path()).status.success());
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |args: &[&str]| {
        let o = bsg(args, dir.path());
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["gen-corpus", "--config", &cfg, "--out", "corpus"]);
    run(&["train-detector", "--config", &cfg, "--out", "det"]);
    assert!(dir.path().join("det/detector_loss.csv").exists());
    run(&["detect-eval", "--config", &cfg, "--checkpoint", "det/detector.ckpt", "--out", "det_eval"]);
    run(&["train-agent", "--config", &cfg, "--detector", "det/detector.ckpt", "--corpus", "corpus", "--out", "agent"]);
    let eval = run(&[
        "eval", "--config", &cfg, "--checkpoint", "agent/agent.ckpt", "--corpus", "corpus", "--ablation", "--out", "eval",
    ]);
    assert!(stdout(&eval).contains("| fusion_weight=0.5 |"));
    let metrics = std::fs::read_to_string(dir.path().join("eval/metrics.csv")).unwrap();
    assert!(metrics.starts_with("split,SR,OSR,TL,NE,SPL,CLS,nDTW,SDTW\n"));
    assert_eq!(metrics.lines().count(), 1 + 1 + 3 + 3);
    let dump = run(&["trace-dump", "--traces", "eval/traces.jsonl", "--episode", "1"]);
    assert!(stdout(&dump).starts_with("episode 1:"));
    assert!(!bsg(&["trace-dump", "--traces", "eval/traces.jsonl", "--episode", "99"], dir.path()).status.success());

    let mut wide: RunConfig = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    wide.model.dim = 16;
    wide.model.hidden = 32;
    std::fs::write(dir.path().join("wide.json"), serde_json::to_string(&wide).unwrap()).unwrap();
    let mismatch = bsg(&["eval", "--config", "wide.json", "--checkpoint", "agent/agent.ckpt", "--corpus", "corpus"], dir.path());
    assert!(!mismatch.status.success());
}
