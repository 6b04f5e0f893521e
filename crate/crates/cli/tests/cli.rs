mod common;

use std::path::Path;
use std::process::{Command, Output};

fn brainlang(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainlang"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let o = brainlang(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn pipeline(cfg: &Path, out: &Path) {
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    for cmd in [&["synth"][..], &["pretrain-lm"], &["train"], &["train", "--control"], &["eval"]] {
        let mut args = vec!["--config", c, "--out", o];
        args.extend_from_slice(cmd);
        run_ok(&args);
    }
}

#[test]
fn exit_codes() {
    assert_eq!(brainlang(&["--help"]).status.code(), Some(0));
    assert_eq!(brainlang(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(brainlang(&["train", "--control", "--holdout", "zebra"]).status.code(), Some(1));
    assert_eq!(brainlang(&["--set", "phase1.bogus=1", "config"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    // missing inputs
    assert_eq!(brainlang(&["--out", out, "eval"]).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.toml"), "schema_version = 7\n").unwrap();
    let bad = dir.path().join("bad.toml");
    assert_eq!(brainlang(&["--config", bad.to_str().unwrap(), "config"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_reports_every_group() {
    let out = run_ok(&["gradcheck"]);
    for g in ["token_embedding", "attention", "mlp", "layer_norm", "lora_a", "lora_b", "tokenizer_weight"] {
        assert!(out.contains(g), "{g} missing from\n{out}");
    }
    // an impossible tolerance is a numerical failure
    assert_eq!(brainlang(&["gradcheck", "--tol", "1e-30"]).status.code(), Some(3));
}

#[test]
fn train_logs_default_hyperparameters() {
    let o = brainlang(&["config"]);
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = brainlang_cli::config::RunConfig::from_toml(&text).unwrap();
    assert_eq!((cfg.phase1.epochs, cfg.phase2.epochs), (20, 2));
    assert_eq!((cfg.phase1.base_lr, cfg.phase2.base_lr), (1e-3, 2e-5));
    assert_eq!((cfg.phase1.batch_size, cfg.lora.rank, cfg.lora.alpha), (5, 16, 16.0));
    // the effective configuration is printed to stderr for every command
    assert!(String::from_utf8_lossy(&o.stderr).contains("# effective configuration"));
}

#[test]
fn pipeline_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&cfg, &a);
    pipeline(&cfg, &b);
    for f in ["dataset.jsonl", "base.ckpt", "main.phase1.ckpt", "main.phase2.ckpt", "control.phase2.ckpt", "eval.json"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
    }

    // save -> load -> save through the container is the identity
    let ck = brainlang::checkpoint::Checkpoint::load(&a.join("main.phase2.ckpt")).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), std::fs::read(a.join("main.phase2.ckpt")).unwrap());
    // the echo reproduces the effective configuration, minus the output location
    let echoed: brainlang_cli::config::RunConfig = serde_json::from_value(ck.config.clone()).unwrap();
    let default_out = brainlang_cli::config::RunConfig::default().out_dir;
    assert_eq!(echoed, brainlang_cli::config::RunConfig { out_dir: default_out, ..common::tiny_config(&a) });

    // generate and the service share one code path
    let (c, o) = (cfg.to_str().unwrap(), a.to_str().unwrap());
    let split: brainlang::dataset::Split =
        serde_json::from_str(&std::fs::read_to_string(a.join("split.json")).unwrap()).unwrap();
    let trial = split.test_ids[0].to_string();
    let text = run_ok(&["--config", c, "--out", o, "generate", "--trial", &trial, "--question", "Describe this image."]);
    let ds = brainlang_cli::pipeline::read_dataset(&a.join("dataset.jsonl")).unwrap();
    let state = brainlang_cli::serve::ServeState::new(echoed, &ck, ds, split.clone()).unwrap();
    let req = brainlang_cli::serve::AskRequest {
        trial_id: split.test_ids[0],
        question: "Describe this image.".into(),
        beta: 0.0,
        mask_id: None,
        evidence_tokens: None,
        generation: None,
    };
    assert_eq!(text.trim_end(), brainlang_cli::serve::answer(&state, &req).unwrap().text);
}

#[test]
fn zeroshot_and_microstim_commands_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_tiny_config(dir.path());
    let (c, o) = (cfg.to_str().unwrap(), dir.path().join("run"));
    let o = o.to_str().unwrap();
    for cmd in [&["synth"][..], &["pretrain-lm"], &["train"], &["train", "--holdout", "zebra"]] {
        let mut args = vec!["--config", c, "--out", o];
        args.extend_from_slice(cmd);
        run_ok(&args);
    }
    let out = run_ok(&["--config", c, "--out", o, "zeroshot", "--holdout", "zebra"]);
    assert!(out.contains("centroid accuracy"));
    let z: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(Path::new(o).join("zeroshot-zebra.json")).unwrap()).unwrap();
    assert!(z["withheld_tokens"].as_array().unwrap().iter().any(|t| t == "zebras"));
    let out = run_ok(&["--config", c, "--out", o, "microstim"]);
    assert!(out.contains("zero_rows_identical=true"), "{out}");
    let csv = std::fs::read_to_string(Path::new(o).join("microstim-top5pct-excitatory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}
