//! Drives the built binary through synth → bpe-train → pretrain-disc →
//! train → generate → evaluate, plus a short λ sweep.

use std::path::Path;
use std::process::Command;

use styleforge::evaluation::EvalReport;
use styleforge::trainer::RunLog;

fn styleforge(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_styleforge"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("STYLEFORGE_SEED")
        .args(args)
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let (code, text) = styleforge(dir, args);
    assert_eq!(code, 0, "styleforge {args:?}:\n{text}");
    text
}

const CONFIG: &str = "\
# tiny pipeline run
total_epochs = 4
pretrain_epochs = 1
max_tokens_per_batch = 96
update_frequency = 2
learning_rate = 2e-3
warmup_updates = 5
clip_norm = 1.0
disc_lr = 2e-3
seed = 7
model.enc_layers = 1
model.dec_layers = 1
model.embed_dim = 32
model.ffn_dim = 64
model.n_heads = 2
model.max_positions = 40
disc.n_layers = 1
disc.embed_dim = 32
disc.ffn_dim = 64
disc.n_heads = 2
disc.max_positions = 40
max_len = 38
data.merges = data/table.bpe
data.train_src = data/train.src
data.train_tgt = data/train.tgt
data.valid_src = data/valid.src
data.valid_tgt = data/valid.tgt
data.test_src = data/test.src
data.test_tgt = data/test.tgt
data.unlabeled_source = data/unlabeled.src
data.unlabeled_target = data/unlabeled.tgt
data.heldout_source = data/heldout.src
data.heldout_target = data/heldout.tgt
data.discriminator = run/disc.ckpt
data.out_dir = run
";

#[test]
fn full_synthetic_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--out", "data", "--seed", "3", "--train", "120", "--valid", "12", "--test", "12", "--unlabeled", "120", "--heldout", "40"]);
    for f in ["train.src", "train.tgt", "valid.src", "test.tgt", "unlabeled.src", "unlabeled.tgt", "heldout.src", "heldout.tgt"] {
        assert!(dir.join("data").join(f).exists(), "{f}");
    }
    // regenerating with the same seed is refused, then reproduces byte-for-byte
    let before = std::fs::read(dir.join("data/train.src")).unwrap();
    assert_eq!(styleforge(dir, &["synth", "--out", "data", "--seed", "3", "--train", "120"]).0, 1);
    ok(dir, &["synth", "--out", "data", "--seed", "3", "--train", "120", "--valid", "12", "--test", "12", "--unlabeled", "120", "--heldout", "40", "--force"]);
    assert_eq!(std::fs::read(dir.join("data/train.src")).unwrap(), before);

    ok(dir, &["bpe-train", "--input", "data/train.src", "data/train.tgt", "data/unlabeled.src", "data/unlabeled.tgt", "--vocab-size", "300", "--out", "data/table.bpe"]);
    std::fs::write(dir.join("run.kv"), CONFIG).unwrap();
    let text = ok(dir, &["pretrain-disc", "--config", "run.kv"]);
    assert!(text.contains("held-out accuracy"), "{text}");
    ok(dir, &["train", "--config", "run.kv"]);
    for f in ["best.ckpt", "last.ckpt", "run.jsonl", "config.kv"] {
        assert!(dir.join("run").join(f).exists(), "{f}");
    }
    let log = RunLog::read(&dir.join("run/run.jsonl")).unwrap();
    let metrics = log.epoch_metrics();
    assert_eq!(metrics.len(), 3);
    let min = metrics.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    assert_eq!(log.selected().unwrap().1, min);

    ok(dir, &["generate", "--checkpoint", "run/best.ckpt", "--merges", "data/table.bpe", "--input", "data/test.src", "--beam", "3", "--out", "run/test.hyp"]);
    let hyps = std::fs::read_to_string(dir.join("run/test.hyp")).unwrap();
    assert_eq!(hyps.lines().count(), 12);
    ok(dir, &[
        "evaluate", "--hyp", "run/test.hyp", "--ref", "data/test.tgt", "--classifier", "run/disc.ckpt", "--target-style", "t", "--merges", "data/table.bpe", "--checkpoint", "run/best.ckpt", "--ppl-src", "data/valid.src", "--ppl-tgt", "data/valid.tgt", "--config", "run.kv", "--out", "run/report.json",
    ]);
    let report = EvalReport::load(&dir.join("run/report.json")).unwrap();
    assert_eq!(report.n_sentences, 12);
    assert!(report.accuracy.is_some() && report.g_score.is_some());
    assert!((report.perplexity.unwrap() - min).abs() <= 1e-9 * min);
    assert!((0.0..=100.0).contains(&report.bleu));
    assert_eq!(report.config_hash.len(), 64);

    // a second train into the same directory needs --force
    assert_eq!(styleforge(dir, &["train", "--config", "run.kv"]).0, 1);
}

#[test]
fn sweep_and_failure_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--out", "data", "--train", "60", "--valid", "8", "--test", "8", "--unlabeled", "20", "--heldout", "10"]);
    ok(dir, &["bpe-train", "--input", "data/train.src", "data/train.tgt", "--vocab-size", "200", "--out", "data/table.bpe"]);
    let cfg = CONFIG.replace("total_epochs = 4", "total_epochs = 3") + "mode = supervised_only\nvariant = none\n";
    std::fs::write(dir.join("sweep.kv"), &cfg).unwrap();
    let text = ok(dir, &["sweep-lambda", "--config", "sweep.kv", "--grid", "0.8:1.0:0.2", "--beam", "2", "--out", "sweep"]);
    assert!(text.contains("matches plain translation loss: true"), "{text}");
    let csv = std::fs::read_to_string(dir.join("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(std::fs::read_to_string(dir.join("sweep/sweep.svg")).unwrap().contains("<svg"));

    std::fs::write(dir.join("boom.kv"), cfg.replace("learning_rate = 2e-3", "learning_rate = 1e30").replace("clip_norm = 1.0", "clip_norm = 0")).unwrap();
    let (code, text) = styleforge(dir, &["train", "--config", "boom.kv", "--out", "boom"]);
    assert_eq!(code, 3, "{text}");

    assert_eq!(styleforge(dir, &[]).0, 1);
    assert_eq!(styleforge(dir, &["train", "--config", "missing.kv"]).0, 2);
    std::fs::write(dir.join("bad.kv"), "pretrain_epochs = 40\n").unwrap();
    assert_eq!(styleforge(dir, &["train", "--config", "bad.kv"]).0, 1);
}
