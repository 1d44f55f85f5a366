use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::Command;

use dynprompt_cli::chat::{run_repl, ChatSession};
use dynprompt_cli::config::RESOLVED_CONFIG_FILE;
use dynprompt_cli::sweep::{sweep, SWEEP_CSV, SWEEP_HEADER};
use dynprompt_cli::workflow::{adapt, eval, pretrain, seed_dir, vocab_path, TRAIN_LOG};
use dynprompt_cli::{CliError, RunConfig};
use dynprompt_core::adapters::Adapter;
use dynprompt_core::corpus::{synthetic, write_corpus};
use dynprompt_core::evalgen::GenerationConfig;
use dynprompt_core::model::{Backbone, Checkpoint};
use dynprompt_core::Error;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        write_corpus(f.path("base.jsonl"), &synthetic::base_language(60, 8, 1)).unwrap();
        write_corpus(f.path("train.jsonl"), &synthetic::lookup_dialogues(40, 8, 3, 1)).unwrap();
        write_corpus(f.path("test.jsonl"), &synthetic::lookup_dialogues(6, 8, 3, 2)).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// A deliberately tiny model and budget.
    fn config(&self, extra: &[(&str, String)]) -> RunConfig {
        let mut pairs: Vec<(String, String)> = [
            ("model.size", "custom".to_string()),
            ("model.layers", "1".into()),
            ("model.heads", "2".into()),
            ("model.d_model", "8".into()),
            ("model.max_positions", "128".into()),
            ("pretrain.max_epochs", "1".into()),
            ("pretrain.batch_size", "8".into()),
            ("train.max_epochs", "2".into()),
            ("train.batch_size", "8".into()),
            ("adapter.prompt_size", "2".into()),
            ("eval.max_new_tokens", "4".into()),
            ("corpus.base", self.path("base.jsonl").display().to_string()),
            ("corpus.train", self.path("train.jsonl").display().to_string()),
            ("corpus.test", self.path("test.jsonl").display().to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        pairs.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        RunConfig::resolve(None, &pairs).unwrap()
    }

    fn pretrained(&self) -> PathBuf {
        let out = self.path("pre");
        pretrain(&self.config(&[("run.out", out.display().to_string())])).unwrap();
        out.join("backbone.ckpt")
    }
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dynprompt"))
}

#[test]
fn pretrain_writes_a_reproducible_checkpoint_and_its_config() {
    let f = Fixture::new();
    let a = pretrain(&f.config(&[("run.out", s(&f.path("a")))])).unwrap();
    let b = pretrain(&f.config(&[("run.out", s(&f.path("b")))])).unwrap();
    let digest = |p: &Path| Checkpoint::load(p).unwrap().digest().unwrap();
    assert_eq!(digest(&a.checkpoint), digest(&b.checkpoint));
    let loaded = Backbone::load(&a.checkpoint).unwrap();
    assert_eq!(loaded.checksum(), a.checksum);
    assert!(vocab_path(&a.checkpoint).is_file());
    assert!(f.path("a").join("pretrain_log.csv").is_file());
    let resolved = RunConfig::load(&f.path("a").join(RESOLVED_CONFIG_FILE)).unwrap();
    assert_eq!(resolved, f.config(&[("run.out", s(&f.path("a")))]));
}

#[test]
fn missing_corpus_exits_with_usage_code_naming_the_flag() {
    let f = Fixture::new();
    let out = bin()
        .args(["pretrain", "--corpus"])
        .arg(f.path("nope.jsonl"))
        .arg("--out")
        .arg(f.path("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--corpus"));

    let out = bin().args(["pretrain", "--out"]).arg(f.path("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--corpus"));

    let out = bin().args(["adapt", "--strategy", "lora"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn binary_runs_the_whole_workflow() {
    let f = Fixture::new();
    let conf = f.path("run.conf");
    let cfg = f.config(&[]);
    fs::write(&conf, cfg.to_text()).unwrap();
    let ok = |args: &[&str]| {
        let out = bin().arg(args[0]).arg("--config").arg(&conf).args(&args[1..]).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let pre = f.path("pre");
    let backbone = pre.join("backbone.ckpt");
    ok(&["pretrain", "--out", &s(&pre)]);
    let ad = f.path("ad");
    ok(&["adapt", "--backbone", &s(&backbone), "--strategy", "prefix", "--seed", "3,4", "--out", &s(&ad)]);
    assert!(seed_dir(&ad, 3).join("adapter.ckpt").is_file());
    let ev = f.path("ev");
    let printed = ok(&["eval", "--backbone", &s(&backbone), "--adapter", &s(&ad), "--out", &s(&ev)]);
    assert!(printed.contains("seed 3") && printed.contains("seed 4"));
    let chat = bin()
        .args(["chat", "--config"])
        .arg(&conf)
        .args(["--backbone", &s(&backbone), "--adapter", &s(&seed_dir(&ad, 3).join("adapter.ckpt"))])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    use std::io::Write as _;
    chat.stdin.as_ref().unwrap().write_all(b"hello my code is k1 thanks\n/quit\n").unwrap();
    let out = chat.wait_with_output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("bot:"));

    let synth = f.path("synth.jsonl");
    let out = bin()
        .args(["synth", "lookup", "--out", &s(&synth), "--dialogues", "12", "--classes", "4"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        dynprompt_core::corpus::load_corpus(&synth, Default::default()).unwrap().dialogues.len(),
        12
    );
}

#[test]
fn adapt_keeps_the_backbone_frozen_and_binds_its_checksum() {
    let f = Fixture::new();
    let backbone = f.pretrained();
    let original = fs::read(&backbone).unwrap();
    let out = f.path("dyn");
    let runs = adapt(&f.config(&[
        ("run.backbone", s(&backbone)),
        ("run.out", s(&out)),
        ("adapter.strategy", "dynamic".into()),
    ]))
    .unwrap();
    let log = fs::read_to_string(seed_dir(&out, 0).join(TRAIN_LOG)).unwrap();
    let checksums: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').nth(5).unwrap()).collect();
    assert_eq!(checksums.len(), 2);
    assert!(checksums.iter().all(|c| *c == checksums[0]));
    let base = Backbone::load(&backbone).unwrap();
    assert_eq!(checksums[0], format!("{:016x}", base.checksum()));
    Adapter::load(&runs[0].checkpoint, &base).unwrap();

    // Against any other backbone the adapter refuses to load.
    let other = Backbone::init(base.config().clone(), 99).unwrap();
    assert!(matches!(
        Adapter::load(&runs[0].checkpoint, &other),
        Err(Error::ChecksumMismatch { .. })
    ));

    // Fine-tuning writes a full new checkpoint and leaves the input alone.
    let ft = f.path("ft");
    let runs = adapt(&f.config(&[
        ("run.backbone", s(&backbone)),
        ("run.out", s(&ft)),
        ("adapter.strategy", "finetune".into()),
        ("train.learning_rate", "1e-2".into()),
    ]))
    .unwrap();
    assert_eq!(fs::read(&backbone).unwrap(), original);
    let loaded = Adapter::load(&runs[0].checkpoint, &base).unwrap();
    assert_ne!(loaded.backbone.checksum(), base.checksum());
}

#[test]
fn checksum_mismatch_is_an_invariant_failure() {
    let f = Fixture::new();
    let backbone = f.pretrained();
    let ad = f.path("ad");
    adapt(&f.config(&[("run.backbone", s(&backbone)), ("run.out", s(&ad)), ("adapter.strategy", "softprompt".into())]))
        .unwrap();
    // A second backbone with the same vocabulary but different weights.
    let other_dir = f.path("other");
    pretrain(&f.config(&[("run.out", s(&other_dir)), ("run.seeds", "5".into())])).unwrap();
    let err = eval(&f.config(&[
        ("run.backbone", s(&other_dir.join("backbone.ckpt"))),
        ("run.adapter", s(&ad)),
        ("run.out", s(&f.path("ev"))),
    ]))
    .unwrap_err();
    assert!(matches!(err, CliError::Core(Error::ChecksumMismatch { .. })), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn eval_writes_one_report_per_seed_and_a_mean() {
    let f = Fixture::new();
    let backbone = f.pretrained();
    let ad = f.path("ad");
    let seeds = "0,1,2,3,4".to_string();
    adapt(&f.config(&[("run.backbone", s(&backbone)), ("run.out", s(&ad)), ("run.seeds", seeds.clone())])).unwrap();
    let cfg = |out: &str| {
        f.config(&[
            ("run.backbone", s(&backbone)),
            ("run.adapter", s(&ad)),
            ("run.seeds", seeds.clone()),
            ("run.out", s(&f.path(out))),
        ])
    };
    let first = eval(&cfg("ev1")).unwrap();
    assert_eq!(first.reports.len(), 5);
    for seed in 0..5 {
        assert!(f.path("ev1").join(format!("report-seed-{seed}.json")).is_file());
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(&first.summary).unwrap()).unwrap();
    assert_eq!(summary["reports"].as_array().unwrap().len(), 5);
    let mean_bleu = first.reports.iter().map(|(_, _, r)| r.scores.bleu_avg).sum::<f64>() / 5.0;
    assert!((summary["mean"]["bleu_avg"].as_f64().unwrap() - mean_bleu).abs() < 1e-12);
    assert!(fs::read_to_string(f.path("ev1").join("summary.txt")).unwrap().contains("mean"));

    let second = eval(&cfg("ev2")).unwrap();
    for ((_, _, a), (_, _, b)) in first.reports.iter().zip(&second.reports) {
        assert_eq!(a.digest(), b.digest());
    }

    let empty = f.path("empty.jsonl");
    write_corpus(&empty, &[]).unwrap();
    let err = eval(&cfg("ev3").with("corpus.test", s(&empty)).unwrap()).unwrap_err();
    assert!(matches!(err, CliError::Core(Error::EmptyCorpus(_))), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn prompt_size_sweep_is_resumable() {
    let f = Fixture::new();
    let backbone = f.pretrained();
    let out = f.path("sweep");
    let cfg = f.config(&[
        ("run.backbone", s(&backbone)),
        ("run.out", s(&out)),
        ("sweep.prompt_sizes", "1,3".into()),
        ("train.max_epochs", "1".into()),
    ]);
    let first = sweep(&cfg).unwrap();
    assert_eq!(first.ran, vec!["prompt_size-1", "prompt_size-3"]);
    let csv = fs::read_to_string(out.join(SWEEP_CSV)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert_eq!(lines.len(), 3);
    let width = SWEEP_HEADER.split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == width));

    // Simulate an interruption after the first cell.
    fs::write(out.join(SWEEP_CSV), format!("{}\n{}\n", lines[0], lines[1])).unwrap();
    let resumed = sweep(&cfg).unwrap();
    assert_eq!(resumed.skipped, vec!["prompt_size-1"]);
    assert_eq!(resumed.ran, vec!["prompt_size-3"]);
    let again = sweep(&cfg).unwrap();
    assert!(again.ran.is_empty());
    assert_eq!(fs::read_to_string(out.join(SWEEP_CSV)).unwrap(), csv);

    let changed = cfg.with("train.batch_size", 4).unwrap();
    assert_eq!(sweep(&changed).unwrap_err().exit_code(), 2);
}

#[test]
fn model_size_sweep_pairs_strategies_per_size() {
    let f = Fixture::new();
    let out = f.path("sizes");
    let cfg = f.config(&[
        ("run.out", s(&out)),
        ("sweep.axis", "model_size".into()),
        ("sweep.model_sizes", "tiny".into()),
        ("train.max_epochs", "1".into()),
    ]);
    let result = sweep(&cfg).unwrap();
    assert_eq!(result.ran, vec!["tiny-finetune", "tiny-dynamic"]);
    assert!(out.join("backbones/tiny/backbone.ckpt").is_file());
    let csv = fs::read_to_string(out.join(SWEEP_CSV)).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][3], rows[1][3]), ("finetune", "dynamic"));
    assert!(rows.iter().all(|r| r[5] == "tiny"));
}

fn session(f: &Fixture) -> ChatSession {
    let backbone = f.pretrained();
    let ad = f.path("chat");
    let runs = adapt(&f.config(&[("run.backbone", s(&backbone)), ("run.out", s(&ad))])).unwrap();
    ChatSession::open(&f.config(&[("run.backbone", s(&backbone)), ("run.adapter", s(&runs[0].checkpoint))]))
        .unwrap()
}

#[test]
fn chat_keeps_a_rolling_window_and_resets() {
    let f = Fixture::new();
    let mut chat = session(&f);
    let mut replies = Vec::new();
    let mut expected: Vec<String> = Vec::new();
    for i in 0..5 {
        let user = format!("hello my code is k{i} thanks");
        let reply = chat.respond(&user).unwrap();
        expected.push(user);
        if !reply.is_empty() {
            expected.push(reply.clone());
        }
        replies.push(reply);
    }
    let h = chat.history();
    assert_eq!(h.len(), 4);
    assert_eq!(h, expected[expected.len() - 4..].to_vec());

    chat.reset();
    assert!(chat.history().is_empty());
    let after_reset = chat.respond("hello my code is k0 thanks").unwrap();
    assert!(chat.history()[0] == "hello my code is k0 thanks");
    // Identical transcripts give identical replies.
    assert_eq!(after_reset, replies[0]);
    assert!(matches!(chat.respond("   "), Err(CliError::Core(Error::Config(_)))));
}

#[test]
fn repl_handles_commands_and_bad_input() {
    let f = Fixture::new();
    let mut chat = session(&f);
    let input = Cursor::new("hi there\n/bogus\n\n/reset\nhello\n/quit\nnot read\n");
    let mut out = Vec::new();
    run_repl(&mut chat, input, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.matches("bot:").count(), 2);
    assert!(text.matches("/reset clears").count() >= 2);
    assert!(text.contains("(conversation cleared)"));
    assert_eq!(chat.history()[0], "hello");
}

#[test]
fn generation_budget_comes_from_the_config() {
    assert_eq!(
        RunConfig::default().parse::<usize>("eval.max_new_tokens").unwrap(),
        GenerationConfig::default().max_new_tokens
    );
}
