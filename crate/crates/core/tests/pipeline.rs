use std::collections::BTreeMap;

use dynprompt_core::adapters::{Adapter, AdapterConfig, StrategyKind};
use dynprompt_core::corpus::{
    build_vocab, encode_corpus, load_corpus, split_train_valid, synthetic, window_samples,
    write_corpus, LoadMode, Vocabulary, WindowConfig,
};
use dynprompt_core::evalgen::{evaluate, generate, EvalReport, GenerationConfig};
use dynprompt_core::model::{Backbone, ModelConfig};
use dynprompt_core::trainer::{Objective, TrainConfig, Trainer};
use dynprompt_core::Error;

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        vocab_size: vocab,
        max_positions: 96,
        tie_lm_head: true,
    }
}

fn quick(kind: StrategyKind, objective: Objective) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        warmup_steps: 2,
        batch_size: 8,
        max_epochs: 2,
        objective,
        ..TrainConfig::for_strategy(kind)
    }
}

/// Pre-trains a tiny backbone on the synthetic base corpus.
fn pretrained(dir: &std::path::Path) -> (Backbone, Vocabulary) {
    let path = dir.join("base.jsonl");
    write_corpus(&path, &synthetic::base_language(40, 6, 1)).unwrap();
    let dialogues = load_corpus(&path, LoadMode::Strict).unwrap().dialogues;
    let vocab = build_vocab(&dialogues, 1).unwrap();
    let window = WindowConfig::default();
    let (train, valid) = split_train_valid(&dialogues);
    let backbone = Backbone::init(tiny(vocab.len()), 0).unwrap();
    let adapter = Adapter::new(AdapterConfig::new(StrategyKind::FineTune, 0), &backbone).unwrap();
    let out = Trainer::new(
        backbone,
        adapter,
        encode_corpus(&train, &vocab, &window),
        encode_corpus(&valid, &vocab, &window),
        quick(StrategyKind::FineTune, Objective::FullSequence),
    )
    .unwrap()
    .train()
    .unwrap();
    (out.backbone, vocab)
}

#[test]
fn pretrain_adapt_save_reload_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let (backbone, vocab) = pretrained(dir.path());
    backbone.save(dir.path().join("backbone.ckpt")).unwrap();
    let reloaded = Backbone::load(dir.path().join("backbone.ckpt")).unwrap();
    assert_eq!(reloaded.checksum(), backbone.checksum());

    let lookup = synthetic::lookup_dialogues(30, 6, 2, 1);
    let window = WindowConfig::default();
    let (train, valid) = split_train_valid(&lookup);
    let test: Vec<_> = synthetic::lookup_dialogues(4, 6, 2, 9)
        .iter()
        .flat_map(|d| window_samples(d, &window))
        .collect();
    let gen = GenerationConfig { max_new_tokens: 5 };

    for kind in [StrategyKind::PrefixTuning, StrategyKind::DynamicPrompt] {
        let adapter = Adapter::new(AdapterConfig::new(kind, 3).with_seed(4), &reloaded).unwrap();
        let out = Trainer::new(
            reloaded.clone(),
            adapter,
            encode_corpus(&train, &vocab, &window),
            encode_corpus(&valid, &vocab, &window),
            quick(kind, Objective::Response),
        )
        .unwrap()
        .train()
        .unwrap();
        assert_eq!(out.backbone.checksum(), reloaded.checksum());

        let path = dir.path().join(format!("{kind}.ckpt"));
        out.adapter.save(&path, &reloaded, None).unwrap();
        let loaded = Adapter::load(&path, &reloaded).unwrap();
        assert_eq!(loaded.adapter.params().checksum(), out.adapter.params().checksum());

        let context = vocab.encode_words(&test[0].context[0]);
        let before = generate(&out.adapter, &reloaded, &[context.clone()], &gen).unwrap();
        let after = generate(&loaded.adapter, &loaded.backbone, &[context], &gen).unwrap();
        assert_eq!(before, after);

        let report = evaluate(&loaded.adapter, &loaded.backbone, &vocab, &test, &gen, BTreeMap::new())
            .unwrap();
        assert_eq!(report.samples.len(), test.len());
        let file = dir.path().join(format!("{kind}.json"));
        report.save(&file).unwrap();
        assert_eq!(EvalReport::load(&file).unwrap(), report);
    }
}

#[test]
fn adapters_refuse_a_different_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let (backbone, _) = pretrained(dir.path());
    let adapter =
        Adapter::new(AdapterConfig::new(StrategyKind::SoftPrompt, 2), &backbone).unwrap();
    let path = dir.path().join("soft.ckpt");
    adapter.save(&path, &backbone, None).unwrap();

    let mut other = backbone.clone();
    other.params_mut().tensors_mut()[0].data_mut()[0] += 1e-3;
    assert!(matches!(
        Adapter::load(&path, &other),
        Err(Error::ChecksumMismatch { .. })
    ));
}
