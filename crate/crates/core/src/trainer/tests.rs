use super::*;
use crate::adapters::{Adapter, AdapterConfig};
use crate::corpus::{DialogueSample, FIRST_WORD_ID, SEP};
use crate::model::{Backbone, ModelConfig};
use crate::numerics::{Graph, ParamSet, Tensor};

fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        vocab_size: FIRST_WORD_ID + 16,
        max_positions: 40,
        tie_lm_head: true,
    }
}

fn w(i: usize) -> usize {
    FIRST_WORD_ID + i
}

fn sample(ctx: &[&[usize]], resp: &[usize]) -> DialogueSample {
    DialogueSample::from_ids(
        ctx.iter().map(|u| u.iter().map(|&i| w(i)).collect()).collect(),
        resp.iter().map(|&i| w(i)).collect(),
    )
}

/// Tiny lookup task: "a k" → v(k).
fn lookup(n: usize) -> Vec<DialogueSample> {
    (0..n).map(|i| sample(&[&[0, 1 + i % 4]], &[8 + (i * 3) % 4])).collect()
}

fn scalar_params(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("p", Tensor::scalar(v));
    p
}

#[test]
fn schedule_warms_up_then_decays() {
    assert_eq!(lr_at(1e-3, 10, 110, 0), 0.0);
    assert_eq!(lr_at(1e-3, 10, 110, 10), 1e-3);
    assert!((lr_at(1e-3, 10, 110, 60) - 5e-4).abs() < 1e-18);
    assert_eq!(lr_at(1e-3, 10, 110, 110), 0.0);
    assert_eq!(lr_at(1e-3, 0, 100, 0), 1e-3);
    let cfg = TrainConfig::for_strategy(StrategyKind::DynamicPrompt);
    assert_eq!(cfg.effective_warmup(300), 30);
    assert_eq!(cfg.effective_warmup(1_000_000), 5000);
    assert_eq!(TrainConfig::for_strategy(StrategyKind::FineTune).learning_rate, 5e-5);
}

#[test]
fn adamw_zero_gradient_without_decay_is_identity() {
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut p = scalar_params(1.5);
    let mut opt = AdamW::new(cfg, &p);
    opt.step(&mut p, &[Tensor::scalar(0.0)], 0.1).unwrap();
    assert_eq!(p.tensors()[0].item(), 1.5);
}

#[test]
fn adamw_first_step_matches_closed_form() {
    // Bias-corrected moments equal g and g² on the first step, so the
    // update is lr·g/(|g| + eps), preceded by p·(1 − lr·wd).
    for wd in [0.0, 0.01] {
        let cfg = AdamWConfig {
            weight_decay: wd,
            ..Default::default()
        };
        let mut p = scalar_params(1.0);
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[Tensor::scalar(1.0)], 0.1).unwrap();
        let expected = 1.0 * (1.0 - 0.1 * wd) - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.tensors()[0].item() - expected).abs() < 1e-15);
    }
    let mut p = scalar_params(1.0);
    AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &p)
        .step(&mut p, &[Tensor::scalar(1.0)], 0.1)
        .unwrap();
    assert!((p.tensors()[0].item() - 0.9).abs() < 1e-8);
}

#[test]
fn adamw_second_step_matches_hand_recursion() {
    let c = AdamWConfig::default();
    let mut p = scalar_params(0.5);
    let mut opt = AdamW::new(c, &p);
    let (g1, g2, lr) = (0.3, -0.7, 0.05);
    opt.step(&mut p, &[Tensor::scalar(g1)], lr).unwrap();
    opt.step(&mut p, &[Tensor::scalar(g2)], lr).unwrap();
    let mut x = 0.5;
    let (mut m, mut v) = (0.0, 0.0);
    for (t, g) in [(1, g1), (2, g2)] {
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g * g;
        let mh = m / (1.0 - c.beta1.powi(t));
        let vh = v / (1.0 - c.beta2.powi(t));
        x = x * (1.0 - lr * c.weight_decay) - lr * mh / (vh.sqrt() + c.eps);
    }
    assert!((p.tensors()[0].item() - x).abs() < 1e-15);
}

#[test]
fn adamw_rejects_nan_gradient_by_name() {
    let mut p = scalar_params(1.0);
    p.insert("prompt.embeddings", Tensor::zeros(&[2]));
    let mut opt = AdamW::new(AdamWConfig::default(), &p);
    let grads = [Tensor::scalar(0.0), Tensor::new(vec![2], vec![0.0, f64::NAN]).unwrap()];
    let err = opt.step(&mut p, &grads, 0.1).unwrap_err();
    assert!(err.to_string().contains("prompt.embeddings"), "{err}");
    assert_eq!(p.tensors()[0].item(), 1.0);
}

#[test]
fn clipping_rescales_to_max_norm() {
    let mut g = vec![Tensor::new(vec![2], vec![3.0, 0.0]).unwrap(), Tensor::scalar(4.0)];
    let norm = clip_global_norm(&mut g, 1.0);
    assert_eq!(norm, 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    assert!((g[1].item() - 0.8).abs() < 1e-15);
    let mut small = vec![Tensor::scalar(0.5)];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].item(), 0.5);
}

#[test]
fn early_stopping_follows_patience() {
    let mut es = EarlyStopping::new(2);
    let decisions: Vec<StopDecision> = [3.0, 2.5, 2.6, 2.7]
        .iter()
        .enumerate()
        .map(|(i, &l)| es.observe(i + 1, l).unwrap())
        .collect();
    assert_eq!(
        decisions,
        vec![
            StopDecision::Improved,
            StopDecision::Improved,
            StopDecision::Continue,
            StopDecision::Stop
        ]
    );
    assert_eq!(es.best_epoch(), 2);
    assert!(EarlyStopping::new(1).observe(1, f64::NAN).is_err());
}

fn nll(adapter: &Adapter, bb: &Backbone, samples: &[DialogueSample]) -> f64 {
    let mut g = Graph::new();
    let b = adapter.bind(&mut g, bb, false).unwrap();
    let l = response_nll(&mut g, &b, samples).unwrap();
    g.value(l).item()
}

/// Direct oracle: softmax cross-entropy over response targets computed
/// from the logits of an unbatched backbone run.
fn oracle_nll(bb: &Backbone, s: &DialogueSample) -> (f64, usize) {
    let seq = s.sequence();
    let mut g = Graph::new();
    let vars = bb.bind(&mut g, false);
    let out = vars
        .forward(&mut g, &seq, 0, &crate::model::PastState::empty())
        .unwrap();
    let logits = g.value(out.logits);
    let mut total = 0.0;
    let start = s.context_tokens.len();
    for i in start..seq.len() {
        let row = logits.row(i - 1);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[seq[i]];
    }
    (total, seq.len() - start)
}

#[test]
fn response_nll_matches_unbatched_oracle_and_ignores_padding() {
    let bb = Backbone::init(config(), 3).unwrap();
    let ft = Adapter::new(AdapterConfig::new(StrategyKind::FineTune, 0), &bb).unwrap();
    let short = sample(&[&[1]], &[2]);
    let long = sample(&[&[1, 2, 3], &[4, 5]], &[6, 7, 8]);
    let (a, na) = oracle_nll(&bb, &short);
    let (b, nb) = oracle_nll(&bb, &long);
    assert!((nll(&ft, &bb, std::slice::from_ref(&short)) - a / na as f64).abs() < 1e-12);
    // Padding the short sample to the long one's width adds 7 PAD
    // positions; the batch loss is still the token-weighted mean.
    let batch = crate::corpus::Batch::from_samples(vec![short, long]);
    assert_eq!(batch.pad_count(), 7);
    let batched = nll(&ft, &bb, &batch.samples);
    assert!((batched - (a + b) / (na + nb) as f64).abs() < 1e-12);
}

#[test]
fn untrained_loss_is_near_uniform() {
    let cfg = ModelConfig::desk(FIRST_WORD_ID + 300);
    let bb = Backbone::init(cfg.clone(), 9).unwrap();
    let ft = Adapter::new(AdapterConfig::new(StrategyKind::FineTune, 0), &bb).unwrap();
    // 128 scored tokens keep the sampling noise of the mean well below 0.1.
    let samples: Vec<DialogueSample> = (0..32)
        .map(|i| sample(&[&[i, i + 50, i + 100]], &[i + 150, i + 200, i + 250]))
        .collect();
    let loss = nll(&ft, &bb, &samples);
    let uniform = (cfg.vocab_size as f64).ln();
    assert!((loss - uniform).abs() < 0.1, "{loss} vs ln V = {uniform}");
}

#[test]
fn context_targets_do_not_affect_the_loss() {
    let bb = Backbone::init(config(), 4).unwrap();
    for kind in StrategyKind::ALL {
        let a = Adapter::new(AdapterConfig::new(kind, 2).with_seed(1), &bb).unwrap();
        let mut g = Graph::new();
        let b = a.bind(&mut g, &bb, false).unwrap();
        let s = sample(&[&[1, 2], &[3]], &[4, 5]);
        let comp = b.compose(&mut g, &s.context_utterances, &s.response_tokens).unwrap();
        let out = b.run(&mut g, &comp).unwrap();
        let (targets, mask) = comp.shifted_targets();
        let base = g.masked_cross_entropy(out.logits, &targets, &mask).unwrap();
        let mut mutated = targets.clone();
        for (t, &m) in mutated.iter_mut().zip(&mask) {
            if !m {
                *t = (*t * 7 + 3) % config().vocab_size;
            }
        }
        let other = g.masked_cross_entropy(out.logits, &mutated, &mask).unwrap();
        assert_eq!(g.value(base).item(), g.value(other).item(), "{kind}");
    }
}

#[test]
fn empty_response_is_an_error() {
    let bb = Backbone::init(config(), 4).unwrap();
    let ft = Adapter::new(AdapterConfig::new(StrategyKind::FineTune, 0), &bb).unwrap();
    let mut s = sample(&[&[1]], &[]);
    s.response_tokens.clear();
    s.response_mask = vec![false; s.context_tokens.len()];
    let mut g = Graph::new();
    let b = ft.bind(&mut g, &bb, true).unwrap();
    assert!(matches!(response_nll(&mut g, &b, &[s]), Err(Error::EmptyLoss)));
}

#[test]
fn full_sequence_objective_scores_every_next_token() {
    let bb = Backbone::init(config(), 4).unwrap();
    let ft = Adapter::new(AdapterConfig::new(StrategyKind::FineTune, 0), &bb).unwrap();
    let s = sample(&[&[1, 2]], &[3]);
    let mut g = Graph::new();
    let b = ft.bind(&mut g, &bb, false).unwrap();
    let (_, n) = batch_nll(&mut g, &b, std::slice::from_ref(&s), Objective::FullSequence).unwrap();
    assert_eq!(n, s.len() - 1);
    assert_eq!(s.sequence()[2], SEP);
}

fn small_train_config(kind: StrategyKind) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_epochs: 3,
        patience: 5,
        learning_rate: 1e-2,
        ..TrainConfig::for_strategy(kind)
    }
}

fn trainer(kind: StrategyKind, seed: u64) -> Trainer {
    let bb = Backbone::init(config(), 21).unwrap();
    let a = Adapter::new(AdapterConfig::new(kind, 2).with_seed(3), &bb).unwrap();
    Trainer::new(
        bb,
        a,
        lookup(12),
        lookup(4),
        TrainConfig {
            seed,
            ..small_train_config(kind)
        },
    )
    .unwrap()
}

#[test]
fn prompt_strategies_keep_the_backbone_checksum_on_every_epoch() {
    for kind in StrategyKind::ALL {
        let t = trainer(kind, 1);
        let base = t.backbone().checksum();
        let before = t.adapter().params().checksum();
        let out = t.train().unwrap();
        let sums: Vec<u64> = out.log.rows.iter().map(|r| r.backbone_checksum).collect();
        if kind.freezes_backbone() {
            assert!(sums.iter().all(|&c| c == base), "{kind}");
            assert_eq!(out.backbone.checksum(), base);
            assert_ne!(out.adapter.params().checksum(), before, "{kind} did not train");
        } else {
            assert!(sums.iter().all(|&c| c != base));
        }
    }
}

#[test]
fn dynamic_prompt_hundred_updates_move_only_the_prompt_transformer() {
    let bb = Backbone::init(config(), 21).unwrap();
    let a = Adapter::new(AdapterConfig::new(StrategyKind::DynamicPrompt, 2), &bb).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        max_epochs: 25,
        patience: 100,
        ..TrainConfig::for_strategy(StrategyKind::DynamicPrompt)
    };
    let base = bb.checksum();
    let pt_before = a.params().checksum();
    let out = Trainer::new(bb, a, lookup(4), lookup(2), cfg).unwrap().train().unwrap();
    assert_eq!(out.log.rows.last().unwrap().step, 100);
    assert_eq!(out.backbone.checksum(), base);
    assert_ne!(out.adapter.params().checksum(), pt_before);
}

#[test]
fn runs_are_deterministic_and_return_the_best_epoch() {
    let a = trainer(StrategyKind::PrefixTuning, 7).train().unwrap();
    let b = trainer(StrategyKind::PrefixTuning, 7).train().unwrap();
    let fields = |o: &TrainOutcome| {
        o.log
            .rows
            .iter()
            .map(LogRow::deterministic_fields)
            .collect::<Vec<_>>()
    };
    assert_eq!(fields(&a), fields(&b));
    assert_eq!(a.adapter, b.adapter);
    assert!(a.log.rows.iter().all(|r| a.best_valid <= r.valid_loss));
    let best_row = &a.log.rows[a.best_epoch - 1];
    assert_eq!(best_row.valid_loss, a.best_valid);
    let recomputed = mean_response_nll(&a.adapter, &a.backbone, &lookup(4), 4).unwrap();
    assert_eq!(recomputed, a.best_valid);
}

#[test]
fn restoring_a_snapshot_reproduces_the_trajectory() {
    let mut t = trainer(StrategyKind::SoftPrompt, 2);
    t.run_epoch().unwrap();
    let snap = t.snapshot();
    let rest: Vec<String> = (0..2)
        .map(|_| t.run_epoch().unwrap().deterministic_fields())
        .collect();
    let mut fresh = trainer(StrategyKind::SoftPrompt, 99);
    fresh.restore(&snap).unwrap();
    let again: Vec<String> = (0..2)
        .map(|_| fresh.run_epoch().unwrap().deterministic_fields())
        .collect();
    assert_eq!(rest, again);
    assert_eq!(snap.epoch(), 1);
}

#[test]
fn log_csv_has_the_documented_header() {
    let out = trainer(StrategyKind::SoftPrompt, 1).train().unwrap();
    let csv = out.log.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    assert_eq!(lines.count(), 3);
    assert!(csv.lines().nth(1).unwrap().split(',').count() == 7);
}

#[test]
fn single_mapping_corpus_converges() {
    let bb = Backbone::init(config(), 5).unwrap();
    let a = Adapter::new(AdapterConfig::new(StrategyKind::FineTune, 0), &bb).unwrap();
    let data = vec![sample(&[&[1, 2]], &[3]); 4];
    let cfg = TrainConfig {
        learning_rate: 3e-2,
        batch_size: 4,
        max_epochs: 150,
        patience: 150,
        ..TrainConfig::for_strategy(StrategyKind::FineTune)
    };
    let out = Trainer::new(bb, a, data.clone(), data, cfg).unwrap().train().unwrap();
    assert!(out.best_valid < 0.05, "loss {}", out.best_valid);
}
