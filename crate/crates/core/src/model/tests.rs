use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::numerics::{Graph, Tensor};

fn cfg(tie: bool) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        vocab_size: 11,
        max_positions: 16,
        tie_lm_head: tie,
    }
}

fn logits_of(b: &Backbone, tokens: &[usize]) -> Tensor {
    let mut g = Graph::new();
    let v = b.bind(&mut g, false);
    let out = v.forward(&mut g, tokens, 0, &PastState::empty()).unwrap();
    g.value(out.logits).clone()
}

#[test]
fn single_token_shape_contract() {
    let b = Backbone::init(cfg(true), 1).unwrap();
    let mut g = Graph::new();
    let v = b.bind(&mut g, false);
    let out = v.forward(&mut g, &[3], 0, &PastState::empty()).unwrap();
    assert_eq!(g.shape(out.logits), &[1, 11]);
    assert_eq!(g.shape(out.hidden), &[1, 8]);
    assert_eq!(out.new_past.t_past(), 1);
    assert_eq!(out.new_past.layers().len(), 2);
}

#[test]
fn chunked_forward_matches_single_shot() {
    for tie in [true, false] {
        let b = Backbone::init(cfg(tie), 2).unwrap();
        let tokens = [1, 4, 2, 9, 7];
        let full = logits_of(&b, &tokens);

        let mut g = Graph::new();
        let v = b.bind(&mut g, false);
        let first = v.forward(&mut g, &tokens[..3], 0, &PastState::empty()).unwrap();
        let second = v.forward(&mut g, &tokens[3..], 3, &first.new_past).unwrap();
        let tail = g.value(second.logits);
        for r in 0..2 {
            for (a, b) in tail.row(r).iter().zip(full.row(3 + r)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn later_tokens_do_not_affect_earlier_logits() {
    let b = Backbone::init(cfg(true), 3).unwrap();
    let base = logits_of(&b, &[1, 2, 3, 4, 5]);
    let moved = logits_of(&b, &[1, 2, 3, 4, 10]);
    for r in 0..4 {
        for (x, y) in base.row(r).iter().zip(moved.row(r)) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    assert_ne!(base.row(4), moved.row(4));
}

#[test]
fn past_built_from_real_prefix_equals_full_forward() {
    // A past injected from outside the call behaves like k leading positions.
    let b = Backbone::init(cfg(false), 4).unwrap();
    let tokens = [5, 6, 1, 2, 3];
    let full = logits_of(&b, &tokens);

    let mut g = Graph::new();
    let v = b.bind(&mut g, false);
    let prefix = v.forward(&mut g, &tokens[..2], 0, &PastState::empty()).unwrap();
    let snapshot = prefix.new_past.tensors(&g);

    let mut g2 = Graph::new();
    let v2 = b.bind(&mut g2, false);
    let injected = PastState::from_tensors(&mut g2, &snapshot).unwrap();
    let rest = v2.forward(&mut g2, &tokens[2..], 2, &injected).unwrap();
    let got = g2.value(rest.logits);
    for r in 0..3 {
        for (a, b) in got.row(r).iter().zip(full.row(2 + r)) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn position_overflow_is_a_capacity_error() {
    let b = Backbone::init(cfg(true), 5).unwrap();
    let mut g = Graph::new();
    let v = b.bind(&mut g, false);
    let tokens = vec![1; 17];
    assert!(matches!(
        v.forward(&mut g, &tokens, 0, &PastState::empty()),
        Err(Error::Capacity { needed: 17, max: 16 })
    ));
}

#[test]
fn past_layer_mismatch_is_a_config_error() {
    let b = Backbone::init(cfg(true), 6).unwrap();
    let mut g = Graph::new();
    let v = b.bind(&mut g, false);
    let one_layer = vec![(Tensor::zeros(&[2, 1, 4]), Tensor::zeros(&[2, 1, 4]))];
    let past = PastState::from_tensors(&mut g, &one_layer).unwrap();
    assert!(matches!(
        v.forward(&mut g, &[1], 1, &past),
        Err(Error::Config(_))
    ));
    let empty = PastState::empty();
    assert!(matches!(v.forward(&mut g, &[1], 2, &empty), Err(Error::Config(_))));
}

#[test]
fn parameter_count_matches_config_formula() {
    for tie in [true, false] {
        let c = cfg(tie);
        let b = Backbone::init(c.clone(), 7).unwrap();
        assert_eq!(b.params().count(), c.parameter_count());
    }
}

#[test]
fn checksum_contract() {
    let b = Backbone::init(cfg(true), 8).unwrap();
    assert_eq!(b.checksum(), b.clone().checksum());
    let mut flipped = b.clone();
    let x = &mut flipped.params_mut().tensors_mut()[3].data_mut()[0];
    *x = f64::from_bits(x.to_bits() ^ 1);
    assert_ne!(b.checksum(), flipped.checksum());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.pfck");
    b.save(&path).unwrap();
    assert_eq!(Backbone::load(&path).unwrap().checksum(), b.checksum());
}

#[test]
fn identical_seeds_give_identical_forward() {
    let a = logits_of(&Backbone::init(cfg(true), 9).unwrap(), &[1, 2, 3]);
    let b = logits_of(&Backbone::init(cfg(true), 9).unwrap(), &[1, 2, 3]);
    assert_eq!(a, b);
}

#[test]
fn random_splits_match_single_shot() {
    let b = Backbone::init(cfg(true), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let len = rng.random_range(2..=12);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..11)).collect();
        let full = logits_of(&b, &tokens);
        let mut g = Graph::new();
        let v = b.bind(&mut g, false);
        let mut past = PastState::empty();
        let mut at = 0;
        while at < len {
            let step = rng.random_range(1..=(len - at));
            let out = v.forward(&mut g, &tokens[at..at + step], at, &past).unwrap();
            for r in 0..step {
                for (x, y) in g.value(out.logits).row(r).iter().zip(full.row(at + r)) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
            past = out.new_past;
            at += step;
        }
    }
}
