mod common;

use common::*;
use ffscope::editor::{mask_keys, MaskSet};
use ffscope::model::{ff_apply, logits_from_hidden, Model, ModelConfig};
use ffscope::probe::KeyId;
use ffscope::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}

#[test]
fn forward_matches_double_precision_oracle() {
    for (i, cfg) in config_variants().into_iter().enumerate() {
        let model = random_model(&cfg, 100 + i as u64, 0.3);
        for tokens in random_sequences(5, cfg.max_seq_len, cfg.vocab_size as u32, i as u64) {
            let got = model.forward(&tokens).unwrap();
            let want = oracle_forward(&cfg, model.weights(), &tokens);
            for p in 0..tokens.len() {
                assert!(max_abs_diff(got.logits.row(p), &want.logits[p]) < 1e-4);
                for l in 0..cfg.n_layers {
                    assert!(max_abs_diff(got.layer_outputs[l].row(p), &want.layer_outputs[l][p]) < 1e-4);
                    assert!(max_abs_diff(got.key_products[l].row(p), &want.key_products[l][p]) < 1e-4);
                }
            }
        }
    }
}

#[test]
fn forward_is_causal_and_bitwise_prefix_stable() {
    for cfg in config_variants() {
        let model = random_model(&cfg, 3, 0.3);
        let long = random_sequences(1, 1, cfg.vocab_size as u32, 9)[0].clone();
        let mut tokens = long;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        while tokens.len() < 12 {
            tokens.push(rng.random_range(0..cfg.vocab_size as u32));
        }
        let full = model.forward(&tokens).unwrap();
        for k in 1..tokens.len() {
            let part = model.forward(&tokens[..k]).unwrap();
            for p in 0..k {
                assert_eq!(part.logits.row(p), full.logits.row(p));
                for l in 0..cfg.n_layers {
                    assert_eq!(part.key_products[l].row(p), full.key_products[l].row(p));
                }
            }
        }
    }
}

#[test]
fn ff_apply_matches_oracle() {
    for cfg in config_variants() {
        let model = random_model(&cfg, 8, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for layer in &model.weights().layers {
            let x: Vec<f32> = (0..cfg.d_model).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = ff_apply(&x, &layer.ff_keys, &layer.ff_values, cfg.nonlinearity).unwrap();
            let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let want = oracle_ff(&x64, layer, cfg.nonlinearity);
            let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let diff = max_abs_diff(&got, &want);
            assert!(diff < 1e-6 * scale, "{diff} at scale {scale}");
        }
    }
}

#[test]
fn ff_apply_rejects_wrong_width() {
    let cfg = ModelConfig::new(1, 8, 10, 2, 4);
    let model = random_model(&cfg, 1, 0.1);
    let l = &model.weights().layers[0];
    assert!(matches!(
        ff_apply(&[0.0; 7], &l.ff_keys, &l.ff_values, cfg.nonlinearity),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn input_validation() {
    let cfg = ModelConfig::new(2, 8, 10, 2, 4);
    let model = random_model(&cfg, 1, 0.1);
    assert!(matches!(model.forward(&[]), Err(Error::EmptySequence)));
    assert!(matches!(model.forward(&[1; 5]), Err(Error::SequenceTooLong { len: 5, max: 4 })));
    assert!(matches!(model.forward(&[10]), Err(Error::TokenOutOfVocab { token: 10, .. })));
}

#[test]
fn logits_from_last_hidden_reproduce_model_output() {
    let cfg = ModelConfig::new(2, 8, 20, 2, 8);
    let model = random_model(&cfg, 2, 0.3);
    let trace = model.forward(&[1, 2, 3]).unwrap();
    for p in 0..3 {
        let l = logits_from_hidden(trace.layer_outputs[1].row(p), model.weights(), true).unwrap();
        assert_eq!(l.as_slice(), trace.logits.row(p));
    }
    assert!(logits_from_hidden(&[0.0; 3], model.weights(), true).is_err());
}

#[test]
fn masking_zeroes_one_row_and_leaves_everything_else() {
    let cfg = ModelConfig::new(3, 8, 20, 2, 8).with_d_ff(16);
    let model = random_model(&cfg, 4, 0.3);
    let masked = mask_keys(model.weights(), &MaskSet::new("x", [KeyId::new(2, 7)])).unwrap();
    let original = model.weights();
    for (l, (a, b)) in masked.layers.iter().zip(&original.layers).enumerate() {
        for r in 0..16 {
            if l == 1 && r == 6 {
                assert!(a.ff_keys.row(r).iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(a.ff_keys.row(r), b.ff_keys.row(r));
            }
        }
        assert_eq!(a.ff_values, b.ff_values);
        assert_eq!(a.attn_query, b.attn_query);
    }
    assert_eq!(masked.token_embedding, original.token_embedding);
    assert_eq!(masked.output_embedding, original.output_embedding);
}

#[test]
fn masking_only_removes_the_masked_contributions() {
    let cfg = ModelConfig::new(2, 16, 20, 2, 8).with_d_ff(32);
    let model = random_model(&cfg, 6, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let keys: Vec<KeyId> = (0..6).map(|_| KeyId::new(2, rng.random_range(1..=32))).collect();
    let masked = mask_keys(model.weights(), &MaskSet::new("x", keys.clone())).unwrap();
    let base = &model.weights().layers[1];
    let edit = &masked.layers[1];
    for _ in 0..100 {
        let x: Vec<f32> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let full = ff_apply(&x, &base.ff_keys, &base.ff_values, cfg.nonlinearity).unwrap();
        let cut = ff_apply(&x, &edit.ff_keys, &edit.ff_values, cfg.nonlinearity).unwrap();
        let mut removed = vec![0.0f64; 16];
        let mut seen = std::collections::BTreeSet::new();
        for k in &keys {
            if !seen.insert(*k) {
                continue;
            }
            let row = k.index - 1;
            let a: f64 = (0..16).map(|j| x[j] as f64 * base.ff_keys.get(row, j) as f64).sum();
            let a = act(cfg.nonlinearity, a);
            for j in 0..16 {
                removed[j] += a * base.ff_values.get(row, j) as f64;
            }
        }
        for j in 0..16 {
            assert!((cut[j] as f64 - (full[j] as f64 - removed[j])).abs() < 1e-5);
        }
    }
}

#[test]
fn model_rejects_bad_weights() {
    let cfg = ModelConfig::new(2, 8, 20, 2, 8);
    let mut w = ffscope::synth::random_weights(&cfg, 1, 0.1);
    w.layers[1].ff_keys.set(0, 0, f32::NAN);
    assert!(matches!(Model::new(cfg.clone(), w), Err(Error::NonFiniteWeight { .. })));
    let mut w = ffscope::synth::random_weights(&cfg, 1, 0.1);
    w.final_ln_gain.pop();
    assert!(matches!(Model::new(cfg, w), Err(Error::ShapeMismatch { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masking_is_idempotent(seed in 0u64..1000, picks in proptest::collection::vec((1usize..=2, 1usize..=16), 0..10)) {
        let cfg = ModelConfig::new(2, 8, 12, 2, 4).with_d_ff(16);
        let w = ffscope::synth::random_weights(&cfg, seed, 0.3);
        let mask = MaskSet::new("p", picks.into_iter().map(|(l, i)| KeyId::new(l, i)));
        let once = mask_keys(&w, &mask).unwrap();
        prop_assert_eq!(mask_keys(&once, &mask).unwrap(), once);
    }

    #[test]
    fn growing_a_mask_never_adds_active_keys(seed in 0u64..1000, n in 0usize..16) {
        let cfg = ModelConfig::new(1, 8, 12, 2, 4).with_d_ff(16);
        let w = ffscope::synth::random_weights(&cfg, seed, 0.3);
        let x: Vec<f32> = (0..8).map(|j| (j as f32 - 3.5) / 2.0).collect();
        let active = |w: &ffscope::model::WeightSet| {
            (0..16).filter(|&r| {
                let k: f32 = w.layers[0].ff_keys.row(r).iter().zip(&x).map(|(a, b)| a * b).sum();
                k > 0.0
            }).count()
        };
        let small = mask_keys(&w, &MaskSet::new("s", (1..=n).map(|i| KeyId::new(1, i)))).unwrap();
        let large = mask_keys(&w, &MaskSet::new("l", (1..=n + 1).map(|i| KeyId::new(1, i)))).unwrap();
        prop_assert!(active(&large) <= active(&small));
    }
}
