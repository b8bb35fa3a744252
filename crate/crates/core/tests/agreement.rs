mod common;

use common::*;
use ffscope::agreement::{
    agreement_profile, context_sweep, heatmap_svg, layer_predictions, profile_from_counts,
};
use ffscope::corpus::Corpus;
use ffscope::model::{Model, ModelConfig};
use ffscope::tensor::argmax;

/// Per-example recount: every line prefix gets its own forward pass.
fn recount(model: &Model, corpus: &Corpus, final_norm: bool) -> (Vec<u64>, u64) {
    let n = model.config().n_layers;
    let mut agree = vec![0u64; n];
    let mut total = 0;
    for p in corpus.prefixes() {
        for k in 1..=p.tokens.len() {
            let preds = layer_predictions(model, &p.tokens[..k], k - 1, final_norm, false).unwrap();
            let last = preds[n - 1].top_token;
            for (l, pred) in preds.iter().enumerate() {
                agree[l] += (pred.top_token == last) as u64;
            }
            total += 1;
        }
    }
    (agree, total)
}

fn fixture_200() -> Corpus {
    // 40 lines of 5 tokens: 200 line-prefix examples.
    let seqs = random_sequences(40, 5, 32, 77)
        .into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            while s.len() < 5 {
                s.push((i % 32) as u32);
            }
            s
        })
        .collect();
    Corpus::from_token_sequences(seqs)
}

#[test]
fn profile_equals_recount_on_200_prefixes() {
    let cfg = ModelConfig::new(4, 16, 32, 4, 16).with_d_ff(32);
    let model = random_model(&cfg, 12, 0.6);
    let corpus = fixture_200();
    for final_norm in [true, false] {
        let profile = agreement_profile(&model, &corpus, final_norm).unwrap();
        let (agree, total) = recount(&model, &corpus, final_norm);
        assert_eq!(total, 200);
        assert_eq!(profile.examples, total);
        assert_eq!(profile.agree, agree);
        assert_eq!(profile.rate(4), 1.0);
    }
}

#[test]
fn layer_predictions_match_double_precision_oracle() {
    let cfg = ModelConfig::new(3, 4, 6, 2, 8).with_d_ff(8);
    let model = random_model(&cfg, 21, 0.8);
    let tokens = [1, 4, 2, 5];
    let preds = layer_predictions(&model, &tokens, 2, true, false).unwrap();
    let oracle = oracle_forward(&cfg, model.weights(), &tokens);
    // The last layer is the model output; intermediate layers go through the
    // final norm and the output embedding.
    let w = model.weights();
    for l in 0..3 {
        let h = &oracle.layer_outputs[l][2];
        let n = h.len() as f64;
        let mean = h.iter().sum::<f64>() / n;
        let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let normed: Vec<f64> = h
            .iter()
            .enumerate()
            .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * w.final_ln_gain[j] as f64 + w.final_ln_bias[j] as f64)
            .collect();
        let logits: Vec<f64> = (0..6)
            .map(|t| (0..4).map(|j| normed[j] * w.output_embedding.get(j, t) as f64).sum())
            .collect();
        let best = (0..6).fold(0, |b, t| if logits[t] > logits[b] { t } else { b });
        assert_eq!(preds[l].top_token as usize, best, "layer {}", l + 1);
    }
}

#[test]
fn shifting_logits_keeps_top_tokens() {
    let cfg = ModelConfig::new(2, 8, 16, 2, 8);
    let model = random_model(&cfg, 5, 0.5);
    let preds = layer_predictions(&model, &[3, 1, 4], 2, true, true).unwrap();
    for p in preds {
        let d = p.distribution.unwrap();
        let shifted: Vec<f32> = d.iter().map(|v| v + 3.5).collect();
        assert_eq!(argmax(&shifted) as u32, p.top_token);
    }
}

#[test]
fn sweep_column_marginal_equals_profile() {
    let cfg = ModelConfig::new(3, 8, 32, 2, 16).with_d_ff(16);
    let model = random_model(&cfg, 13, 0.6);
    let corpus = fixture_200();
    let matrix = context_sweep(&model, &corpus, 16, true).unwrap();
    let profile = agreement_profile(&model, &corpus, true).unwrap();
    assert_eq!(profile_from_counts(&matrix.counts, true), profile);
    let weighted: f64 = (1..=5)
        .map(|c| matrix.rate(2, c).unwrap() * matrix.counts.count(c) as f64)
        .sum::<f64>()
        / profile.examples as f64;
    assert!((weighted - profile.rate(2)).abs() < 1e-9);
    for c in 6..=16 {
        assert!(matrix.is_absent(c));
    }
}

#[test]
fn one_cell_heatmap_is_full_intensity() {
    let cfg = ModelConfig::new(1, 8, 16, 2, 8);
    let model = random_model(&cfg, 1, 0.5);
    let corpus = Corpus::from_token_sequences(vec![vec![1, 2]]);
    let m = context_sweep(&model, &corpus, 1, true).unwrap();
    let svg = heatmap_svg(&m).unwrap();
    assert_eq!(svg.matches("<rect class=\"cell\"").count(), 1);
    assert!(svg.contains("fill=\"#08306b\""));
}

#[test]
fn large_heatmap_cell_count() {
    let cfg = ModelConfig::new(32, 8, 16, 2, 96).with_d_ff(8);
    let model = random_model(&cfg, 1, 0.2);
    let corpus = Corpus::from_token_sequences(vec![(0..20).map(|i| i % 16).collect(), vec![3, 4]]);
    let m = context_sweep(&model, &corpus, 89, true).unwrap();
    let svg = heatmap_svg(&m).unwrap();
    assert_eq!(svg.matches("<rect class=\"cell").count(), 2848);
    let present = (1..=89).filter(|&c| !m.is_absent(c)).count();
    assert_eq!(present, 20);
    assert_eq!(svg.matches("data-rate=").count(), 32 * present);
    assert_eq!(svg.matches("fill=\"url(#hatch)\"").count(), 32 * (89 - present));
}

#[test]
fn empty_corpus_is_rejected() {
    let cfg = ModelConfig::new(1, 8, 16, 2, 8);
    let model = random_model(&cfg, 1, 0.5);
    let corpus = Corpus::from_token_sequences(vec![]);
    assert!(matches!(
        agreement_profile(&model, &corpus, true),
        Err(ffscope::Error::EmptyCorpus)
    ));
}
