//! Shared fixtures and a straight-line double-precision reference forward pass.
#![allow(dead_code)]

use ffscope::corpus::Corpus;
use ffscope::model::{
    Model, ModelConfig, Nonlinearity, PositionEncoding, ResidualStyle, WeightSet,
};
use ffscope::synth::{self, DetectorSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct OracleTrace {
    pub layer_outputs: Vec<Vec<Vec<f64>>>,
    pub key_products: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<Vec<f64>>,
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn ln(x: &[f64], g: &[f32], b: &[f32]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / sd * g[i] as f64 + b[i] as f64)
        .collect()
}

/// `x · W` where `W` is stored row-major with `rows = x.len()`.
fn xw(x: &[f64], w: &ffscope::tensor::Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * w.get(i, j) as f64;
        }
    }
    out
}

pub fn act(f: Nonlinearity, x: f64) -> f64 {
    match f {
        Nonlinearity::Relu => x.max(0.0),
        Nonlinearity::Gelu => {
            0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        }
    }
}

/// Feed-forward sublayer `f(x·Kᵀ)·V` in double precision.
pub fn oracle_ff(x: &[f64], layer: &ffscope::model::LayerWeights, f: Nonlinearity) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; d];
    for i in 0..layer.ff_keys.rows() {
        let k: f64 = (0..d).map(|j| x[j] * layer.ff_keys.get(i, j) as f64).sum();
        let a = act(f, k);
        for j in 0..d {
            out[j] += a * layer.ff_values.get(i, j) as f64;
        }
    }
    out
}

pub fn oracle_forward(cfg: &ModelConfig, w: &WeightSet, tokens: &[u32]) -> OracleTrace {
    let d = cfg.d_model;
    let hd = d / cfg.n_heads;
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            let mut v = to64(w.token_embedding.row(t as usize));
            if let Some(pos) = &w.position_embedding {
                for (a, b) in v.iter_mut().zip(pos.row(p)) {
                    *a += *b as f64;
                }
            }
            v
        })
        .collect();
    let mut layer_outputs = Vec::new();
    let mut key_products = Vec::new();
    for layer in &w.layers {
        let normed: Vec<Vec<f64>> = h.iter().map(|r| ln(r, &layer.ln1_gain, &layer.ln1_bias)).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|r| xw(r, &layer.attn_query)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|r| xw(r, &layer.attn_key)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| xw(r, &layer.attn_value)).collect();
        let mut attn = Vec::new();
        for p in 0..tokens.len() {
            let mut mixed = vec![0.0; d];
            for head in 0..cfg.n_heads {
                let r = head * hd..(head + 1) * hd;
                let s: Vec<f64> = (0..=p)
                    .map(|j| r.clone().map(|c| q[p][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for c in r.clone() {
                        mixed[c] += ej / z * v[j][c];
                    }
                }
            }
            attn.push(xw(&mixed, &layer.attn_output));
        }
        let mut products = Vec::new();
        let mut next = Vec::new();
        for p in 0..tokens.len() {
            let (base, ff_in) = match cfg.residual_style {
                ResidualStyle::Sequential => {
                    let mid: Vec<f64> = h[p].iter().zip(&attn[p]).map(|(a, b)| a + b).collect();
                    let ff_in = ln(&mid, &layer.ln2_gain, &layer.ln2_bias);
                    (mid, ff_in)
                }
                ResidualStyle::Parallel => {
                    let base: Vec<f64> = h[p].iter().zip(&attn[p]).map(|(a, b)| a + b).collect();
                    (base, ln(&h[p], &layer.ln2_gain, &layer.ln2_bias))
                }
            };
            products.push(
                (0..layer.ff_keys.rows())
                    .map(|i| (0..d).map(|j| ff_in[j] * layer.ff_keys.get(i, j) as f64).sum())
                    .collect(),
            );
            let ff = oracle_ff(&ff_in, layer, cfg.nonlinearity);
            next.push(base.iter().zip(&ff).map(|(a, b)| a + b).collect());
        }
        h = next;
        layer_outputs.push(h.clone());
        key_products.push(products);
    }
    let logits = h
        .iter()
        .map(|r| xw(&ln(r, &w.final_ln_gain, &w.final_ln_bias), &w.output_embedding))
        .collect();
    OracleTrace {
        layer_outputs,
        key_products,
        logits,
    }
}

pub fn random_model(cfg: &ModelConfig, seed: u64, std: f32) -> Model {
    Model::new(cfg.clone(), synth::random_weights(cfg, seed, std)).unwrap()
}

pub fn random_sequences(n: usize, max_len: usize, vocab: u32, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| rng.random_range(0..vocab)).collect()
        })
        .collect()
}

pub fn config_variants() -> Vec<ModelConfig> {
    let base = ModelConfig::new(3, 16, 40, 4, 24).with_d_ff(32);
    vec![
        base.clone(),
        base.clone().with_nonlinearity(Nonlinearity::Gelu),
        base.clone().with_residual_style(ResidualStyle::Parallel),
        base.with_position_encoding(PositionEncoding::None),
    ]
}

/// Three planted detectors over byte tokens: `@`→`a` (layer 2), `$`→`b`
/// (layer 3), `#`→`c` (layer 4).
pub fn detector_specs() -> Vec<DetectorSpec> {
    vec![
        DetectorSpec::new(2, 5, b'@' as u32, b'a' as u32),
        DetectorSpec::new(3, 9, b'$' as u32, b'b' as u32),
        DetectorSpec::new(4, 2, b'#' as u32, b'c' as u32),
    ]
}

pub fn detector_config() -> ModelConfig {
    ModelConfig::new(4, 16, 128, 4, 64).with_d_ff(64)
}

pub const FILLER: &[u8] = b"defghijklmnopqrstuvwxyz =()+.,_";

/// Source text with `concept_lines` lines per detector built only from the
/// detector's special characters, mixed with `filler_lines` lines that avoid them.
pub fn detector_source(specs: &[DetectorSpec], concept_lines: usize, filler_lines: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines: Vec<String> = (0..filler_lines)
        .map(|_| {
            let len = rng.random_range(4..=12);
            (0..len)
                .map(|_| FILLER[rng.random_range(0..FILLER.len())] as char)
                .collect()
        })
        .collect();
    for s in specs {
        let pair = format!("{}{}", s.detect_token as u8 as char, s.predict_token as u8 as char);
        for _ in 0..concept_lines {
            lines.push(pair.repeat(rng.random_range(1..=3)));
        }
    }
    // Deterministic shuffle.
    for i in (1..lines.len()).rev() {
        let j = rng.random_range(0..=i);
        lines.swap(i, j);
    }
    let mut text = lines.join("\n");
    text.push('\n');
    text
}

pub fn byte_corpus(text: &str, max_len: usize) -> Corpus {
    Corpus::from_texts(
        &[("fixture.py", text)],
        ffscope::corpus::Tokenizer::byte_level(),
        ffscope::corpus::Granularity::Lines,
        max_len,
    )
    .unwrap()
}

pub fn special_concept() -> ffscope::concept::Concept {
    ffscope::concept::ConceptSpec::new("specials", "[@$#]", "([@$#])")
        .compile()
        .unwrap()
}
