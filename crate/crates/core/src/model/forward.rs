//! Instrumented forward pass.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, Nonlinearity, ResidualStyle};
use crate::model::weights::{LayerWeights, WeightSet};
use crate::tensor::{self, layer_norm, mat_vec, vec_mat, Matrix};

/// Everything recorded during one forward pass. Layer vectors are indexed
/// from 0 (`layer_outputs[0]` is the output of layer 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// seq_len × vocab_size
    pub logits: Matrix,
    /// Per layer: seq_len × d_model hidden state leaving the block.
    pub layer_outputs: Vec<Matrix>,
    /// Per layer: seq_len × d_model representation entering the FF sublayer.
    pub ff_inputs: Vec<Matrix>,
    /// Per layer: seq_len × d_ff raw inner products of the FF input with each key.
    pub key_products: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.logits.rows()
    }
}

/// Immutable, validated model handle. Safe to share across threads.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    weights: WeightSet,
    fingerprint: OnceLock<String>,
}

impl Model {
    pub fn new(config: ModelConfig, weights: WeightSet) -> Result<Self> {
        weights.validate(&config)?;
        Ok(Self {
            config,
            weights,
            fingerprint: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &WeightSet {
        &self.weights
    }

    pub fn into_parts(self) -> (ModelConfig, WeightSet) {
        (self.config, self.weights)
    }

    /// SHA-256 of the canonical weight-file encoding, hex encoded.
    pub fn fingerprint(&self) -> &str {
        self.fingerprint
            .get_or_init(|| crate::weight_io::fingerprint(&self.config, &self.weights))
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfVocab {
                token: bad,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let w = &self.weights;
        let seq = tokens.len();

        let mut hidden = Matrix::from_fn(seq, cfg.d_model, |p, j| {
            let tok = w.token_embedding.get(tokens[p] as usize, j);
            match &w.position_embedding {
                Some(pos) => tok + pos.get(p, j),
                None => tok,
            }
        });

        let mut layer_outputs = Vec::with_capacity(cfg.n_layers);
        let mut ff_inputs = Vec::with_capacity(cfg.n_layers);
        let mut key_products = Vec::with_capacity(cfg.n_layers);

        for layer in &w.layers {
            let normed = map_rows(&hidden, |r| layer_norm(r, &layer.ln1_gain, &layer.ln1_bias));
            let attn = self.attention(layer, &normed);
            let (ff_base, ff_in) = match cfg.residual_style {
                ResidualStyle::Sequential => {
                    let mid = add(&hidden, &attn);
                    let ff_in =
                        map_rows(&mid, |r| layer_norm(r, &layer.ln2_gain, &layer.ln2_bias));
                    (mid, ff_in)
                }
                ResidualStyle::Parallel => {
                    let ff_in =
                        map_rows(&hidden, |r| layer_norm(r, &layer.ln2_gain, &layer.ln2_bias));
                    (add(&hidden, &attn), ff_in)
                }
            };
            let products = map_rows(&ff_in, |x| mat_vec(&layer.ff_keys, x));
            let ff_out = map_rows(&products, |kp| {
                let act: Vec<f32> = kp.iter().map(|&v| cfg.nonlinearity.apply(v)).collect();
                vec_mat(&act, &layer.ff_values)
            });
            hidden = add(&ff_base, &ff_out);
            layer_outputs.push(hidden.clone());
            ff_inputs.push(ff_in);
            key_products.push(products);
        }

        let logits = map_rows(&hidden, |h| final_logits(h, w, true));
        Ok(ForwardTrace {
            logits,
            layer_outputs,
            ff_inputs,
            key_products,
        })
    }

    fn attention(&self, layer: &LayerWeights, x: &Matrix) -> Matrix {
        let cfg = &self.config;
        let seq = x.rows();
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let q = map_rows(x, |r| vec_mat(r, &layer.attn_query));
        let k = map_rows(x, |r| vec_mat(r, &layer.attn_key));
        let v = map_rows(x, |r| vec_mat(r, &layer.attn_value));

        let mut mixed = Matrix::zeros(seq, cfg.d_model);
        let mut scores = Vec::with_capacity(seq);
        for p in 0..seq {
            for h in 0..cfg.n_heads {
                let span = h * hd..(h + 1) * hd;
                let qp = &q.row(p)[span.clone()];
                scores.clear();
                scores.extend((0..=p).map(|j| tensor::dot(qp, &k.row(j)[span.clone()]) * scale));
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let out = &mut mixed.row_mut(p)[span.clone()];
                for (j, s) in scores.iter().enumerate() {
                    let weight = s / sum;
                    for (o, vv) in out.iter_mut().zip(&v.row(j)[span.clone()]) {
                        *o += weight * vv;
                    }
                }
            }
        }
        map_rows(&mixed, |r| vec_mat(r, &layer.attn_output))
    }
}

fn map_rows(m: &Matrix, mut f: impl FnMut(&[f32]) -> Vec<f32>) -> Matrix {
    let rows: Vec<Vec<f32>> = m.iter_rows().map(&mut f).collect();
    let cols = rows.first().map_or(0, Vec::len);
    Matrix::from_vec(m.rows(), cols, rows.concat()).expect("row lengths are uniform")
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x + y)
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn final_logits(h: &[f32], w: &WeightSet, apply_final_norm: bool) -> Vec<f32> {
    if apply_final_norm {
        vec_mat(&layer_norm(h, &w.final_ln_gain, &w.final_ln_bias), &w.output_embedding)
    } else {
        vec_mat(h, &w.output_embedding)
    }
}

/// `f(x · Kᵀ) · V` for a single FF input vector.
pub fn ff_apply(x: &[f32], keys: &Matrix, values: &Matrix, f: Nonlinearity) -> Result<Vec<f32>> {
    if keys.cols() != x.len() {
        return Err(Error::ShapeMismatch {
            tensor: "ff keys".into(),
            expected: vec![keys.rows(), x.len()],
            actual: keys.shape().to_vec(),
        });
    }
    if values.shape() != [keys.rows(), x.len()] {
        return Err(Error::ShapeMismatch {
            tensor: "ff values".into(),
            expected: vec![keys.rows(), x.len()],
            actual: values.shape().to_vec(),
        });
    }
    let act: Vec<f32> = mat_vec(keys, x).into_iter().map(|v| f.apply(v)).collect();
    Ok(vec_mat(&act, values))
}

/// Projects a hidden state onto the vocabulary through the output embedding,
/// optionally passing it through the final layer norm first.
pub fn logits_from_hidden(h: &[f32], weights: &WeightSet, apply_final_norm: bool) -> Result<Vec<f32>> {
    let d = weights.output_embedding.rows();
    if h.len() != d {
        return Err(Error::ShapeMismatch {
            tensor: "hidden state".into(),
            expected: vec![d],
            actual: vec![h.len()],
        });
    }
    Ok(final_logits(h, weights, apply_final_norm))
}
