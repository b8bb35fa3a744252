//! Synthetic weight sets: seeded random models and engineered detector models.
//!
//! A detector model plants, for each [`DetectorSpec`], one FF key that fires
//! on a chosen token and a value that pushes the output toward another token.
//! Special tokens live on reserved pairs of residual dimensions (`+a` on one,
//! `-a` on the other) that no noise weight reads or writes, so:
//!
//! * the planted key's raw product is `gain · ‖e(detect)‖²` at positions whose
//!   token is the detect token and exactly zero everywhere else,
//! * zeroing the planted key removes the only route to the predicted token,
//! * noise keys never respond to reserved-only positions.
//!
//! Attention weights are noise confined to the unreserved dimensions, so the
//! residual stream carries the current token's embedding through each block.
//! The output embedding is tied to the token embedding (plus noise), which
//! makes an unedited position predict its own token.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelConfig, PositionEncoding, WeightSet};
use crate::probe::KeyId;
use crate::tensor::{Matrix, LAYER_NORM_EPS};

pub const DEFAULT_GAIN: f32 = 10.0;
pub const NOISE_SCALE: f32 = 0.01;
/// Size of the predicted-token component written by a planted value,
/// relative to the unit-variance token embeddings.
const PREDICT_BOOST: f32 = 8.0;

fn default_gain() -> f32 {
    DEFAULT_GAIN
}

/// One planted detector key. `layer` and `key` are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub layer: usize,
    pub key: usize,
    pub detect_token: u32,
    pub predict_token: u32,
    #[serde(default = "default_gain")]
    pub gain: f32,
}

impl DetectorSpec {
    pub fn new(layer: usize, key: usize, detect_token: u32, predict_token: u32) -> Self {
        Self {
            layer,
            key,
            detect_token,
            predict_token,
            gain: DEFAULT_GAIN,
        }
    }

    pub fn key_id(&self) -> KeyId {
        KeyId::new(self.layer, self.key)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample::<f32, _>(StandardNormal)
}

fn noise_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * normal(rng))
}

/// Dense Gaussian weights: embeddings ~ N(0, 1), linear maps ~ N(0, std²),
/// layer-norm gains near 1 and biases near 0.
pub fn random_weights(config: &ModelConfig, seed: u64, std: f32) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let vec_near = |rng: &mut ChaCha8Rng, center: f32| -> Vec<f32> {
        (0..d).map(|_| center + 0.1 * normal(rng)).collect()
    };
    let token_embedding = noise_matrix(&mut rng, config.vocab_size, d, 1.0);
    let position_embedding = (config.position_encoding == PositionEncoding::Learned)
        .then(|| noise_matrix(&mut rng, config.max_seq_len, d, 0.3));
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            ln1_gain: vec_near(&mut rng, 1.0),
            ln1_bias: vec_near(&mut rng, 0.0),
            attn_query: noise_matrix(&mut rng, d, d, std),
            attn_key: noise_matrix(&mut rng, d, d, std),
            attn_value: noise_matrix(&mut rng, d, d, std),
            attn_output: noise_matrix(&mut rng, d, d, std),
            ln2_gain: vec_near(&mut rng, 1.0),
            ln2_bias: vec_near(&mut rng, 0.0),
            ff_keys: noise_matrix(&mut rng, config.d_ff, d, std),
            ff_values: noise_matrix(&mut rng, config.d_ff, d, std),
        })
        .collect();
    let final_ln_gain = vec_near(&mut rng, 1.0);
    let final_ln_bias = vec_near(&mut rng, 0.0);
    let output_embedding = noise_matrix(&mut rng, d, config.vocab_size, std);
    WeightSet {
        token_embedding,
        position_embedding,
        layers,
        final_ln_gain,
        final_ln_bias,
        output_embedding,
    }
}

/// Reserved dimension pairs, one per distinct special token.
#[derive(Debug, Clone)]
pub struct DetectorLayout {
    pub special_tokens: Vec<u32>,
    pub reserved_dims: usize,
    /// Magnitude of each entry of a special-token embedding.
    pub amplitude: f32,
}

impl DetectorLayout {
    fn pair(&self, token: u32) -> Option<(usize, usize)> {
        self.special_tokens
            .iter()
            .position(|&t| t == token)
            .map(|i| (2 * i, 2 * i + 1))
    }

    /// Squared norm of a special-token embedding.
    pub fn special_norm_sq(&self) -> f32 {
        2.0 * self.amplitude * self.amplitude
    }
}

fn check_specs(config: &ModelConfig, specs: &[DetectorSpec]) -> Result<DetectorLayout> {
    config.validate()?;
    let mut seen = HashSet::new();
    let mut special = Vec::new();
    for s in specs {
        if s.layer == 0 || s.layer > config.n_layers {
            return Err(Error::IndexOutOfBounds(format!(
                "detector layer {} not in 1..={}",
                s.layer, config.n_layers
            )));
        }
        if s.key == 0 || s.key > config.d_ff {
            return Err(Error::IndexOutOfBounds(format!(
                "detector key {} not in 1..={}",
                s.key, config.d_ff
            )));
        }
        for tok in [s.detect_token, s.predict_token] {
            if tok as usize >= config.vocab_size {
                return Err(Error::IndexOutOfBounds(format!(
                    "token {tok} outside vocabulary of {}",
                    config.vocab_size
                )));
            }
            if !special.contains(&tok) {
                special.push(tok);
            }
        }
        if s.detect_token == s.predict_token {
            return Err(Error::InvalidConfig(format!(
                "detector at {} detects and predicts the same token",
                s.key_id()
            )));
        }
        if !(s.gain.is_finite() && s.gain > 0.0) {
            return Err(Error::InvalidConfig(format!("gain {} must be positive", s.gain)));
        }
        if !seen.insert((s.layer, s.key)) {
            return Err(Error::InvalidConfig(format!(
                "duplicate detector at {}",
                s.key_id()
            )));
        }
    }
    let reserved = 2 * special.len();
    if config.d_model < reserved + 2 {
        return Err(Error::InvalidConfig(format!(
            "d_model {} cannot hold {} special tokens (needs at least {})",
            config.d_model,
            special.len(),
            reserved + 2
        )));
    }
    // Unit variance after subtracting the layer-norm epsilon: layer norm then
    // maps a special-token embedding onto itself.
    let amplitude = ((1.0 - LAYER_NORM_EPS) * config.d_model as f32 / 2.0).sqrt();
    Ok(DetectorLayout {
        special_tokens: special,
        reserved_dims: reserved,
        amplitude,
    })
}

/// Layout the detector builder would use for `specs`, without building weights.
pub fn detector_layout(config: &ModelConfig, specs: &[DetectorSpec]) -> Result<DetectorLayout> {
    check_specs(config, specs)
}

/// Builds a seeded-noise model with one planted detector key per spec.
pub fn build_detector_model(
    config: &ModelConfig,
    specs: &[DetectorSpec],
    seed: u64,
) -> Result<WeightSet> {
    let layout = check_specs(config, specs)?;
    let d = config.d_model;
    let r = layout.reserved_dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let free_noise = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, free_rows: bool, free_cols: bool| {
        Matrix::from_fn(rows, cols, |i, j| {
            let v = NOISE_SCALE * normal(rng);
            if (free_rows && i < r) || (free_cols && j < r) {
                0.0
            } else {
                v
            }
        })
    };

    let target_norm_sq = (1.0 - LAYER_NORM_EPS) * d as f32;
    let mut token_embedding = Matrix::zeros(config.vocab_size, d);
    for tok in 0..config.vocab_size {
        let row = token_embedding.row_mut(tok);
        if let Some((a, b)) = layout.pair(tok as u32) {
            row[a] = layout.amplitude;
            row[b] = -layout.amplitude;
            continue;
        }
        for v in row[r..].iter_mut() {
            *v = normal(&mut rng);
        }
        let free = &mut row[r..];
        let mean = free.iter().sum::<f32>() / free.len() as f32;
        free.iter_mut().for_each(|v| *v -= mean);
        let norm_sq: f32 = free.iter().map(|v| v * v).sum();
        let scale = (target_norm_sq / norm_sq.max(f32::MIN_POSITIVE)).sqrt();
        free.iter_mut().for_each(|v| *v *= scale);
    }

    let position_embedding = (config.position_encoding == PositionEncoding::Learned)
        .then(|| free_noise(&mut rng, config.max_seq_len, d, false, true));

    let mut layers: Vec<LayerWeights> = (0..config.n_layers)
        .map(|_| {
            let mut layer = LayerWeights::zeros(d, config.d_ff);
            layer.attn_query = free_noise(&mut rng, d, d, true, false);
            layer.attn_key = free_noise(&mut rng, d, d, true, false);
            layer.attn_value = free_noise(&mut rng, d, d, true, false);
            layer.attn_output = free_noise(&mut rng, d, d, false, true);
            layer.ff_keys = free_noise(&mut rng, config.d_ff, d, false, true);
            layer.ff_values = free_noise(&mut rng, config.d_ff, d, false, true);
            layer
        })
        .collect();

    for s in specs {
        let layer = &mut layers[s.layer - 1];
        let row = s.key - 1;
        let (da, db) = layout.pair(s.detect_token).expect("detect token is special");
        let (pa, pb) = layout.pair(s.predict_token).expect("predict token is special");
        layer.ff_keys.row_mut(row).fill(0.0);
        layer.ff_keys.set(row, da, s.gain * layout.amplitude);
        layer.ff_keys.set(row, db, -s.gain * layout.amplitude);
        // act = gain · ‖e‖², so this writes PREDICT_BOOST · e(predict).
        let per_unit = PREDICT_BOOST / (s.gain * layout.special_norm_sq());
        layer.ff_values.row_mut(row).fill(0.0);
        layer.ff_values.set(row, pa, per_unit * layout.amplitude);
        layer.ff_values.set(row, pb, -per_unit * layout.amplitude);
    }

    let mut output_embedding = token_embedding.transpose();
    for i in r..d {
        for v in output_embedding.row_mut(i) {
            *v += NOISE_SCALE * normal(&mut rng);
        }
    }

    Ok(WeightSet {
        token_embedding,
        position_embedding,
        layers,
        final_ln_gain: vec![1.0; d],
        final_ln_bias: vec![0.0; d],
        output_embedding,
    })
}
