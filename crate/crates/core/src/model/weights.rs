use std::fmt;

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, PositionEncoding};
use crate::tensor::Matrix;

/// Parameters of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    /// d_model × d_model, applied as `x · W`.
    pub attn_query: Matrix,
    pub attn_key: Matrix,
    pub attn_value: Matrix,
    pub attn_output: Matrix,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    /// d_ff × d_model; row i is the key vector of memory cell i.
    pub ff_keys: Matrix,
    /// d_ff × d_model; row i is the value vector written when key i fires.
    pub ff_values: Matrix,
}

/// Every tensor of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    /// vocab_size × d_model
    pub token_embedding: Matrix,
    /// max_seq_len × d_model, present iff positions are learned.
    pub position_embedding: Option<Matrix>,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Vec<f32>,
    pub final_ln_bias: Vec<f32>,
    /// d_model × vocab_size
    pub output_embedding: Matrix,
}

/// Identifies a tensor inside a [`WeightSet`]. Layers are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorName {
    pub layer: Option<usize>,
    pub part: &'static str,
}

impl TensorName {
    const fn global(part: &'static str) -> Self {
        Self { layer: None, part }
    }

    const fn layer(layer: usize, part: &'static str) -> Self {
        Self {
            layer: Some(layer),
            part,
        }
    }

    /// Name used in the weight file directory, e.g. `layers.1.ff_keys`.
    pub fn file_name(&self) -> String {
        match self.layer {
            Some(l) => format!("layers.{l}.{}", self.part),
            None => self.part.to_string(),
        }
    }
}

impl fmt::Display for TensorName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer {l} {}", self.part),
            None => f.write_str(self.part),
        }
    }
}

/// Borrowed view of one tensor with its logical shape.
#[derive(Debug, Clone, Copy)]
pub struct TensorRef<'a> {
    pub name: TensorName,
    pub shape: [usize; 2],
    pub data: &'a [f32],
}

impl TensorRef<'_> {
    /// Shape as written to disk: vectors are one-dimensional.
    pub fn dims(&self) -> Vec<usize> {
        if self.shape[0] == 1 && is_vector_part(self.name.part) {
            vec![self.shape[1]]
        } else {
            self.shape.to_vec()
        }
    }
}

fn is_vector_part(part: &str) -> bool {
    part.ends_with("_gain") || part.ends_with("_bias")
}

const LAYER_PARTS: [&str; 10] = [
    "ln1_gain",
    "ln1_bias",
    "attn_query",
    "attn_key",
    "attn_value",
    "attn_output",
    "ln2_gain",
    "ln2_bias",
    "ff_keys",
    "ff_values",
];

/// Canonical, ordered list of tensor names and shapes required by `config`.
pub fn required_tensors(config: &ModelConfig) -> Vec<(TensorName, Vec<usize>)> {
    let d = config.d_model;
    let mut out = vec![(
        TensorName::global("token_embedding"),
        vec![config.vocab_size, d],
    )];
    if config.position_encoding == PositionEncoding::Learned {
        out.push((
            TensorName::global("position_embedding"),
            vec![config.max_seq_len, d],
        ));
    }
    for l in 1..=config.n_layers {
        for part in LAYER_PARTS {
            let shape = match part {
                "ff_keys" | "ff_values" => vec![config.d_ff, d],
                p if is_vector_part(p) => vec![d],
                _ => vec![d, d],
            };
            out.push((TensorName::layer(l, part), shape));
        }
    }
    out.push((TensorName::global("final_ln_gain"), vec![d]));
    out.push((TensorName::global("final_ln_bias"), vec![d]));
    out.push((
        TensorName::global("output_embedding"),
        vec![d, config.vocab_size],
    ));
    out
}

fn vec_ref<'a>(name: TensorName, v: &'a [f32]) -> TensorRef<'a> {
    TensorRef {
        name,
        shape: [1, v.len()],
        data: v,
    }
}

fn mat_ref<'a>(name: TensorName, m: &'a Matrix) -> TensorRef<'a> {
    TensorRef {
        name,
        shape: m.shape(),
        data: m.as_slice(),
    }
}

impl LayerWeights {
    /// Zero-initialised block with unit layer-norm gains.
    pub fn zeros(d_model: usize, d_ff: usize) -> Self {
        Self {
            ln1_gain: vec![1.0; d_model],
            ln1_bias: vec![0.0; d_model],
            attn_query: Matrix::zeros(d_model, d_model),
            attn_key: Matrix::zeros(d_model, d_model),
            attn_value: Matrix::zeros(d_model, d_model),
            attn_output: Matrix::zeros(d_model, d_model),
            ln2_gain: vec![1.0; d_model],
            ln2_bias: vec![0.0; d_model],
            ff_keys: Matrix::zeros(d_ff, d_model),
            ff_values: Matrix::zeros(d_ff, d_model),
        }
    }
}

impl WeightSet {
    /// All-zero weights (unit layer-norm gains) shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            token_embedding: Matrix::zeros(config.vocab_size, d),
            position_embedding: (config.position_encoding == PositionEncoding::Learned)
                .then(|| Matrix::zeros(config.max_seq_len, d)),
            layers: (0..config.n_layers)
                .map(|_| LayerWeights::zeros(d, config.d_ff))
                .collect(),
            final_ln_gain: vec![1.0; d],
            final_ln_bias: vec![0.0; d],
            output_embedding: Matrix::zeros(d, config.vocab_size),
        }
    }

    /// Every tensor in canonical order (the order of [`required_tensors`]).
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![mat_ref(
            TensorName::global("token_embedding"),
            &self.token_embedding,
        )];
        if let Some(p) = &self.position_embedding {
            out.push(mat_ref(TensorName::global("position_embedding"), p));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            out.push(vec_ref(TensorName::layer(l, "ln1_gain"), &layer.ln1_gain));
            out.push(vec_ref(TensorName::layer(l, "ln1_bias"), &layer.ln1_bias));
            out.push(mat_ref(TensorName::layer(l, "attn_query"), &layer.attn_query));
            out.push(mat_ref(TensorName::layer(l, "attn_key"), &layer.attn_key));
            out.push(mat_ref(TensorName::layer(l, "attn_value"), &layer.attn_value));
            out.push(mat_ref(TensorName::layer(l, "attn_output"), &layer.attn_output));
            out.push(vec_ref(TensorName::layer(l, "ln2_gain"), &layer.ln2_gain));
            out.push(vec_ref(TensorName::layer(l, "ln2_bias"), &layer.ln2_bias));
            out.push(mat_ref(TensorName::layer(l, "ff_keys"), &layer.ff_keys));
            out.push(mat_ref(TensorName::layer(l, "ff_values"), &layer.ff_values));
        }
        out.push(vec_ref(TensorName::global("final_ln_gain"), &self.final_ln_gain));
        out.push(vec_ref(TensorName::global("final_ln_bias"), &self.final_ln_bias));
        out.push(mat_ref(
            TensorName::global("output_embedding"),
            &self.output_embedding,
        ));
        out
    }

    /// Checks every tensor shape against `config` and that all entries are finite.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let learned = config.position_encoding == PositionEncoding::Learned;
        if learned != self.position_embedding.is_some() {
            return Err(Error::ShapeMismatch {
                tensor: "position_embedding".into(),
                expected: if learned {
                    vec![config.max_seq_len, config.d_model]
                } else {
                    vec![]
                },
                actual: self
                    .position_embedding
                    .as_ref()
                    .map(|m| m.shape().to_vec())
                    .unwrap_or_default(),
            });
        }
        if self.layers.len() != config.n_layers {
            return Err(Error::ShapeMismatch {
                tensor: "layers".into(),
                expected: vec![config.n_layers],
                actual: vec![self.layers.len()],
            });
        }
        let required = required_tensors(config);
        let present = self.tensors();
        debug_assert_eq!(required.len(), present.len());
        for ((name, shape), tensor) in required.iter().zip(&present) {
            if *shape != tensor.dims() {
                return Err(Error::ShapeMismatch {
                    tensor: name.to_string(),
                    expected: shape.clone(),
                    actual: tensor.dims(),
                });
            }
        }
        for tensor in &present {
            if let Some(offset) = tensor.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteWeight {
                    tensor: tensor.name.to_string(),
                    offset,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::new(2, 8, 16, 2, 8).with_d_ff(32)
    }

    #[test]
    fn zeros_validate() {
        let c = cfg();
        WeightSet::zeros(&c).validate(&c).unwrap();
    }

    #[test]
    fn short_ff_keys_names_the_tensor() {
        let c = cfg();
        let mut w = WeightSet::zeros(&c);
        w.layers[0].ff_keys = Matrix::zeros(31, 8);
        match w.validate(&c) {
            Err(Error::ShapeMismatch { tensor, .. }) => assert_eq!(tensor, "layer 1 ff_keys"),
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn nan_is_rejected() {
        let c = cfg();
        let mut w = WeightSet::zeros(&c);
        w.layers[1].ff_values.set(3, 2, f32::NAN);
        assert!(matches!(
            w.validate(&c),
            Err(Error::NonFiniteWeight { ref tensor, .. }) if tensor == "layer 2 ff_values"
        ));
    }

    #[test]
    fn required_matches_tensors_order() {
        let c = cfg();
        let w = WeightSet::zeros(&c);
        let names: Vec<String> = w.tensors().iter().map(|t| t.name.file_name()).collect();
        let req: Vec<String> = required_tensors(&c)
            .iter()
            .map(|(n, _)| n.file_name())
            .collect();
        assert_eq!(names, req);
        assert_eq!(names.len(), 2 + 2 * 10 + 3);
    }
}
