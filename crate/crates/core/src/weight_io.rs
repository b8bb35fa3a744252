//! The `.ffw` weight file.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "FFSCOPE1"
//! 8       4     format version (u32 LE), currently 1
//! 12      4     header length H (u32 LE)
//! 16      H     canonical JSON header: {"config": ModelConfig, "tensors": [entry...]}
//!               entry = {"dtype": "f32", "name": str, "offset": u64, "shape": [u64...]}
//! ...           zero padding; every tensor starts at a 64-byte aligned absolute offset
//! ```
//!
//! Tensors are little-endian f32, row-major, written in canonical order.
//! JSON keys are sorted so the encoding of a given weight set is unique.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{required_tensors, LayerWeights, ModelConfig, WeightSet};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"FFSCOPE1";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGNMENT: usize = 64;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl TensorEntry {
    fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFileHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

/// Serialises with sorted object keys.
pub(crate) fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

fn layout(config: &ModelConfig, data_start: usize) -> (Vec<TensorEntry>, usize) {
    let mut offset = data_start;
    let mut entries = Vec::new();
    for (name, shape) in required_tensors(config) {
        let entry = TensorEntry {
            name: name.file_name(),
            dtype: "f32".into(),
            shape,
            offset: offset as u64,
        };
        offset = align(offset + entry.byte_len());
        entries.push(entry);
    }
    (entries, offset)
}

/// Encodes a weight set into the exact bytes of a `.ffw` file.
pub fn encode(config: &ModelConfig, weights: &WeightSet) -> Result<Vec<u8>> {
    weights.validate(config)?;
    // Offsets are absolute, so the header length feeds back into them.
    let mut data_start = align(PREAMBLE + 2);
    let (header_json, entries) = loop {
        let (entries, _) = layout(config, data_start);
        let header = WeightFileHeader {
            config: config.clone(),
            tensors: entries,
        };
        let json = canonical_json(&header)?;
        let needed = align(PREAMBLE + json.len());
        if needed == data_start {
            break (json, header.tensors);
        }
        data_start = needed;
    };

    let (_, end) = layout(config, data_start);
    let mut out = Vec::with_capacity(end);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(header_json.as_bytes());
    for (entry, tensor) in entries.iter().zip(weights.tensors()) {
        out.resize(entry.offset as usize, 0);
        for v in tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(end, 0);
    Ok(out)
}

pub fn write_weights(path: impl AsRef<Path>, config: &ModelConfig, weights: &WeightSet) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(config, weights)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<(ModelConfig, WeightSet)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Parses and validates only the header.
pub fn decode_header(bytes: &[u8]) -> Result<WeightFileHeader> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic(bytes[..bytes.len().min(8)].to_vec()));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::CorruptDirectory("file ends inside the preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::CorruptDirectory("header extends past end of file".into()))?;
    let header: WeightFileHeader = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| Error::CorruptDirectory(format!("unreadable header: {e}")))?;
    header.config.validate()?;

    let required = required_tensors(&header.config);
    let mut seen = HashSet::new();
    for entry in &header.tensors {
        if !seen.insert(entry.name.as_str()) {
            return Err(Error::CorruptDirectory(format!("duplicate tensor {}", entry.name)));
        }
        if entry.dtype != "f32" {
            return Err(Error::CorruptDirectory(format!(
                "tensor {} has dtype {}",
                entry.name, entry.dtype
            )));
        }
    }
    let wanted: HashMap<String, (String, Vec<usize>)> = required
        .iter()
        .map(|(n, s)| (n.file_name(), (n.to_string(), s.clone())))
        .collect();
    for entry in &header.tensors {
        match wanted.get(&entry.name) {
            None => {
                return Err(Error::CorruptDirectory(format!("unexpected tensor {}", entry.name)))
            }
            Some((label, shape)) if *shape != entry.shape => {
                return Err(Error::ShapeMismatch {
                    tensor: label.clone(),
                    expected: shape.clone(),
                    actual: entry.shape.clone(),
                })
            }
            Some(_) => {}
        }
    }
    if let Some((missing, _)) = wanted.iter().find(|(n, _)| !seen.contains(n.as_str())) {
        return Err(Error::CorruptDirectory(format!("missing tensor {missing}")));
    }

    let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let start = usize::try_from(entry.offset)
            .map_err(|_| Error::CorruptDirectory(format!("offset of {} overflows", entry.name)))?;
        if start % ALIGNMENT != 0 {
            return Err(Error::CorruptDirectory(format!(
                "tensor {} at offset {start} is not {ALIGNMENT}-byte aligned",
                entry.name
            )));
        }
        if start < header_end {
            return Err(Error::CorruptDirectory(format!(
                "tensor {} overlaps the header",
                entry.name
            )));
        }
        let end = start + entry.byte_len();
        if end > bytes.len() {
            return Err(Error::CorruptDirectory(format!(
                "tensor {} is truncated ({} of {} bytes present)",
                entry.name,
                bytes.len().saturating_sub(start),
                entry.byte_len()
            )));
        }
        spans.push((start, end, &entry.name));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::CorruptDirectory(format!(
                "tensors {} and {} overlap",
                pair[0].2, pair[1].2
            )));
        }
    }
    Ok(header)
}

pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, WeightSet)> {
    let header = decode_header(bytes)?;
    let by_name: HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let load = |name: String| -> Matrix {
        let entry = by_name[name.as_str()];
        let start = entry.offset as usize;
        let data: Vec<f32> = bytes[start..start + entry.byte_len()]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let (rows, cols) = match entry.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("shapes were checked against the config"),
        };
        Matrix::from_vec(rows, cols, data).expect("byte length matches shape")
    };
    let vector = |name: String| load(name).as_slice().to_vec();

    let cfg = header.config;
    let layers = (1..=cfg.n_layers)
        .map(|l| {
            let n = |part: &str| format!("layers.{l}.{part}");
            LayerWeights {
                ln1_gain: vector(n("ln1_gain")),
                ln1_bias: vector(n("ln1_bias")),
                attn_query: load(n("attn_query")),
                attn_key: load(n("attn_key")),
                attn_value: load(n("attn_value")),
                attn_output: load(n("attn_output")),
                ln2_gain: vector(n("ln2_gain")),
                ln2_bias: vector(n("ln2_bias")),
                ff_keys: load(n("ff_keys")),
                ff_values: load(n("ff_values")),
            }
        })
        .collect();
    let weights = WeightSet {
        token_embedding: load("token_embedding".into()),
        position_embedding: by_name
            .contains_key("position_embedding")
            .then(|| load("position_embedding".into())),
        layers,
        final_ln_gain: vector("final_ln_gain".into()),
        final_ln_bias: vector("final_ln_bias".into()),
        output_embedding: load("output_embedding".into()),
    };
    weights.validate(&cfg)?;
    Ok((cfg, weights))
}

/// Hex SHA-256 of the canonical encoding; identifies a model in provenance blocks.
pub fn fingerprint(config: &ModelConfig, weights: &WeightSet) -> String {
    match encode(config, weights) {
        Ok(bytes) => hex::encode(Sha256::digest(&bytes)),
        Err(_) => String::from("invalid"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::random_weights;

    fn sample() -> (ModelConfig, WeightSet) {
        let cfg = ModelConfig::new(2, 8, 16, 2, 8);
        let w = random_weights(&cfg, 11, 0.5);
        (cfg, w)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (cfg, w) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ffw");
        write_weights(&path, &cfg, &w).unwrap();
        let (cfg2, w2) = read_weights(&path).unwrap();
        assert_eq!(cfg, cfg2);
        for (a, b) in w.tensors().iter().zip(w2.tensors()) {
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "{}", a.name);
        }
    }

    #[test]
    fn identical_inputs_give_identical_files() {
        let (cfg, w) = sample();
        let a = encode(&cfg, &w).unwrap();
        let b = encode(&cfg, &w.clone()).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&a)), hex::encode(Sha256::digest(&b)));
    }

    #[test]
    fn offsets_are_aligned_and_ordered() {
        let (cfg, w) = sample();
        let bytes = encode(&cfg, &w).unwrap();
        let header = decode_header(&bytes).unwrap();
        let mut last_end = 0;
        for e in &header.tensors {
            assert_eq!(e.offset % 64, 0);
            assert!(e.offset as usize >= last_end);
            last_end = e.offset as usize + e.byte_len();
        }
        assert!(last_end <= bytes.len());
    }

    #[test]
    fn bad_magic() {
        let (cfg, w) = sample();
        let mut bytes = encode(&cfg, &w).unwrap();
        bytes[..8].copy_from_slice(b"XXXXXXXX");
        assert!(matches!(decode(&bytes), Err(Error::BadMagic(_))));
    }

    #[test]
    fn unsupported_version() {
        let (cfg, w) = sample();
        let mut bytes = encode(&cfg, &w).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::VersionUnsupported(7))));
    }

    #[test]
    fn truncated_tensor_region() {
        let (cfg, w) = sample();
        let bytes = encode(&cfg, &w).unwrap();
        let header = decode_header(&bytes).unwrap();
        let last = header.tensors.last().unwrap();
        let cut = last.offset as usize + 4;
        assert!(matches!(decode(&bytes[..cut]), Err(Error::CorruptDirectory(_))));
    }

    #[test]
    fn unwritable_path() {
        let (cfg, w) = sample();
        let err = write_weights("/nonexistent-dir/for/sure/m.ffw", &cfg, &w).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn tampered_shape_is_reported() {
        let (cfg, w) = sample();
        let bytes = encode(&cfg, &w).unwrap();
        let header = decode_header(&bytes).unwrap();
        let mut tampered = header.clone();
        let ff = tampered
            .tensors
            .iter_mut()
            .find(|e| e.name == "layers.1.ff_keys")
            .unwrap();
        ff.shape = vec![31, 8];
        let json = canonical_json(&tampered).unwrap();
        // keep the header length identical so offsets stay valid
        let orig = canonical_json(&header).unwrap();
        assert_eq!(json.len(), orig.len());
        let mut out = bytes.clone();
        out[16..16 + json.len()].copy_from_slice(json.as_bytes());
        match decode(&out) {
            Err(Error::ShapeMismatch { tensor, .. }) => assert_eq!(tensor, "layer 1 ff_keys"),
            other => panic!("{other:?}"),
        }
    }
}
