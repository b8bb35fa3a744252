//! Byte-level and external-vocabulary tokenizers.
//!
//! The external vocabulary file is a JSON object mapping token strings to ids,
//! plus a required boolean `"byte_fallback"` entry. With fallback enabled,
//! bytes that no token covers map to entries named `<0xNN>`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerDescriptor {
    ByteLevel,
    External { path: PathBuf },
}

impl TokenizerDescriptor {
    /// `"byte"` selects the byte-level tokenizer, anything else is a vocabulary path.
    pub fn parse(s: &str) -> Self {
        match s {
            "byte" | "byte_level" | "bytes" => TokenizerDescriptor::ByteLevel,
            path => TokenizerDescriptor::External { path: path.into() },
        }
    }
}

#[derive(Debug, Clone)]
struct Vocabulary {
    pieces: HashMap<Vec<u8>, u32>,
    reverse: HashMap<u32, Vec<u8>>,
    fallback: [Option<u32>; 256],
    byte_fallback: bool,
    max_piece_len: usize,
    digest: String,
}

fn parse_fallback_name(name: &str) -> Option<u8> {
    let hex = name.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

impl Vocabulary {
    fn from_json(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(bytes)
            .map_err(|e| Error::InvalidVocabulary(format!("not JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::InvalidVocabulary("top level must be an object".into()))?;
        let byte_fallback = obj
            .get("byte_fallback")
            .and_then(|v| v.as_bool())
            .ok_or_else(|| Error::InvalidVocabulary("missing boolean \"byte_fallback\"".into()))?;

        let mut pieces = HashMap::new();
        let mut reverse = HashMap::new();
        let mut fallback = [None; 256];
        for (name, id) in obj {
            if name == "byte_fallback" {
                continue;
            }
            let id = id
                .as_u64()
                .and_then(|v| u32::try_from(v).ok())
                .ok_or_else(|| Error::InvalidVocabulary(format!("id of {name:?} is not a u32")))?;
            if name.is_empty() {
                return Err(Error::InvalidVocabulary("empty token string".into()));
            }
            let bytes = match parse_fallback_name(name) {
                Some(b) => {
                    fallback[b as usize] = Some(id);
                    vec![b]
                }
                None => {
                    pieces.insert(name.as_bytes().to_vec(), id);
                    name.as_bytes().to_vec()
                }
            };
            if reverse.insert(id, bytes).is_some() {
                return Err(Error::InvalidVocabulary(format!("id {id} assigned twice")));
            }
        }
        let max_piece_len = pieces.keys().map(Vec::len).max().unwrap_or(0);
        Ok(Self {
            pieces,
            reverse,
            fallback,
            byte_fallback,
            max_piece_len,
            digest: hex::encode(Sha256::digest(bytes)),
        })
    }

    fn encode(&self, text: &[u8], ids: &mut Vec<u32>, offsets: &mut Vec<usize>) -> Result<()> {
        let mut pos = 0;
        while pos < text.len() {
            let longest = self.max_piece_len.min(text.len() - pos);
            let hit = (1..=longest)
                .rev()
                .find_map(|len| self.pieces.get(&text[pos..pos + len]).map(|&id| (id, len)));
            let (id, len) = match hit {
                Some(h) => h,
                None => {
                    let byte = text[pos];
                    match self.fallback[byte as usize].filter(|_| self.byte_fallback) {
                        Some(id) => (id, 1),
                        None => return Err(Error::UnknownToken { byte, offset: pos }),
                    }
                }
            };
            ids.push(id);
            offsets.push(pos);
            pos += len;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Kind {
    ByteLevel,
    External(Box<Vocabulary>),
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    descriptor: TokenizerDescriptor,
    kind: Kind,
}

impl Tokenizer {
    pub fn byte_level() -> Self {
        Self {
            descriptor: TokenizerDescriptor::ByteLevel,
            kind: Kind::ByteLevel,
        }
    }

    pub fn load(descriptor: &TokenizerDescriptor) -> Result<Self> {
        match descriptor {
            TokenizerDescriptor::ByteLevel => Ok(Self::byte_level()),
            TokenizerDescriptor::External { path } => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                Ok(Self {
                    descriptor: descriptor.clone(),
                    kind: Kind::External(Box::new(Vocabulary::from_json(&bytes)?)),
                })
            }
        }
    }

    /// Parses a vocabulary from JSON bytes; `path` is recorded in the descriptor.
    pub fn from_vocab_json(path: impl AsRef<Path>, json: &[u8]) -> Result<Self> {
        Ok(Self {
            descriptor: TokenizerDescriptor::External {
                path: path.as_ref().to_path_buf(),
            },
            kind: Kind::External(Box::new(Vocabulary::from_json(json)?)),
        })
    }

    pub fn descriptor(&self) -> &TokenizerDescriptor {
        &self.descriptor
    }

    pub fn is_byte_level(&self) -> bool {
        matches!(self.kind, Kind::ByteLevel)
    }

    /// Stable identity independent of where the vocabulary file lives.
    pub fn identity(&self) -> String {
        match &self.kind {
            Kind::ByteLevel => "byte_level".into(),
            Kind::External(v) => format!("external:{}", v.digest),
        }
    }

    pub fn encode(&self, text: &[u8]) -> Result<Vec<u32>> {
        Ok(self.encode_with_offsets(text)?.0)
    }

    /// Token ids together with the byte offset at which each token starts.
    pub fn encode_with_offsets(&self, text: &[u8]) -> Result<(Vec<u32>, Vec<usize>)> {
        match &self.kind {
            Kind::ByteLevel => Ok((
                text.iter().map(|&b| b as u32).collect(),
                (0..text.len()).collect(),
            )),
            Kind::External(v) => {
                let mut ids = Vec::with_capacity(text.len() / 2);
                let mut offsets = Vec::with_capacity(text.len() / 2);
                v.encode(text, &mut ids, &mut offsets)?;
                Ok((ids, offsets))
            }
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        match &self.kind {
            Kind::ByteLevel => ids
                .iter()
                .map(|&id| {
                    u8::try_from(id).map_err(|_| Error::TokenOutOfVocab {
                        token: id,
                        vocab_size: 256,
                    })
                })
                .collect(),
            Kind::External(v) => {
                let mut out = Vec::new();
                for id in ids {
                    let piece = v.reverse.get(id).ok_or(Error::TokenOutOfVocab {
                        token: *id,
                        vocab_size: v.reverse.len(),
                    })?;
                    out.extend_from_slice(piece);
                }
                Ok(out)
            }
        }
    }

    pub fn decode_lossy(&self, ids: &[u32]) -> String {
        match self.decode(ids) {
            Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
            Err(_) => String::from("\u{fffd}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_level_ids_are_byte_values() {
        let t = Tokenizer::byte_level();
        assert_eq!(t.encode(b"np.").unwrap(), vec![110, 112, 46]);
    }

    #[test]
    fn external_longest_match() {
        let json = br#"{"np": 5, ".": 6, "n": 7, "byte_fallback": true}"#;
        let t = Tokenizer::from_vocab_json("v.json", json).unwrap();
        assert_eq!(t.encode(b"np.").unwrap(), vec![5, 6]);
        assert_eq!(t.encode(b"n.np").unwrap(), vec![7, 6, 5]);
        assert_eq!(t.decode(&[5, 6]).unwrap(), b"np.");
    }

    #[test]
    fn fallback_entries_cover_unknown_bytes() {
        let json = br#"{"ab": 1, "<0x63>": 2, "byte_fallback": true}"#;
        let t = Tokenizer::from_vocab_json("v.json", json).unwrap();
        assert_eq!(t.encode(b"abc").unwrap(), vec![1, 2]);
        assert_eq!(t.decode(&[1, 2]).unwrap(), b"abc");
    }

    #[test]
    fn unknown_byte_without_fallback() {
        let json = br#"{"ab": 1, "byte_fallback": false}"#;
        let t = Tokenizer::from_vocab_json("v.json", json).unwrap();
        assert!(matches!(
            t.encode(b"abz"),
            Err(Error::UnknownToken { byte: b'z', offset: 2 })
        ));
        let json = br#"{"ab": 1, "byte_fallback": true}"#;
        let t = Tokenizer::from_vocab_json("v.json", json).unwrap();
        assert!(t.encode(b"z").is_err());
    }

    #[test]
    fn missing_flag_is_rejected() {
        assert!(Tokenizer::from_vocab_json("v.json", br#"{"a": 1}"#).is_err());
    }

    #[test]
    fn offsets_track_token_starts() {
        let json = br#"{"np": 5, ".": 6, "byte_fallback": false}"#;
        let t = Tokenizer::from_vocab_json("v.json", json).unwrap();
        let (_, offsets) = t.encode_with_offsets(b"np.np").unwrap();
        assert_eq!(offsets, vec![0, 2, 3]);
    }

    proptest! {
        #[test]
        fn byte_level_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let t = Tokenizer::byte_level();
            let ids = t.encode(&bytes).unwrap();
            prop_assert_eq!(t.decode(&ids).unwrap(), bytes);
        }
    }
}
