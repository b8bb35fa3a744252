//! On-disk corpus: `corpus.json` (metadata), `manifest.jsonl` (one source file
//! per line) and `tokens.bin` (varint-encoded prefixes).
//!
//! `tokens.bin` is the magic `FFCORP01` followed by a varint prefix count and,
//! per prefix, varints `file_id`, `line`, `len` and then `len` token ids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CodePrefix, Corpus, FileCounts, Granularity, SourceFile, Tokenizer, TokenizerDescriptor};
use crate::error::{Error, Result};

const TOKENS_MAGIC: &[u8; 8] = b"FFCORP01";
const META: &str = "corpus.json";
const MANIFEST: &str = "manifest.jsonl";
const TOKENS: &str = "tokens.bin";

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    format: u32,
    tokenizer: TokenizerDescriptor,
    tokenizer_identity: String,
    granularity: Granularity,
    max_len: usize,
    prefix_count: usize,
    hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: u32,
    path: String,
    language: String,
    lines: u64,
    tokens: u64,
}

pub(crate) fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub(crate) fn read_varint(bytes: &[u8], pos: &mut usize) -> Option<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *bytes.get(*pos)?;
        *pos += 1;
        v |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            return Some(v);
        }
    }
    None
}

pub fn is_corpus_dir(path: impl AsRef<Path>) -> bool {
    path.as_ref().join(META).is_file()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let meta = CorpusMeta {
        format: 1,
        tokenizer: corpus.tokenizer.descriptor().clone(),
        tokenizer_identity: corpus.tokenizer.identity(),
        granularity: corpus.granularity,
        max_len: corpus.max_len,
        prefix_count: corpus.prefixes.len(),
        hash: corpus.hash.clone(),
    };
    let mut meta_json = serde_json::to_string_pretty(&meta)?;
    meta_json.push('\n');
    write_file(&dir.join(META), meta_json.as_bytes())?;

    let mut manifest = String::new();
    for (file, counts) in corpus.files.iter().zip(&corpus.counts) {
        let line = ManifestLine {
            id: file.id,
            path: file.path.clone(),
            language: file.language.clone(),
            lines: counts.lines,
            tokens: counts.tokens,
        };
        manifest.push_str(&serde_json::to_string(&line)?);
        manifest.push('\n');
    }
    write_file(&dir.join(MANIFEST), manifest.as_bytes())?;

    let mut tokens = TOKENS_MAGIC.to_vec();
    write_varint(&mut tokens, corpus.prefixes.len() as u64);
    for p in &corpus.prefixes {
        write_varint(&mut tokens, p.file_id as u64);
        write_varint(&mut tokens, p.line as u64);
        write_varint(&mut tokens, p.tokens.len() as u64);
        for &t in &p.tokens {
            write_varint(&mut tokens, t as u64);
        }
    }
    write_file(&dir.join(TOKENS), &tokens)
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let meta: CorpusMeta = serde_json::from_slice(&read(META)?)?;
    let tokenizer = Tokenizer::load(&meta.tokenizer)?;
    if tokenizer.identity() != meta.tokenizer_identity {
        return Err(Error::malformed(
            "corpus",
            format!(
                "vocabulary changed since ingestion ({} != {})",
                tokenizer.identity(),
                meta.tokenizer_identity
            ),
        ));
    }

    let manifest_bytes = read(MANIFEST)?;
    let mut files = Vec::new();
    let mut counts = Vec::new();
    for line in manifest_bytes.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
        let m: ManifestLine = serde_json::from_slice(line)?;
        files.push(SourceFile {
            id: m.id,
            path: m.path,
            language: m.language,
        });
        counts.push(FileCounts {
            lines: m.lines,
            tokens: m.tokens,
        });
    }

    let bytes = read(TOKENS)?;
    let bad = |reason: &str| Error::malformed("tokens.bin", reason);
    if bytes.len() < 8 || &bytes[..8] != TOKENS_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut pos = 8;
    let mut next = |what: &str| read_varint(&bytes, &mut pos).ok_or_else(|| bad(&format!("truncated at {what}")));
    let count = next("count")? as usize;
    let mut prefixes = Vec::with_capacity(count);
    for id in 0..count {
        let file_id = next("file id")? as u32;
        let line = next("line")? as u32;
        let len = next("length")? as usize;
        let tokens = (0..len)
            .map(|_| next("token").map(|t| t as u32))
            .collect::<Result<Vec<_>>>()?;
        if !files.iter().any(|f| f.id == file_id) {
            return Err(bad(&format!("prefix {id} references unknown file {file_id}")));
        }
        prefixes.push(CodePrefix {
            id: id as u32,
            file_id,
            line,
            text: tokenizer.decode_lossy(&tokens),
            tokens,
        });
    }

    let corpus = Corpus::assemble(tokenizer, meta.granularity, meta.max_len, files, counts, prefixes);
    if corpus.hash != meta.hash {
        return Err(Error::malformed("corpus", "content hash does not match corpus.json"));
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn save_then_load_preserves_everything() {
        let c = Corpus::from_texts(
            &[("a.py", "import numpy as np\nx = np.zeros(3)\n"), ("b.py", "\nprint(1)\n")],
            Tokenizer::byte_level(),
            Granularity::Lines,
            64,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&c, dir.path()).unwrap();
        assert!(is_corpus_dir(dir.path()));
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.prefixes(), c.prefixes());
        assert_eq!(back.hash(), c.hash());
        assert_eq!(back.file_counts(), c.file_counts());
    }

    proptest! {
        #[test]
        fn varint_round_trip(values in proptest::collection::vec(any::<u64>(), 0..32)) {
            let mut buf = Vec::new();
            for &v in &values {
                write_varint(&mut buf, v);
            }
            let mut pos = 0;
            for &v in &values {
                prop_assert_eq!(read_varint(&buf, &mut pos), Some(v));
            }
            prop_assert_eq!(pos, buf.len());
        }
    }
}
