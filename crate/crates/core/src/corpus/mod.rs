//! Source ingestion, tokenization, probe prefixes and dataset statistics.

mod persist;
mod tokenizer;

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use persist::{is_corpus_dir, load_corpus, save_corpus};
pub use tokenizer::{Tokenizer, TokenizerDescriptor};

/// One entry of the source manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub id: u32,
    /// Path relative to the ingestion root, `/`-separated.
    pub path: String,
    pub language: String,
}

/// A source file's normalised bytes (CRLF folded to LF).
#[derive(Debug, Clone)]
pub struct SourceText {
    pub file: SourceFile,
    pub bytes: Vec<u8>,
}

impl SourceText {
    pub fn new(file: SourceFile, bytes: &[u8]) -> Self {
        Self {
            file,
            bytes: normalize_newlines(bytes),
        }
    }
}

pub fn language_for_extension(ext: &str) -> String {
    match ext.trim_start_matches('.') {
        "py" => "python",
        "go" => "go",
        "java" => "java",
        "rs" => "rust",
        "js" => "javascript",
        "ts" => "typescript",
        "c" | "h" => "c",
        "cc" | "cpp" | "hpp" => "cpp",
        other => other,
    }
    .to_string()
}

/// Lists files under `root` whose name ends with `extension`, in lexicographic
/// order of their relative paths, truncated to `max_files`.
pub fn ingest_dir(root: impl AsRef<Path>, extension: &str, max_files: usize) -> Result<Vec<SourceFile>> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut paths = Vec::new();
    for entry in walkdir::WalkDir::new(root).follow_links(false) {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .expect("walkdir yields paths under root");
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if rel.ends_with(extension) {
            paths.push(rel);
        }
    }
    if paths.is_empty() {
        return Err(Error::NoFilesFound {
            root: root.to_path_buf(),
            filter: extension.to_string(),
        });
    }
    paths.sort();
    paths.truncate(max_files);
    let language = language_for_extension(extension);
    Ok(paths
        .into_iter()
        .enumerate()
        .map(|(i, path)| SourceFile {
            id: i as u32,
            path,
            language: language.clone(),
        })
        .collect())
}

/// Reads every manifest file relative to `root`, in parallel, preserving manifest order.
pub fn read_sources(root: impl AsRef<Path>, manifest: &[SourceFile]) -> Result<Vec<SourceText>> {
    let root = root.as_ref();
    manifest
        .par_iter()
        .map(|file| {
            let path = root.join(&file.path);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok(SourceText::new(file.clone(), &bytes))
        })
        .collect()
}

pub fn normalize_newlines(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\r' && bytes.get(i + 1) == Some(&b'\n') {
            i += 1;
            continue;
        }
        out.push(bytes[i]);
        i += 1;
    }
    out
}

/// Splits on LF; a trailing newline does not open an extra line.
pub fn split_lines(bytes: &[u8]) -> Vec<&[u8]> {
    if bytes.is_empty() {
        return Vec::new();
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    body.split(|&b| b == b'\n').collect()
}

/// All prefixes of a tokenized line: `[t0], [t0, t1], …, [t0..tn-1]`.
pub fn line_prefixes(line: &[u32]) -> Result<Vec<Vec<u32>>> {
    if line.is_empty() {
        return Err(Error::EmptyLine);
    }
    Ok((1..=line.len()).map(|k| line[..k].to_vec()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Granularity {
    /// Each non-empty source line is one prefix.
    Lines,
    /// Non-overlapping windows of `size` tokens over each whole file.
    Windows { size: usize },
}

/// A tokenized code prefix with provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodePrefix {
    pub id: u32,
    pub file_id: u32,
    /// 1-based line of the first token.
    pub line: u32,
    pub tokens: Vec<u32>,
    pub text: String,
}

/// Per-file counts used by [`corpus_stats`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileCounts {
    pub lines: u64,
    pub tokens: u64,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    tokenizer: Tokenizer,
    granularity: Granularity,
    max_len: usize,
    files: Vec<SourceFile>,
    counts: Vec<FileCounts>,
    prefixes: Vec<CodePrefix>,
    hash: String,
}

struct FileChunk {
    counts: FileCounts,
    prefixes: Vec<(u32, Vec<u32>)>,
}

fn chunk_file(
    src: &SourceText,
    tokenizer: &Tokenizer,
    granularity: Granularity,
    max_len: usize,
) -> Result<Option<FileChunk>> {
    if !tokenizer.is_byte_level() && std::str::from_utf8(&src.bytes).is_err() {
        log::warn!("skipping {}: not valid UTF-8", src.file.path);
        return Ok(None);
    }
    let lines = split_lines(&src.bytes);
    let mut counts = FileCounts {
        lines: lines.len() as u64,
        tokens: 0,
    };
    let mut prefixes = Vec::new();
    match granularity {
        Granularity::Lines => {
            for (i, line) in lines.iter().enumerate() {
                let mut ids = tokenizer.encode(line)?;
                counts.tokens += ids.len() as u64;
                if ids.is_empty() {
                    continue;
                }
                ids.truncate(max_len);
                prefixes.push(((i + 1) as u32, ids));
            }
        }
        Granularity::Windows { size } => {
            for line in &lines {
                counts.tokens += tokenizer.encode(line)?.len() as u64;
            }
            let (ids, offsets) = tokenizer.encode_with_offsets(&src.bytes)?;
            let size = size.min(max_len).max(1);
            for (w, window) in ids.chunks(size).enumerate() {
                let start = offsets[w * size];
                let line = 1 + src.bytes[..start].iter().filter(|&&b| b == b'\n').count();
                prefixes.push((line as u32, window.to_vec()));
            }
        }
    }
    Ok(Some(FileChunk { counts, prefixes }))
}

impl Corpus {
    /// Tokenizes `sources` (in parallel) and cuts them into prefixes of at
    /// most `max_len` tokens. Output order follows the input order.
    pub fn build(
        sources: &[SourceText],
        tokenizer: Tokenizer,
        granularity: Granularity,
        max_len: usize,
    ) -> Result<Self> {
        let max_len = max_len.max(1);
        let chunks: Vec<Option<FileChunk>> = sources
            .par_iter()
            .map(|src| chunk_file(src, &tokenizer, granularity, max_len))
            .collect::<Result<_>>()?;

        let mut files = Vec::new();
        let mut counts = Vec::new();
        let mut prefixes = Vec::new();
        for (src, chunk) in sources.iter().zip(chunks) {
            let Some(chunk) = chunk else { continue };
            files.push(src.file.clone());
            counts.push(chunk.counts);
            for (line, tokens) in chunk.prefixes {
                let text = tokenizer.decode_lossy(&tokens);
                prefixes.push(CodePrefix {
                    id: prefixes.len() as u32,
                    file_id: src.file.id,
                    line,
                    tokens,
                    text,
                });
            }
        }
        Ok(Self::assemble(tokenizer, granularity, max_len, files, counts, prefixes))
    }

    /// In-memory corpus from `(path, text)` pairs; handy for fixtures.
    pub fn from_texts(
        texts: &[(&str, &str)],
        tokenizer: Tokenizer,
        granularity: Granularity,
        max_len: usize,
    ) -> Result<Self> {
        let sources: Vec<SourceText> = texts
            .iter()
            .enumerate()
            .map(|(i, (path, text))| {
                let ext = path.rsplit('.').next().unwrap_or("");
                SourceText::new(
                    SourceFile {
                        id: i as u32,
                        path: path.to_string(),
                        language: language_for_extension(ext),
                    },
                    text.as_bytes(),
                )
            })
            .collect();
        Self::build(&sources, tokenizer, granularity, max_len)
    }

    /// Byte-level corpus whose prefixes are exactly the given token sequences,
    /// one virtual line each.
    pub fn from_token_sequences(seqs: Vec<Vec<u32>>) -> Self {
        let tokenizer = Tokenizer::byte_level();
        let max_len = seqs.iter().map(Vec::len).max().unwrap_or(1).max(1);
        let prefixes: Vec<CodePrefix> = seqs
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| CodePrefix {
                id: i as u32,
                file_id: 0,
                line: i as u32 + 1,
                text: tokenizer.decode_lossy(&tokens),
                tokens,
            })
            .collect();
        let counts = vec![FileCounts {
            lines: prefixes.len() as u64,
            tokens: prefixes.iter().map(|p| p.tokens.len() as u64).sum(),
        }];
        let files = vec![SourceFile {
            id: 0,
            path: "<synthetic>".into(),
            language: "synthetic".into(),
        }];
        Self::assemble(tokenizer, Granularity::Lines, max_len, files, counts, prefixes)
    }

    pub(crate) fn assemble(
        tokenizer: Tokenizer,
        granularity: Granularity,
        max_len: usize,
        files: Vec<SourceFile>,
        counts: Vec<FileCounts>,
        prefixes: Vec<CodePrefix>,
    ) -> Self {
        let hash = content_hash(&tokenizer, granularity, &files, &prefixes);
        Self {
            tokenizer,
            granularity,
            max_len,
            files,
            counts,
            prefixes,
            hash,
        }
    }

    pub fn prefixes(&self) -> &[CodePrefix] {
        &self.prefixes
    }

    pub fn prefix(&self, id: u32) -> Option<&CodePrefix> {
        self.prefixes.get(id as usize)
    }

    pub fn len(&self) -> usize {
        self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefixes.is_empty()
    }

    pub fn files(&self) -> &[SourceFile] {
        &self.files
    }

    pub fn file_counts(&self) -> &[FileCounts] {
        &self.counts
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// SHA-256 over the tokenizer identity, manifest and every prefix.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// The sub-corpus of prefixes with ids in `range`, keeping ids and hash.
    pub fn shard(&self, range: std::ops::Range<usize>) -> CorpusShard<'_> {
        let end = range.end.min(self.prefixes.len());
        let start = range.start.min(end);
        CorpusShard {
            corpus: self,
            prefixes: &self.prefixes[start..end],
        }
    }
}

/// A contiguous slice of a corpus that still reports the parent's identity.
#[derive(Debug, Clone, Copy)]
pub struct CorpusShard<'a> {
    pub corpus: &'a Corpus,
    pub prefixes: &'a [CodePrefix],
}

fn content_hash(
    tokenizer: &Tokenizer,
    granularity: Granularity,
    files: &[SourceFile],
    prefixes: &[CodePrefix],
) -> String {
    let mut h = Sha256::new();
    h.update(tokenizer.identity().as_bytes());
    h.update(serde_json::to_vec(&granularity).expect("granularity serialises"));
    for f in files {
        h.update(f.id.to_le_bytes());
        h.update((f.path.len() as u64).to_le_bytes());
        h.update(f.path.as_bytes());
        h.update((f.language.len() as u64).to_le_bytes());
        h.update(f.language.as_bytes());
    }
    for p in prefixes {
        h.update(p.id.to_le_bytes());
        h.update(p.file_id.to_le_bytes());
        h.update(p.line.to_le_bytes());
        h.update((p.tokens.len() as u64).to_le_bytes());
        for t in &p.tokens {
            h.update(t.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Dataset summary in the shape of a per-language dataset table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub file_count: u64,
    pub line_count: u64,
    pub token_count: u64,
    pub avg_lines_per_file: f64,
    pub avg_tokens_per_line: f64,
    /// Tokenizer the token counts were measured with.
    pub tokenizer: String,
}

pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats> {
    if corpus.files.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let line_count: u64 = corpus.counts.iter().map(|c| c.lines).sum();
    let token_count: u64 = corpus.counts.iter().map(|c| c.tokens).sum();
    if line_count == 0 {
        return Err(Error::EmptyCorpus);
    }
    let file_count = corpus.files.len() as u64;
    Ok(CorpusStats {
        file_count,
        line_count,
        token_count,
        avg_lines_per_file: line_count as f64 / file_count as f64,
        avg_tokens_per_line: token_count as f64 / line_count as f64,
        tokenizer: corpus.tokenizer.identity(),
    })
}

pub(crate) fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} files, {} lines, {:.2} avg lines/file, {:.2} avg tokens/line ({})",
            thousands(self.file_count),
            thousands(self.line_count),
            self.avg_lines_per_file,
            self.avg_tokens_per_line,
            self.tokenizer
        )
    }
}

/// Builds a corpus from a source tree in one step.
pub fn corpus_from_dir(
    root: impl AsRef<Path>,
    extension: &str,
    max_files: usize,
    tokenizer: Tokenizer,
    granularity: Granularity,
    max_len: usize,
) -> Result<Corpus> {
    let root: PathBuf = root.as_ref().to_path_buf();
    let manifest = ingest_dir(&root, extension, max_files)?;
    let sources = read_sources(&root, &manifest)?;
    Corpus::build(&sources, tokenizer, granularity, max_len)
}
