//! Artifact writers. Every artifact carries a provenance block so it can be
//! traced back to the exact model, corpus, seed and flags that produced it.
//! Nothing run-specific (paths, timestamps) is recorded, which keeps reruns
//! byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::Model;

pub const TOOL: &str = "ffscope";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub flags: BTreeMap<String, String>,
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            model_hash: None,
            corpus_hash: None,
            tokenizer: None,
            seed: None,
            flags: BTreeMap::new(),
        }
    }
}

impl Provenance {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn model(mut self, model: &Model) -> Self {
        self.model_hash = Some(model.fingerprint().to_string());
        self
    }

    pub fn corpus(mut self, corpus: &Corpus) -> Self {
        self.corpus_hash = Some(corpus.hash().to_string());
        self.tokenizer = Some(corpus.tokenizer().identity());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn flag(mut self, name: &str, value: impl ToString) -> Self {
        self.flags.insert(name.into(), value.to_string());
        self
    }

    /// `# key=value` lines, in a fixed order, for the head of a CSV file.
    pub fn comment_lines(&self) -> String {
        let mut out = format!("# tool={} {}\n", self.tool, self.version);
        let mut push = |k: &str, v: &str| out.push_str(&format!("# {k}={v}\n"));
        if let Some(h) = &self.model_hash {
            push("model_hash", h);
        }
        if let Some(h) = &self.corpus_hash {
            push("corpus_hash", h);
        }
        if let Some(t) = &self.tokenizer {
            push("tokenizer", t);
        }
        if let Some(s) = self.seed {
            push("seed", &s.to_string());
        }
        for (k, v) in &self.flags {
            push(k, v);
        }
        out
    }
}

/// Renders a CSV document preceded by provenance comment lines.
pub fn csv_string(provenance: &Provenance, header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let body = w
        .into_inner()
        .map_err(|e| Error::malformed("csv", e.to_string()))?;
    let mut out = provenance.comment_lines();
    out.push_str(&String::from_utf8(body).map_err(|e| Error::malformed("csv", e.to_string()))?);
    Ok(out)
}

pub fn write_csv(
    path: impl AsRef<Path>,
    provenance: &Provenance,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    write_text(path, &csv_string(provenance, header, rows)?)
}

/// Pretty JSON with a trailing newline.
pub fn json_string(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    write_text(path, &json_string(value)?)
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`write_csv`], skipping provenance comments.
pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}
