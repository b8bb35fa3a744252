//! Concept analysis over trigger stores: regex filtering of trigger text,
//! frequency ranges, per-layer key sampling and a polysemanticity proxy.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::probe::{KeyId, TriggerStore};

/// Number of equal-width frequency ranges.
pub const RANGES: u8 = 5;

/// Keys at or above this score are flagged as polysemantic.
pub const POLYSEMANTIC_THRESHOLD: f64 = 0.5;

/// A concept of interest, e.g. a library API.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    /// Matched against the raw text of each trigger.
    pub trigger_pattern: String,
    /// Locates evaluation contexts; must have exactly one capture group.
    pub eval_pattern: String,
}

/// A [`ConceptSpec`] with both patterns compiled.
#[derive(Debug, Clone)]
pub struct Concept {
    pub spec: ConceptSpec,
    pub trigger: Regex,
    pub eval: Regex,
}

fn compile(pattern: &str) -> Result<Regex> {
    Regex::new(pattern).map_err(|e| Error::InvalidPattern {
        pattern: pattern.to_string(),
        reason: e.to_string(),
    })
}

impl ConceptSpec {
    pub fn new(name: &str, trigger_pattern: &str, eval_pattern: &str) -> Self {
        Self {
            name: name.into(),
            trigger_pattern: trigger_pattern.into(),
            eval_pattern: eval_pattern.into(),
        }
    }

    pub fn compile(&self) -> Result<Concept> {
        let trigger = compile(&self.trigger_pattern)?;
        let eval = compile(&self.eval_pattern)?;
        let groups = eval.captures_len() - 1;
        if groups != 1 {
            return Err(Error::InvalidPattern {
                pattern: self.eval_pattern.clone(),
                reason: format!("expected exactly one capture group, found {groups}"),
            });
        }
        Ok(Concept {
            spec: self.clone(),
            trigger,
            eval,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_slice(&bytes)?;
        spec.compile()?;
        Ok(spec)
    }

    /// Built-in spec by name (`numpy`, `torch`, `log`, `time`, `equals`, `get`).
    pub fn builtin(name: &str) -> Option<Self> {
        default_concepts().into_iter().find(|c| c.name == name)
    }
}

/// Editable defaults for the APIs studied in the masking experiments.
///
/// Python/Go style patterns capture the `api.` prefix and the evaluation
/// target is the identifier that follows. Java style patterns capture the
/// receiver and the target is the matched method call itself.
pub fn default_concepts() -> Vec<ConceptSpec> {
    vec![
        ConceptSpec::new("numpy", r"\bnp\.", r"\b(np\.)"),
        ConceptSpec::new("torch", r"\btorch\.", r"\b(torch\.)"),
        ConceptSpec::new("log", r"\blog\.", r"\b(log\.)"),
        ConceptSpec::new("time", r"\btime\.", r"\b(time\.)"),
        ConceptSpec::new("equals", r"\.equals\(", r"([A-Za-z_][A-Za-z0-9_]*)\.equals\("),
        ConceptSpec::new("get", r"\.get\(", r"([A-Za-z_][A-Za-z0-9_]*)\.get\("),
    ]
}

/// A key whose triggers mention the concept, with the number that do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConceptKey {
    pub key: KeyId,
    pub frequency: usize,
}

/// Every key with at least one matching trigger, in (layer, index) order.
pub fn find_concept_keys(store: &TriggerStore, corpus: &Corpus, concept: &Concept) -> Result<Vec<ConceptKey>> {
    store.check_corpus(corpus)?;
    // Many keys share triggers, so match each prefix at most once.
    let mut memo: Vec<Option<bool>> = vec![None; corpus.len()];
    let mut out = Vec::new();
    for (key, records) in store.iter() {
        let mut frequency = 0;
        for r in records {
            let hit = *memo[r.prefix_id as usize].get_or_insert_with(|| {
                corpus
                    .prefix(r.prefix_id)
                    .is_some_and(|p| concept.trigger.is_match(&p.text))
            });
            frequency += hit as usize;
        }
        if frequency > 0 {
            out.push(ConceptKey { key, frequency });
        }
    }
    Ok(out)
}

/// Range 1..=5 of `frequency` among equal-width ranges over `[1, t]`.
///
/// For t = 50 the ranges are 1–10, 11–20, 21–30, 31–40 and 41–50.
pub fn stratify(frequency: usize, t: usize) -> Result<u8> {
    if frequency == 0 || frequency > t {
        return Err(Error::FrequencyOutOfRange { frequency, t });
    }
    let r = RANGES as usize;
    Ok(((r * frequency).div_ceil(t)) as u8)
}

/// Seeded uniform sample of up to `per_range` keys from every (layer, range) cell.
///
/// Each cell draws from its own ChaCha stream, so adding keys to one cell
/// never changes the sample of another. The result is sorted by key.
pub fn sample_keys(keys: &[(KeyId, u8)], per_range: usize, seed: u64) -> Vec<KeyId> {
    let mut cells: BTreeMap<(usize, u8), Vec<KeyId>> = BTreeMap::new();
    for &(key, range) in keys {
        cells.entry((key.layer, range)).or_default().push(key);
    }
    let mut out = Vec::new();
    for ((layer, range), mut members) in cells {
        members.sort();
        members.dedup();
        if members.len() <= per_range {
            out.extend(members);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((layer as u64) << 8 | range as u64);
        let picked = rand::seq::index::sample(&mut rng, members.len(), per_range);
        out.extend(picked.into_iter().map(|i| members[i]));
    }
    out.sort();
    out
}

/// `1 − max_p (fraction of the key's triggers matching p)`.
///
/// A heuristic proxy: 0 means one pattern explains every trigger, values near
/// 1 mean no pattern in the library dominates. Keys without triggers score 0.
pub fn polysemantic_score(store: &TriggerStore, corpus: &Corpus, key: KeyId, library: &[Regex]) -> Result<f64> {
    if library.is_empty() {
        return Err(Error::InvalidConfig("pattern library is empty".into()));
    }
    let texts: Vec<&str> = store
        .records(key)?
        .iter()
        .filter_map(|r| corpus.prefix(r.prefix_id).map(|p| p.text.as_str()))
        .collect();
    if texts.is_empty() {
        return Ok(0.0);
    }
    let best = library
        .iter()
        .map(|re| texts.iter().filter(|t| re.is_match(t)).count())
        .max()
        .unwrap_or(0);
    Ok(1.0 - best as f64 / texts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptKeyRow {
    pub key: KeyId,
    pub frequency: usize,
    pub range: u8,
    pub sampled: bool,
    pub polysemantic_score: f64,
}

impl ConceptKeyRow {
    pub fn is_polysemantic(&self) -> bool {
        self.polysemantic_score >= POLYSEMANTIC_THRESHOLD
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptKeyReport {
    pub concept: String,
    pub t: usize,
    pub per_range: usize,
    pub seed: u64,
    pub rows: Vec<ConceptKeyRow>,
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "concept",
    "layer",
    "key_index",
    "frequency",
    "range",
    "sampled",
    "polysemantic_score",
];

impl ConceptKeyReport {
    pub fn keys_with_min_frequency(&self, min_frequency: usize) -> Vec<KeyId> {
        self.rows
            .iter()
            .filter(|r| r.frequency >= min_frequency)
            .map(|r| r.key)
            .collect()
    }

    pub fn sampled(&self) -> Vec<KeyId> {
        self.rows.iter().filter(|r| r.sampled).map(|r| r.key).collect()
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    self.concept.clone(),
                    r.key.layer.to_string(),
                    r.key.index.to_string(),
                    r.frequency.to_string(),
                    r.range.to_string(),
                    r.sampled.to_string(),
                    format!("{:.4}", r.polysemantic_score),
                ]
            })
            .collect()
    }
}

/// Finds, stratifies, samples and scores the keys of one concept.
///
/// `library` defaults to the concept's own trigger pattern when empty.
pub fn concept_key_report(
    store: &TriggerStore,
    corpus: &Corpus,
    concept: &Concept,
    library: &[Regex],
    per_range: usize,
    seed: u64,
) -> Result<ConceptKeyReport> {
    if per_range == 0 {
        return Err(Error::InvalidConfig("per-range sample count must be at least 1".into()));
    }
    let t = store.t();
    let found = find_concept_keys(store, corpus, concept)?;
    let ranged: Vec<(KeyId, u8)> = found
        .iter()
        .map(|c| Ok((c.key, stratify(c.frequency, t)?)))
        .collect::<Result<_>>()?;
    let sampled = sample_keys(&ranged, per_range, seed);
    let own = [concept.trigger.clone()];
    let library = if library.is_empty() { &own[..] } else { library };
    let rows = found
        .iter()
        .zip(&ranged)
        .map(|(c, &(_, range))| {
            Ok(ConceptKeyRow {
                key: c.key,
                frequency: c.frequency,
                range,
                sampled: sampled.binary_search(&c.key).is_ok(),
                polysemantic_score: polysemantic_score(store, corpus, c.key, library)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ConceptKeyReport {
        concept: concept.spec.name.clone(),
        t,
        per_range,
        seed,
        rows,
    })
}
