//! Key masking and next-token evaluation.
//!
//! Masking zeroes the `ff_keys` row of each selected key so the key never
//! fires. Accuracy is measured by greedy decoding: a case is correct when
//! decoding `truth.len()` tokens from the context reproduces the truth.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept::Concept;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{Model, WeightSet};
use crate::probe::KeyId;
use crate::report::Provenance;
use crate::tensor::argmax;

/// Default number of concept-free lines in the general evaluation.
pub const DEFAULT_GENERAL_LINES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub concept: String,
    pub keys: Vec<KeyId>,
}

impl MaskSet {
    /// Sorts and deduplicates `keys`.
    pub fn new(concept: impl Into<String>, keys: impl IntoIterator<Item = KeyId>) -> Self {
        let keys: BTreeSet<KeyId> = keys.into_iter().collect();
        Self {
            concept: concept.into(),
            keys: keys.into_iter().collect(),
        }
    }

    pub fn validate(&self, n_layers: usize, d_ff: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for key in &self.keys {
            key.check(n_layers, d_ff)?;
            if !seen.insert(*key) {
                return Err(Error::InvalidConfig(format!("{key} listed twice in mask")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Copy of `weights` with every masked key row set to zero.
pub fn mask_keys(weights: &WeightSet, mask: &MaskSet) -> Result<WeightSet> {
    let n_layers = weights.layers.len();
    let d_ff = weights.layers.first().map_or(0, |l| l.ff_keys.rows());
    mask.validate(n_layers, d_ff)?;
    let mut out = weights.clone();
    for key in &mask.keys {
        out.layers[key.layer - 1].ff_keys.row_mut(key.index - 1).fill(0.0);
    }
    Ok(out)
}

pub fn mask_model(model: &Model, mask: &MaskSet) -> Result<Model> {
    Model::new(model.config().clone(), mask_keys(model.weights(), mask)?)
}

/// Where a case came from: prefix id, file, line and byte offset of the
/// context end within the prefix text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CaseOrigin {
    pub prefix_id: u32,
    pub file_id: u32,
    pub line: u32,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EvalCase {
    pub context: Vec<u32>,
    pub truth: Vec<u32>,
    pub origin: CaseOrigin,
}

impl EvalCase {
    /// Tokens fed to the model to check every truth position at once.
    fn input(&self) -> Vec<u32> {
        let mut seq = self.context.clone();
        seq.extend_from_slice(&self.truth[..self.truth.len() - 1]);
        seq
    }

    fn fits(&self, max_seq_len: usize) -> bool {
        !self.context.is_empty()
            && !self.truth.is_empty()
            && self.context.len() + self.truth.len() - 1 <= max_seq_len
    }
}

fn identifier_run(s: &str) -> usize {
    s.bytes()
        .take_while(|b| b.is_ascii_alphanumeric() || *b == b'_')
        .count()
}

/// Cases at every eval-pattern match, in corpus order.
///
/// The context ends where the capture group ends. The truth is the rest of
/// the match when non-empty (`mystr` + `.equals(`), otherwise the identifier
/// following the match (`np.` + `array`). Cases longer than `max_seq_len`
/// are skipped.
pub fn build_concept_eval(
    corpus: &Corpus,
    concept: &Concept,
    max_cases: usize,
    max_seq_len: usize,
) -> Result<Vec<EvalCase>> {
    let tok = corpus.tokenizer();
    let mut cases = Vec::new();
    'outer: for p in corpus.prefixes() {
        for caps in concept.eval.captures_iter(&p.text) {
            let whole = caps.get(0).expect("group 0");
            let group = caps.get(1).expect("validated single group");
            let mut truth_end = whole.end();
            if truth_end == group.end() {
                truth_end += identifier_run(&p.text[truth_end..]);
            }
            let ctx_end = group.end();
            if ctx_end == 0 || truth_end == ctx_end {
                continue;
            }
            let case = EvalCase {
                context: tok.encode(p.text[..ctx_end].as_bytes())?,
                truth: tok.encode(p.text[ctx_end..truth_end].as_bytes())?,
                origin: CaseOrigin {
                    prefix_id: p.id,
                    file_id: p.file_id,
                    line: p.line,
                    offset: ctx_end,
                },
            };
            if !case.fits(max_seq_len) {
                continue;
            }
            cases.push(case);
            if cases.len() >= max_cases {
                break 'outer;
            }
        }
    }
    if cases.is_empty() {
        return Err(Error::NoCasesFound(concept.spec.name.clone()));
    }
    Ok(cases)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneralEval {
    pub cases: Vec<EvalCase>,
    pub lines: usize,
    pub requested: usize,
}

impl GeneralEval {
    /// True when the corpus had fewer concept-free lines than requested.
    pub fn shortfall(&self) -> bool {
        self.lines < self.requested
    }
}

/// Next-token cases from the first `budget` lines free of the concept.
///
/// A line of n tokens yields n − 1 cases, one per proper prefix.
pub fn build_general_eval(
    corpus: &Corpus,
    exclude: &Concept,
    budget: usize,
    max_seq_len: usize,
) -> Result<GeneralEval> {
    if budget == 0 {
        return Err(Error::InvalidConfig("line budget must be at least 1".into()));
    }
    let mut cases = Vec::new();
    let mut lines = 0;
    for p in corpus.prefixes() {
        if lines == budget {
            break;
        }
        if exclude.trigger.is_match(&p.text) {
            continue;
        }
        lines += 1;
        let usable = p.tokens.len().min(max_seq_len + 1);
        for k in 1..usable {
            cases.push(EvalCase {
                context: p.tokens[..k].to_vec(),
                truth: vec![p.tokens[k]],
                origin: CaseOrigin {
                    prefix_id: p.id,
                    file_id: p.file_id,
                    line: p.line,
                    offset: k,
                },
            });
        }
    }
    if lines == 0 {
        return Err(Error::InsufficientLines {
            found: 0,
            requested: budget,
        });
    }
    if lines < budget {
        log::warn!("only {lines} concept-free lines available, {budget} requested");
    }
    Ok(GeneralEval {
        cases,
        lines,
        requested: budget,
    })
}

/// Per-case correctness, in input order.
///
/// Cases whose model input is a prefix of another case's input share that
/// forward pass: causal attention makes the logits at earlier positions
/// independent of what follows.
pub fn evaluate_cases(model: &Model, cases: &[EvalCase]) -> Result<Vec<bool>> {
    let inputs: Vec<Vec<u32>> = cases.iter().map(EvalCase::input).collect();
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.sort_by(|&a, &b| inputs[b].cmp(&inputs[a]));

    // In descending order, every sequence that extends S sits directly
    // before S, so a group leader always extends its later members.
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if inputs[g[0]].starts_with(&inputs[i]) => g.push(i),
            _ => groups.push(vec![i]),
        }
    }

    let verdicts: Vec<Vec<(usize, bool)>> = groups
        .par_iter()
        .map(|g| {
            let trace = model.forward(&inputs[g[0]])?;
            Ok(g.iter()
                .map(|&i| {
                    let c = &cases[i];
                    let start = c.context.len() - 1;
                    let ok = c
                        .truth
                        .iter()
                        .enumerate()
                        .all(|(j, &want)| argmax(trace.logits.row(start + j)) as u32 == want);
                    (i, ok)
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut out = vec![false; cases.len()];
    for (i, ok) in verdicts.into_iter().flatten() {
        out[i] = ok;
    }
    Ok(out)
}

/// Percentage of cases decoded exactly.
pub fn next_token_accuracy(model: &Model, cases: &[EvalCase]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::EmptyCases);
    }
    let correct = evaluate_cases(model, cases)?.into_iter().filter(|&ok| ok).count();
    Ok(100.0 * correct as f64 / cases.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccuracyPair {
    pub baseline: f64,
    pub masked: f64,
    pub drop: f64,
    pub cases: usize,
}

impl AccuracyPair {
    fn new(baseline: f64, masked: f64, cases: usize) -> Self {
        Self {
            baseline,
            masked,
            drop: baseline - masked,
            cases,
        }
    }
}

/// Baseline versus masked accuracy on the concept and general sets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub concept: String,
    pub concept_eval: AccuracyPair,
    pub general_eval: AccuracyPair,
    pub provenance: Provenance,
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "concept",
    "concept_baseline",
    "concept_masked",
    "concept_drop",
    "general_baseline",
    "general_masked",
    "general_drop",
    "concept_cases",
    "general_cases",
];

impl EvalReport {
    pub fn csv_row(&self) -> Vec<String> {
        let (c, g) = (&self.concept_eval, &self.general_eval);
        vec![
            self.concept.clone(),
            format!("{:.2}", c.baseline),
            format!("{:.2}", c.masked),
            format!("{:.2}", c.drop),
            format!("{:.2}", g.baseline),
            format!("{:.2}", g.masked),
            format!("{:.2}", g.drop),
            c.cases.to_string(),
            g.cases.to_string(),
        ]
    }
}

pub fn ablation_report(
    concept: &str,
    baseline: &Model,
    masked: &Model,
    concept_cases: &[EvalCase],
    general_cases: &[EvalCase],
    provenance: Provenance,
) -> Result<EvalReport> {
    if concept_cases.is_empty() || general_cases.is_empty() {
        return Err(Error::EmptyCases);
    }
    let acc = |m: &Model, cases: &[EvalCase]| next_token_accuracy(m, cases);
    Ok(EvalReport {
        concept: concept.to_string(),
        concept_eval: AccuracyPair::new(
            acc(baseline, concept_cases)?,
            acc(masked, concept_cases)?,
            concept_cases.len(),
        ),
        general_eval: AccuracyPair::new(
            acc(baseline, general_cases)?,
            acc(masked, general_cases)?,
            general_cases.len(),
        ),
        provenance,
    })
}
