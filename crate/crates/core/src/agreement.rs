//! Logit-lens agreement: how often an intermediate layer's top token already
//! equals the model's final prediction.
//!
//! Each line prefix is one example, evaluated at its last position. Because
//! attention is causal, a single forward over a line yields every prefix of
//! that line at once. Counts form a commutative monoid, so shards can be
//! processed independently and summed.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{CodePrefix, Corpus};
use crate::error::{Error, Result};
use crate::model::{logits_from_hidden, ForwardTrace, Model};
use crate::report::write_text;
use crate::tensor::{argmax, softmax};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerPrediction {
    /// 1-based layer.
    pub layer: usize,
    pub top_token: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distribution: Option<Vec<f32>>,
}

/// Top token of every layer at `position` of a traced sequence. The last
/// layer reports the model's own output.
fn top_tokens(model: &Model, trace: &ForwardTrace, position: usize, final_norm: bool) -> Result<Vec<u32>> {
    let n = trace.layer_outputs.len();
    let mut out = Vec::with_capacity(n);
    for l in 0..n - 1 {
        let logits = logits_from_hidden(trace.layer_outputs[l].row(position), model.weights(), final_norm)?;
        out.push(argmax(&logits) as u32);
    }
    out.push(argmax(trace.logits.row(position)) as u32);
    Ok(out)
}

/// Per-layer logit-lens predictions at `position`.
pub fn layer_predictions(
    model: &Model,
    tokens: &[u32],
    position: usize,
    final_norm: bool,
    keep_distribution: bool,
) -> Result<Vec<LayerPrediction>> {
    if position >= tokens.len() {
        return Err(Error::PositionOutOfRange {
            position,
            len: tokens.len(),
        });
    }
    let trace = model.forward(tokens)?;
    let n = trace.layer_outputs.len();
    (0..n)
        .map(|l| {
            let logits = if l + 1 == n {
                trace.logits.row(position).to_vec()
            } else {
                logits_from_hidden(trace.layer_outputs[l].row(position), model.weights(), final_norm)?
            };
            Ok(LayerPrediction {
                layer: l + 1,
                top_token: argmax(&logits) as u32,
                distribution: keep_distribution.then(|| softmax(&logits)),
            })
        })
        .collect()
}

/// Agreement counts bucketed by context length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgreementCounts {
    n_layers: usize,
    /// `agree[l][c - 1]`: examples of length c where layer l + 1 agrees.
    agree: Vec<Vec<u64>>,
    /// `count[c - 1]`: examples of length c.
    count: Vec<u64>,
}

impl AgreementCounts {
    pub fn new(n_layers: usize, max_context: usize) -> Self {
        Self {
            n_layers,
            agree: vec![vec![0; max_context]; n_layers],
            count: vec![0; max_context],
        }
    }

    pub fn max_context(&self) -> usize {
        self.count.len()
    }

    /// Records one example of `context` tokens with per-layer top tokens.
    pub fn record(&mut self, context: usize, tops: &[u32]) {
        let c = context - 1;
        let last = tops[self.n_layers - 1];
        self.count[c] += 1;
        for (l, &t) in tops.iter().enumerate() {
            self.agree[l][c] += (t == last) as u64;
        }
    }

    pub fn merge(mut self, other: &Self) -> Self {
        assert_eq!(self.n_layers, other.n_layers, "merging counts of different depth");
        assert_eq!(self.count.len(), other.count.len(), "merging counts of different width");
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
        for (row, other_row) in self.agree.iter_mut().zip(&other.agree) {
            for (a, b) in row.iter_mut().zip(other_row) {
                *a += b;
            }
        }
        self
    }

    pub fn agree(&self, layer: usize, context: usize) -> u64 {
        self.agree[layer - 1][context - 1]
    }

    pub fn count(&self, context: usize) -> u64 {
        self.count[context - 1]
    }
}

fn count_line(model: &Model, p: &CodePrefix, max_context: usize, final_norm: bool, acc: &mut AgreementCounts) -> Result<()> {
    let len = p.tokens.len().min(max_context);
    if len == 0 {
        return Ok(());
    }
    let trace = model.forward(&p.tokens[..len])?;
    for pos in 0..len {
        let tops = top_tokens(model, &trace, pos, final_norm)?;
        acc.record(pos + 1, &tops);
    }
    Ok(())
}

/// Counts over every prefix of every corpus line up to `max_context` tokens.
pub fn count_agreement(model: &Model, corpus: &Corpus, max_context: usize, final_norm: bool) -> Result<AgreementCounts> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n_layers = model.config().n_layers;
    corpus
        .prefixes()
        .par_chunks(16)
        .map(|chunk| {
            let mut acc = AgreementCounts::new(n_layers, max_context);
            for p in chunk {
                count_line(model, p, max_context, final_norm, &mut acc)?;
            }
            Ok(acc)
        })
        .try_reduce(
            || AgreementCounts::new(n_layers, max_context),
            |a, b| Ok(a.merge(&b)),
        )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementProfile {
    /// `agree[l - 1]` examples where layer l matches the last layer.
    pub agree: Vec<u64>,
    pub examples: u64,
    pub final_norm: bool,
}

impl AgreementProfile {
    pub fn rate(&self, layer: usize) -> f64 {
        self.agree[layer - 1] as f64 / self.examples as f64
    }

    pub fn rates(&self) -> Vec<f64> {
        (1..=self.agree.len()).map(|l| self.rate(l)).collect()
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        (1..=self.agree.len())
            .map(|l| vec![l.to_string(), format!("{:.6}", self.rate(l)), self.examples.to_string()])
            .collect()
    }
}

pub const PROFILE_COLUMNS: [&str; 3] = ["layer", "rate", "count"];

/// Agreement rate per layer over all line prefixes of the corpus.
pub fn agreement_profile(model: &Model, corpus: &Corpus, final_norm: bool) -> Result<AgreementProfile> {
    let max_context = corpus
        .prefixes()
        .iter()
        .map(|p| p.tokens.len())
        .max()
        .unwrap_or(0)
        .min(model.config().max_seq_len);
    let counts = count_agreement(model, corpus, max_context.max(1), final_norm)?;
    Ok(profile_from_counts(&counts, final_norm))
}

/// Column marginal of bucketed counts.
pub fn profile_from_counts(counts: &AgreementCounts, final_norm: bool) -> AgreementProfile {
    AgreementProfile {
        agree: counts.agree.iter().map(|row| row.iter().sum()).collect(),
        examples: counts.count.iter().sum(),
        final_norm,
    }
}

/// Layers × context sizes agreement matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementMatrix {
    pub counts: AgreementCounts,
    pub final_norm: bool,
}

pub const MATRIX_COLUMNS: [&str; 4] = ["layer", "context_size", "rate", "count"];

impl AgreementMatrix {
    pub fn n_layers(&self) -> usize {
        self.counts.n_layers
    }

    pub fn max_context(&self) -> usize {
        self.counts.max_context()
    }

    /// `None` when no example has this context size.
    pub fn rate(&self, layer: usize, context: usize) -> Option<f64> {
        let n = self.counts.count(context);
        (n > 0).then(|| self.counts.agree(layer, context) as f64 / n as f64)
    }

    pub fn is_absent(&self, context: usize) -> bool {
        self.counts.count(context) == 0
    }

    /// Rows in (layer, context) order; absent cells have an empty rate.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::with_capacity(self.n_layers() * self.max_context());
        for l in 1..=self.n_layers() {
            for c in 1..=self.max_context() {
                rows.push(vec![
                    l.to_string(),
                    c.to_string(),
                    self.rate(l, c).map(|r| format!("{r:.6}")).unwrap_or_default(),
                    self.counts.count(c).to_string(),
                ]);
            }
        }
        rows
    }
}

/// Agreement by natural prefix length for context sizes 1..=`max_context`.
/// Longer prefixes contribute only their first `max_context` positions.
pub fn context_sweep(model: &Model, corpus: &Corpus, max_context: usize, final_norm: bool) -> Result<AgreementMatrix> {
    if max_context == 0 {
        return Err(Error::InvalidConfig("maximum context must be at least 1".into()));
    }
    let limit = max_context.min(model.config().max_seq_len);
    let mut counts = count_agreement(model, corpus, limit, final_norm)?;
    if limit < max_context {
        counts.count.resize(max_context, 0);
        for row in &mut counts.agree {
            row.resize(max_context, 0);
        }
    }
    Ok(AgreementMatrix { counts, final_norm })
}

const CELL: usize = 12;
const LEFT: usize = 64;
const TOP: usize = 24;
const BOTTOM: usize = 56;
const LEGEND: usize = 80;
const LOW: [f64; 3] = [240.0, 240.0, 240.0];
const HIGH: [f64; 3] = [8.0, 48.0, 107.0];

fn ramp(rate: f64) -> String {
    let r = rate.clamp(0.0, 1.0);
    let c: Vec<u8> = (0..3)
        .map(|i| (LOW[i] + (HIGH[i] - LOW[i]) * r).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn ticks(n: usize, every: usize) -> impl Iterator<Item = usize> {
    std::iter::once(1).chain((every..=n).step_by(every)).filter(move |&v| v <= n)
}

/// Standalone SVG heatmap: tokens (context size) on the x axis, layers on
/// the y axis with layer 1 at the bottom. Absent columns are hatched.
pub fn heatmap_svg(matrix: &AgreementMatrix) -> Result<String> {
    let (rows, cols) = (matrix.n_layers(), matrix.max_context());
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidConfig("cannot render an empty matrix".into()));
    }
    let width = LEFT + cols * CELL + LEGEND;
    let height = TOP + rows * CELL + BOTTOM;
    let y_of = |layer: usize| TOP + (rows - layer) * CELL;
    let x_of = |ctx: usize| LEFT + (ctx - 1) * CELL;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
    );
    s.push_str(concat!(
        r#"<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)">"#,
        r##"<rect width="6" height="6" fill="#ffffff"/><line x1="0" y1="0" x2="0" y2="6" stroke="#999999" stroke-width="2"/></pattern>"##,
        r#"<linearGradient id="ramp" x1="0" y1="1" x2="0" y2="0">"#,
    ));
    let _ = writeln!(
        s,
        r#"<stop offset="0" stop-color="{}"/><stop offset="1" stop-color="{}"/></linearGradient></defs>"#,
        ramp(0.0),
        ramp(1.0)
    );
    s.push_str("<g class=\"cells\">\n");
    for l in 1..=rows {
        for c in 1..=cols {
            let (x, y) = (x_of(c), y_of(l));
            match matrix.rate(l, c) {
                Some(r) => {
                    let _ = writeln!(
                        s,
                        r#"<rect class="cell" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" data-layer="{l}" data-context="{c}" data-rate="{r:.6}"/>"#,
                        ramp(r)
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        r#"<rect class="cell absent" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="url(#hatch)" data-layer="{l}" data-context="{c}"/>"#
                    );
                }
            }
        }
    }
    s.push_str("</g>\n<g class=\"axes\">\n");
    let x_axis_y = TOP + rows * CELL;
    for c in ticks(cols, 10) {
        let x = x_of(c) + CELL / 2;
        let _ = writeln!(
            s,
            r##"<line class="tick x" x1="{x}" y1="{x_axis_y}" x2="{x}" y2="{}" stroke="#000000"/><text x="{x}" y="{}" text-anchor="middle">{c}</text>"##,
            x_axis_y + 4,
            x_axis_y + 16
        );
    }
    for l in ticks(rows, 5) {
        let y = y_of(l) + CELL / 2;
        let _ = writeln!(
            s,
            r##"<line class="tick y" x1="{}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="#000000"/><text x="{}" y="{}" text-anchor="end">{l}</text>"##,
            LEFT - 4,
            LEFT - 6,
            y + 3
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="axis-label x" x="{}" y="{}" text-anchor="middle" font-size="12">Tokens</text>"#,
        LEFT + cols * CELL / 2,
        height - 12
    );
    let _ = writeln!(
        s,
        r#"<text class="axis-label y" x="16" y="{0}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {0})">Layers</text>"#,
        TOP + rows * CELL / 2
    );
    s.push_str("</g>\n");
    let lx = LEFT + cols * CELL + 24;
    let lh = rows * CELL;
    let _ = writeln!(
        s,
        r##"<g class="legend"><rect x="{lx}" y="{TOP}" width="12" height="{lh}" fill="url(#ramp)" stroke="#000000"/><text x="{}" y="{}">1.0</text><text x="{}" y="{}">0.0</text></g>"##,
        lx + 16,
        TOP + 8,
        lx + 16,
        TOP + lh
    );
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_heatmap(matrix: &AgreementMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_text(path, &heatmap_svg(matrix)?)
}
