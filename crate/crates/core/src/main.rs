use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use regex::Regex;
use serde::{Deserialize, Serialize};

use ffscope::agreement::{self, MATRIX_COLUMNS, PROFILE_COLUMNS};
use ffscope::concept::{self, Concept, ConceptSpec};
use ffscope::corpus::{
    corpus_from_dir, corpus_stats, is_corpus_dir, load_corpus, save_corpus, Corpus, Granularity, Tokenizer,
    TokenizerDescriptor,
};
use ffscope::editor::{self, MaskSet, DEFAULT_GENERAL_LINES};
use ffscope::model::{Model, ModelConfig, Nonlinearity, PositionEncoding, ResidualStyle};
use ffscope::probe::{self, Activation, CoefficientMode, KeyId, Reduction, TriggerStore, DEFAULT_T};
use ffscope::report::{self, Provenance};
use ffscope::{synth, weight_io};

#[derive(Parser, Debug)]
#[command(name = "ffscope", version, about = "Feed-forward key analysis for code language models")]
struct Cli {
    /// JSON file with default values for any flag; flags on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $FFSCOPE_OUT or ./ffscope-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tokenize a source tree and save it as a corpus directory.
    Ingest(CorpusArgs),
    /// Print dataset statistics for a source tree or corpus directory.
    Stats(CorpusArgs),
    /// Extract the top-t triggers of every FF key.
    Scan(ScanArgs),
    /// Export trigger examples for selected keys as JSON lines.
    Triggers(TriggersArgs),
    /// Find, stratify and score the keys related to a concept.
    ConceptKeys(ConceptArgs),
    /// Sample concept keys per layer and frequency range.
    Sample(ConceptArgs),
    /// Write a mask set for the keys of a concept.
    Mask(MaskArgs),
    /// Compare baseline and masked accuracy.
    Eval(EvalArgs),
    /// Logit-lens agreement profile.
    Agree(LensArgs),
    /// Agreement by layer and context size, with an SVG heatmap.
    Sweep(LensArgs),
    /// Build a synthetic model, optionally with planted detector keys.
    Synth(SynthArgs),
    /// Print the tool version.
    Version,
}

#[derive(Args, Debug, Clone, Default)]
struct CorpusArgs {
    /// Source directory or a saved corpus directory.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// File extension to ingest.
    #[arg(long)]
    ext: Option<String>,
    /// `byte` or a path to a vocabulary JSON file.
    #[arg(long)]
    tokenizer: Option<String>,
    #[arg(long)]
    max_files: Option<usize>,
    /// Maximum tokens per prefix.
    #[arg(long)]
    max_len: Option<usize>,
    /// `lines` or `window:N`.
    #[arg(long)]
    granularity: Option<String>,
}

#[derive(Args, Debug)]
struct ScanArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Triggers kept per key.
    #[arg(long)]
    t: Option<usize>,
    /// Rank by activated values instead of raw key products.
    #[arg(long)]
    post_nonlinearity: bool,
    /// Use the last position only instead of the maximum over positions.
    #[arg(long)]
    last_position: bool,
}

#[derive(Args, Debug)]
struct StoreArgs {
    /// Trigger store (default: <out>/triggers.store).
    #[arg(long)]
    store: Option<PathBuf>,
    /// Corpus directory the store was scanned from (default: <out>/corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TriggersArgs {
    #[command(flatten)]
    store: StoreArgs,
    /// Key as LAYER:INDEX (1-based); repeatable. All keys when omitted.
    #[arg(long = "key", value_parser = parse_key)]
    keys: Vec<KeyId>,
    /// Triggers per key.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct ConceptArgs {
    #[command(flatten)]
    store: StoreArgs,
    /// Built-in concept name or a concept spec JSON file.
    #[arg(long)]
    concept: Option<String>,
    /// Keys sampled per (layer, range) cell.
    #[arg(long)]
    per_range: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Regex for the polysemanticity library; repeatable.
    #[arg(long = "library")]
    library: Vec<String>,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[command(flatten)]
    store: StoreArgs,
    #[arg(long)]
    concept: Option<String>,
    /// Minimum trigger frequency for a key to be masked.
    #[arg(long)]
    min_frequency: Option<usize>,
    /// Mask file to write (default: <out>/mask.json).
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    concept: Option<String>,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Concept-free lines in the general evaluation.
    #[arg(long)]
    general_lines: Option<usize>,
    /// Cap on concept evaluation cases.
    #[arg(long)]
    max_cases: Option<usize>,
}

#[derive(Args, Debug)]
struct LensArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Largest context size in the sweep.
    #[arg(long)]
    max_context: Option<usize>,
    /// Project intermediate layers without the final layer norm.
    #[arg(long)]
    no_final_norm: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Weight file to write (default: <out>/model.ffw).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    max_seq_len: usize,
    #[arg(long, value_enum, default_value = "relu")]
    nonlinearity: NonlinearityArg,
    #[arg(long)]
    no_positions: bool,
    #[arg(long)]
    parallel_residual: bool,
    /// Planted key LAYER:INDEX:DETECT:PREDICT; tokens are single characters
    /// (byte values) or integers. Repeatable.
    #[arg(long = "detector", value_parser = parse_detector)]
    detectors: Vec<synth::DetectorSpec>,
    /// Standard deviation of random weights when no detector is planted.
    #[arg(long, default_value_t = 0.3)]
    std: f32,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy)]
enum NonlinearityArg {
    Relu,
    Gelu,
}

/// Values loaded from `--config`. Every field mirrors a long flag.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<PathBuf>,
    corpus: Option<PathBuf>,
    ext: Option<String>,
    tokenizer: Option<String>,
    max_files: Option<usize>,
    max_len: Option<usize>,
    granularity: Option<String>,
    t: Option<usize>,
    store: Option<PathBuf>,
    concept: Option<String>,
    mask: Option<PathBuf>,
    min_frequency: Option<usize>,
    per_range: Option<usize>,
    library: Option<Vec<String>>,
    general_lines: Option<usize>,
    max_cases: Option<usize>,
    max_context: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    threads: Option<usize>,
    k: Option<usize>,
    #[serde(default)]
    post_nonlinearity: bool,
    #[serde(default)]
    last_position: bool,
    #[serde(default)]
    no_final_norm: bool,
}

enum CliError {
    Usage(String),
    Data(ffscope::Error),
}

impl From<ffscope::Error> for CliError {
    fn from(e: ffscope::Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_key(s: &str) -> std::result::Result<KeyId, String> {
    let (l, i) = s.split_once(':').ok_or("expected LAYER:INDEX")?;
    let layer = l.trim().parse().map_err(|_| format!("bad layer {l:?}"))?;
    let index = i.trim().parse().map_err(|_| format!("bad index {i:?}"))?;
    Ok(KeyId::new(layer, index))
}

fn parse_token(s: &str) -> std::result::Result<u32, String> {
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii() => Ok(c as u32),
        _ => s.parse().map_err(|_| format!("bad token {s:?}")),
    }
}

fn parse_detector(s: &str) -> std::result::Result<synth::DetectorSpec, String> {
    let parts: Vec<&str> = s.splitn(4, ':').collect();
    if parts.len() != 4 {
        return Err("expected LAYER:INDEX:DETECT:PREDICT".into());
    }
    let layer = parts[0].parse().map_err(|_| format!("bad layer {:?}", parts[0]))?;
    let key = parts[1].parse().map_err(|_| format!("bad index {:?}", parts[1]))?;
    Ok(synth::DetectorSpec::new(
        layer,
        key,
        parse_token(parts[2])?,
        parse_token(parts[3])?,
    ))
}

fn parse_granularity(s: &str) -> CliResult<Granularity> {
    match s {
        "lines" | "line" => Ok(Granularity::Lines),
        _ => {
            let size = s
                .strip_prefix("window:")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n > 0)
                .ok_or_else(|| usage(format!("bad granularity {s:?}; use `lines` or `window:N`")))?;
            Ok(Granularity::Windows { size })
        }
    }
}

struct Ctx {
    file: FileConfig,
    out: PathBuf,
}

impl Ctx {
    fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require_path(&self, flag: Option<PathBuf>, fallback: Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
        let path = flag
            .or(fallback)
            .ok_or_else(|| usage(format!("--{name} is required")))?;
        if !path.exists() {
            return Err(usage(format!("{} does not exist", path.display())));
        }
        Ok(path)
    }

    fn model(&self, flag: Option<PathBuf>) -> CliResult<Model> {
        let path = self.require_path(flag, self.file.model.clone(), "model")?;
        let (config, weights) = weight_io::read_weights(&path)?;
        Ok(Model::new(config, weights)?)
    }

    fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.file.seed).unwrap_or(0)
    }

    fn corpus(&self, args: &CorpusArgs, model: Option<&Model>) -> CliResult<Corpus> {
        let path = self.require_path(args.corpus.clone(), self.file.corpus.clone(), "corpus")?;
        if is_corpus_dir(&path) {
            log::info!("loading corpus from {}", path.display());
            return Ok(load_corpus(&path)?);
        }
        let ext = args.ext.clone().or(self.file.ext.clone()).unwrap_or_else(|| "py".into());
        let tok = args
            .tokenizer
            .clone()
            .or(self.file.tokenizer.clone())
            .unwrap_or_else(|| "byte".into());
        let tokenizer = Tokenizer::load(&TokenizerDescriptor::parse(&tok))?;
        let max_files = args.max_files.or(self.file.max_files).unwrap_or(usize::MAX);
        let max_len = args
            .max_len
            .or(self.file.max_len)
            .or(model.map(|m| m.config().max_seq_len))
            .unwrap_or(2048);
        let granularity = match args.granularity.clone().or(self.file.granularity.clone()) {
            Some(g) => parse_granularity(&g)?,
            None => Granularity::Lines,
        };
        log::info!("ingesting *.{ext} under {}", path.display());
        Ok(corpus_from_dir(&path, &ext, max_files, tokenizer, granularity, max_len)?)
    }

    fn store_and_corpus(&self, args: &StoreArgs) -> CliResult<(TriggerStore, Corpus)> {
        let store_path = args
            .store
            .clone()
            .or(self.file.store.clone())
            .unwrap_or_else(|| self.out_path("triggers.store"));
        let corpus_path = args
            .corpus
            .clone()
            .or(self.file.corpus.clone())
            .unwrap_or_else(|| self.out_path("corpus"));
        if !is_corpus_dir(&corpus_path) {
            return Err(usage(format!(
                "{} is not a corpus directory; run `ffscope scan` or `ffscope ingest` first",
                corpus_path.display()
            )));
        }
        let store = TriggerStore::load(&store_path)?;
        let corpus = load_corpus(&corpus_path)?;
        store.check_corpus(&corpus)?;
        Ok((store, corpus))
    }

    fn concept(&self, flag: Option<String>) -> CliResult<Concept> {
        let name = flag
            .or(self.file.concept.clone())
            .ok_or_else(|| usage("--concept is required"))?;
        let spec = if Path::new(&name).is_file() {
            ConceptSpec::load(&name)?
        } else {
            ConceptSpec::builtin(&name).ok_or_else(|| {
                usage(format!(
                    "unknown concept {name:?}; use a spec file or one of: {}",
                    concept::default_concepts()
                        .iter()
                        .map(|c| c.name.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })?
        };
        Ok(spec.compile()?)
    }
}

fn stats_provenance(corpus: &Corpus) -> Provenance {
    Provenance::new().corpus(corpus)
}

#[derive(Serialize)]
struct StatsArtifact {
    stats: ffscope::corpus::CorpusStats,
    prefixes: usize,
    provenance: Provenance,
}

fn cmd_ingest(ctx: &Ctx, args: CorpusArgs, save: bool) -> CliResult<()> {
    let corpus = ctx.corpus(&args, None)?;
    let stats = corpus_stats(&corpus)?;
    println!("{stats}");
    if save {
        save_corpus(&corpus, ctx.out_path("corpus"))?;
    }
    report::write_json(
        ctx.out_path("corpus_stats.json"),
        &StatsArtifact {
            stats,
            prefixes: corpus.len(),
            provenance: stats_provenance(&corpus),
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct ScanSummary {
    prefixes: usize,
    keys: usize,
    t: usize,
    provenance: Provenance,
}

fn cmd_scan(ctx: &Ctx, args: ScanArgs) -> CliResult<()> {
    let model = ctx.model(args.model)?;
    let corpus = ctx.corpus(&args.corpus, Some(&model))?;
    let t = args.t.or(ctx.file.t).unwrap_or(DEFAULT_T);
    if t == 0 {
        return Err(usage("--t must be at least 1"));
    }
    let mode = CoefficientMode {
        reduction: if args.last_position || ctx.file.last_position {
            Reduction::LastPosition
        } else {
            Reduction::MaxOverPositions
        },
        activation: if args.post_nonlinearity || ctx.file.post_nonlinearity {
            Activation::PostNonlinearity
        } else {
            Activation::PreNonlinearity
        },
    };
    log::info!(
        "scanning {} prefixes for {} keys (t = {t})",
        corpus.len(),
        model.config().total_keys()
    );
    let store = probe::scan(&model, &corpus, t, mode)?;
    store.save(ctx.out_path("triggers.store"))?;
    save_corpus(&corpus, ctx.out_path("corpus"))?;
    report::write_json(
        ctx.out_path("scan.json"),
        &ScanSummary {
            prefixes: corpus.len(),
            keys: store.key_count(),
            t,
            provenance: Provenance::new()
                .model(&model)
                .corpus(&corpus)
                .flag("t", t)
                .flag("reduction", format!("{:?}", mode.reduction))
                .flag("activation", format!("{:?}", mode.activation)),
        },
    )?;
    Ok(())
}

fn store_provenance(store: &TriggerStore, corpus: &Corpus) -> Provenance {
    let mut p = Provenance::new().corpus(corpus).flag("t", store.t());
    p.model_hash = Some(store.identity().model_hash.clone());
    p
}

fn cmd_triggers(ctx: &Ctx, args: TriggersArgs) -> CliResult<()> {
    let (store, corpus) = ctx.store_and_corpus(&args.store)?;
    let k = args.k.or(ctx.file.k).unwrap_or(store.t());
    let path = ctx.out_path("triggers.jsonl");
    std::fs::create_dir_all(&ctx.out).map_err(|e| ffscope::Error::io(&ctx.out, e))?;
    let file = File::create(&path).map_err(|e| ffscope::Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let header = serde_json::json!({ "provenance": store_provenance(&store, &corpus) });
    writeln!(w, "{header}").map_err(|e| ffscope::Error::io(&path, e))?;
    let keys = (!args.keys.is_empty()).then_some(args.keys.as_slice());
    probe::export_jsonl(&store, &corpus, keys, k, &mut w)?;
    w.flush().map_err(|e| ffscope::Error::io(&path, e))?;
    Ok(())
}

fn concept_report(ctx: &Ctx, args: &ConceptArgs) -> CliResult<(concept::ConceptKeyReport, Provenance)> {
    let (store, corpus) = ctx.store_and_corpus(&args.store)?;
    let concept = ctx.concept(args.concept.clone())?;
    let per_range = args.per_range.or(ctx.file.per_range).unwrap_or(5);
    let seed = ctx.seed(args.seed);
    let patterns: Vec<String> = if !args.library.is_empty() {
        args.library.clone()
    } else if let Some(lib) = &ctx.file.library {
        lib.clone()
    } else {
        concept::default_concepts()
            .into_iter()
            .map(|c| c.trigger_pattern)
            .collect()
    };
    let library = patterns
        .iter()
        .map(|p| {
            Regex::new(p).map_err(|e| ffscope::Error::InvalidPattern {
                pattern: p.clone(),
                reason: e.to_string(),
            })
        })
        .collect::<ffscope::Result<Vec<_>>>()?;
    let report = concept::concept_key_report(&store, &corpus, &concept, &library, per_range, seed)?;
    let provenance = store_provenance(&store, &corpus)
        .seed(seed)
        .flag("concept", &concept.spec.name)
        .flag("trigger_pattern", &concept.spec.trigger_pattern)
        .flag("per_range", per_range)
        .flag(
            "polysemantic_score",
            format!(
                "heuristic 1 - dominant pattern coverage over {} patterns, flagged at >= {}",
                library.len(),
                concept::POLYSEMANTIC_THRESHOLD
            ),
        );
    Ok((report, provenance))
}

fn cmd_concept_keys(ctx: &Ctx, args: ConceptArgs) -> CliResult<()> {
    let (report, provenance) = concept_report(ctx, &args)?;
    log::info!("{} keys mention {}", report.rows.len(), report.concept);
    report::write_csv(
        ctx.out_path(&format!("concept_keys_{}.csv", report.concept)),
        &provenance,
        &concept::REPORT_COLUMNS,
        &report.csv_rows(),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct SampleArtifact {
    concept: String,
    per_range: usize,
    keys: Vec<KeyId>,
    provenance: Provenance,
}

fn cmd_sample(ctx: &Ctx, args: ConceptArgs) -> CliResult<()> {
    let (report, provenance) = concept_report(ctx, &args)?;
    let keys = report.sampled();
    for k in &keys {
        println!("{}:{}", k.layer, k.index);
    }
    report::write_json(
        ctx.out_path(&format!("sample_{}.json", report.concept)),
        &SampleArtifact {
            concept: report.concept.clone(),
            per_range: report.per_range,
            keys,
            provenance,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct MaskArtifact<'a> {
    #[serde(flatten)]
    mask: &'a MaskSet,
    provenance: Provenance,
}

fn cmd_mask(ctx: &Ctx, args: MaskArgs) -> CliResult<()> {
    let (store, corpus) = ctx.store_and_corpus(&args.store)?;
    let concept = ctx.concept(args.concept)?;
    let min_frequency = args.min_frequency.or(ctx.file.min_frequency).unwrap_or(1);
    let keys = concept::find_concept_keys(&store, &corpus, &concept)?;
    let mask = MaskSet::new(
        concept.spec.name.clone(),
        keys.iter().filter(|k| k.frequency >= min_frequency).map(|k| k.key),
    );
    log::info!("masking {} keys for {}", mask.keys.len(), mask.concept);
    let path = args
        .mask
        .or(ctx.file.mask.clone())
        .unwrap_or_else(|| ctx.out_path("mask.json"));
    report::write_json(
        path,
        &MaskArtifact {
            mask: &mask,
            provenance: store_provenance(&store, &corpus)
                .flag("concept", &concept.spec.name)
                .flag("min_frequency", min_frequency),
        },
    )?;
    Ok(())
}

fn cmd_eval(ctx: &Ctx, args: EvalArgs) -> CliResult<()> {
    let model = ctx.model(args.model)?;
    let mask_path = ctx.require_path(args.mask, ctx.file.mask.clone(), "mask")?;
    let mask = MaskSet::load(&mask_path)?;
    let concept = ctx.concept(args.concept)?;
    let corpus = ctx.corpus(&args.corpus, Some(&model))?;
    let max_seq_len = model.config().max_seq_len;
    let general_lines = args
        .general_lines
        .or(ctx.file.general_lines)
        .unwrap_or(DEFAULT_GENERAL_LINES);
    let max_cases = args.max_cases.or(ctx.file.max_cases).unwrap_or(10_000);
    if general_lines == 0 || max_cases == 0 {
        return Err(usage("--general-lines and --max-cases must be at least 1"));
    }

    let masked = editor::mask_model(&model, &mask)?;
    let concept_cases = editor::build_concept_eval(&corpus, &concept, max_cases, max_seq_len)?;
    let general = editor::build_general_eval(&corpus, &concept, general_lines, max_seq_len)?;
    log::info!(
        "{} concept cases, {} general cases from {} lines",
        concept_cases.len(),
        general.cases.len(),
        general.lines
    );
    let provenance = Provenance::new()
        .model(&model)
        .corpus(&corpus)
        .flag("concept", &concept.spec.name)
        .flag("masked_keys", mask.keys.len())
        .flag("general_lines", general.lines)
        .flag("general_lines_requested", general_lines)
        .flag("general_shortfall", general.shortfall())
        .flag("accuracy", "token-level greedy exact match");
    let report = editor::ablation_report(
        &concept.spec.name,
        &model,
        &masked,
        &concept_cases,
        &general.cases,
        provenance,
    )?;
    report::write_json(ctx.out_path("eval_report.json"), &report)?;
    report::write_csv(
        ctx.out_path("eval_report.csv"),
        &report.provenance,
        &editor::REPORT_COLUMNS,
        &[report.csv_row()],
    )?;
    println!(
        "{}: concept {:.2} -> {:.2} (drop {:.2}), general {:.2} -> {:.2} (drop {:.2})",
        report.concept,
        report.concept_eval.baseline,
        report.concept_eval.masked,
        report.concept_eval.drop,
        report.general_eval.baseline,
        report.general_eval.masked,
        report.general_eval.drop
    );
    Ok(())
}

fn cmd_agree(ctx: &Ctx, args: LensArgs) -> CliResult<()> {
    let model = ctx.model(args.model)?;
    let corpus = ctx.corpus(&args.corpus, Some(&model))?;
    let final_norm = !(args.no_final_norm || ctx.file.no_final_norm);
    let profile = agreement::agreement_profile(&model, &corpus, final_norm)?;
    let provenance = Provenance::new()
        .model(&model)
        .corpus(&corpus)
        .flag("final_norm", final_norm)
        .flag("position", "last");
    report::write_csv(
        ctx.out_path("agreement_profile.csv"),
        &provenance,
        &PROFILE_COLUMNS,
        &profile.csv_rows(),
    )?;
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, args: LensArgs) -> CliResult<()> {
    let model = ctx.model(args.model)?;
    let corpus = ctx.corpus(&args.corpus, Some(&model))?;
    let final_norm = !(args.no_final_norm || ctx.file.no_final_norm);
    let max_context = args
        .max_context
        .or(ctx.file.max_context)
        .unwrap_or(model.config().max_seq_len);
    if max_context == 0 {
        return Err(usage("--max-context must be at least 1"));
    }
    let matrix = agreement::context_sweep(&model, &corpus, max_context, final_norm)?;
    let provenance = Provenance::new()
        .model(&model)
        .corpus(&corpus)
        .flag("final_norm", final_norm)
        .flag("max_context", max_context)
        .flag("bucketing", "natural length");
    report::write_csv(
        ctx.out_path("context_sweep.csv"),
        &provenance,
        &MATRIX_COLUMNS,
        &matrix.csv_rows(),
    )?;
    agreement::render_heatmap(&matrix, ctx.out_path("context_sweep.svg"))?;
    Ok(())
}

fn cmd_synth(ctx: &Ctx, args: SynthArgs) -> CliResult<()> {
    let mut cfg = ModelConfig::new(args.layers, args.d_model, args.vocab, args.heads, args.max_seq_len)
        .with_nonlinearity(match args.nonlinearity {
            NonlinearityArg::Relu => Nonlinearity::Relu,
            NonlinearityArg::Gelu => Nonlinearity::Gelu,
        });
    if let Some(d_ff) = args.d_ff {
        cfg = cfg.with_d_ff(d_ff);
    }
    if args.no_positions {
        cfg = cfg.with_position_encoding(PositionEncoding::None);
    }
    if args.parallel_residual {
        cfg = cfg.with_residual_style(ResidualStyle::Parallel);
    }
    cfg.validate()?;
    let seed = ctx.seed(args.seed);
    let weights = if args.detectors.is_empty() {
        synth::random_weights(&cfg, seed, args.std)
    } else {
        synth::build_detector_model(&cfg, &args.detectors, seed)?
    };
    let path = args
        .model
        .or(ctx.file.model.clone())
        .unwrap_or_else(|| ctx.out_path("model.ffw"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| ffscope::Error::io(parent, e))?;
    }
    weight_io::write_weights(&path, &cfg, &weights)?;
    println!("{}", weight_io::fingerprint(&cfg, &weights));
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_slice(&bytes).map_err(|e| usage(format!("bad config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let out = cli
        .out
        .clone()
        .or(file.out.clone())
        .or_else(|| std::env::var_os("FFSCOPE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("ffscope-out"));
    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    let ctx = Ctx { file, out };
    match cli.command {
        Command::Version => {
            println!("{} {}", report::TOOL, report::VERSION);
            Ok(())
        }
        Command::Ingest(a) => cmd_ingest(&ctx, a, true),
        Command::Stats(a) => cmd_ingest(&ctx, a, false),
        Command::Scan(a) => cmd_scan(&ctx, a),
        Command::Triggers(a) => cmd_triggers(&ctx, a),
        Command::ConceptKeys(a) => cmd_concept_keys(&ctx, a),
        Command::Sample(a) => cmd_sample(&ctx, a),
        Command::Mask(a) => cmd_mask(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Agree(a) => cmd_agree(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Synth(a) => cmd_synth(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
