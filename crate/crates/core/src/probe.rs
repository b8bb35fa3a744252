//! Streaming top-t trigger extraction.
//!
//! For every FF key the scan keeps the `t` prefixes with the largest
//! activation coefficient, i.e. the largest inner product between the FF
//! input and the key over the positions of the prefix. Ties are broken by
//! ascending prefix id, which makes the result independent of scan order
//! and of how the corpus is sharded.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CodePrefix, Corpus, CorpusShard};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model, Nonlinearity};
use crate::weight_io::canonical_json;

/// Paper-default number of triggers kept per key.
pub const DEFAULT_T: usize = 50;

/// A key `k^layer_index`; both coordinates are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyId {
    pub layer: usize,
    pub index: usize,
}

impl KeyId {
    pub const fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }

    pub fn check(&self, n_layers: usize, d_ff: usize) -> Result<()> {
        if self.layer == 0 || self.layer > n_layers || self.index == 0 || self.index > d_ff {
            return Err(Error::KeyOutOfBounds {
                key: *self,
                n_layers,
                d_ff,
            });
        }
        Ok(())
    }

    fn slot(&self, d_ff: usize) -> usize {
        (self.layer - 1) * d_ff + (self.index - 1)
    }

    fn from_slot(slot: usize, d_ff: usize) -> Self {
        Self::new(slot / d_ff + 1, slot % d_ff + 1)
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {} key {}", self.layer, self.index)
    }
}

/// How positions are reduced to one coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    MaxOverPositions,
    LastPosition,
}

/// Whether coefficients use the raw key product or the activated value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    PreNonlinearity,
    PostNonlinearity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CoefficientMode {
    pub reduction: Reduction,
    pub activation: Activation,
}

/// Activation coefficient of `key` for the sequence recorded in `trace`.
pub fn activation_coefficient(
    trace: &ForwardTrace,
    key: KeyId,
    mode: CoefficientMode,
    nonlinearity: Nonlinearity,
) -> Result<f32> {
    let n_layers = trace.key_products.len();
    let d_ff = trace.key_products.first().map_or(0, |m| m.cols());
    key.check(n_layers, d_ff)?;
    let products = &trace.key_products[key.layer - 1];
    Ok(reduce_column(products.as_slice(), d_ff, key.index - 1, mode, nonlinearity))
}

#[inline]
fn reduce_column(
    products: &[f32],
    d_ff: usize,
    col: usize,
    mode: CoefficientMode,
    f: Nonlinearity,
) -> f32 {
    let act = |v: f32| match mode.activation {
        Activation::PreNonlinearity => v,
        Activation::PostNonlinearity => f.apply(v),
    };
    let seq = products.len() / d_ff;
    match mode.reduction {
        Reduction::LastPosition => act(products[(seq - 1) * d_ff + col]),
        Reduction::MaxOverPositions => (0..seq)
            .map(|p| act(products[p * d_ff + col]))
            .fold(f32::NEG_INFINITY, f32::max),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerRecord {
    pub prefix_id: u32,
    pub coefficient: f32,
}

/// Ordering where "smaller" means "ranks higher".
#[derive(Debug, Clone, Copy)]
struct Ranked(TriggerRecord);

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .coefficient
            .total_cmp(&self.0.coefficient)
            .then(self.0.prefix_id.cmp(&other.0.prefix_id))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

/// Whether `a` ranks strictly above `b`.
pub fn ranks_above(a: &TriggerRecord, b: &TriggerRecord) -> bool {
    Ranked(*a) < Ranked(*b)
}

/// What a store was computed from; stores merge only when identities agree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreIdentity {
    pub model_hash: String,
    pub corpus_hash: String,
    pub t: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub mode: CoefficientMode,
}

/// Per-key top-t trigger lists, each sorted best-first.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerStore {
    identity: StoreIdentity,
    keys: Vec<Vec<TriggerRecord>>,
}

/// Bounded min-heaps during a scan; the root of each heap is its weakest entry.
struct Accumulator {
    t: usize,
    heaps: Vec<BinaryHeap<Ranked>>,
}

impl Accumulator {
    fn new(t: usize, n_keys: usize) -> Self {
        Self {
            t,
            heaps: (0..n_keys).map(|_| BinaryHeap::with_capacity(t + 1)).collect(),
        }
    }

    #[inline]
    fn offer(&mut self, slot: usize, record: TriggerRecord) {
        let heap = &mut self.heaps[slot];
        let r = Ranked(record);
        if heap.len() < self.t {
            heap.push(r);
        } else if let Some(mut worst) = heap.peek_mut() {
            if r < *worst {
                *worst = r;
            }
        }
    }

    fn absorb(mut self, other: Accumulator) -> Self {
        for (slot, heap) in other.heaps.into_iter().enumerate() {
            for r in heap {
                self.offer(slot, r.0);
            }
        }
        self
    }

    fn into_sorted(self) -> Vec<Vec<TriggerRecord>> {
        self.heaps
            .into_iter()
            .map(|h| h.into_sorted_vec().into_iter().map(|r| r.0).collect())
            .collect()
    }
}

fn scan_prefixes(
    model: &Model,
    prefixes: &[CodePrefix],
    t: usize,
    mode: CoefficientMode,
) -> Result<Accumulator> {
    let cfg = model.config();
    let d_ff = cfg.d_ff;
    let mut acc = Accumulator::new(t, cfg.total_keys());
    for prefix in prefixes {
        let trace = model.forward(&prefix.tokens)?;
        for (l, products) in trace.key_products.iter().enumerate() {
            for i in 0..d_ff {
                let coefficient = reduce_column(products.as_slice(), d_ff, i, mode, cfg.nonlinearity);
                acc.offer(
                    l * d_ff + i,
                    TriggerRecord {
                        prefix_id: prefix.id,
                        coefficient,
                    },
                );
            }
        }
    }
    Ok(acc)
}

const SCAN_CHUNK: usize = 32;

impl TriggerStore {
    pub fn empty(identity: StoreIdentity) -> Self {
        let n = identity.n_layers * identity.d_ff;
        Self {
            identity,
            keys: vec![Vec::new(); n],
        }
    }

    pub fn identity(&self) -> &StoreIdentity {
        &self.identity
    }

    pub fn t(&self) -> usize {
        self.identity.t
    }

    pub fn records(&self, key: KeyId) -> Result<&[TriggerRecord]> {
        key.check(self.identity.n_layers, self.identity.d_ff)?;
        Ok(&self.keys[key.slot(self.identity.d_ff)])
    }

    /// Every key with its records, in (layer, index) order.
    pub fn iter(&self) -> impl Iterator<Item = (KeyId, &[TriggerRecord])> {
        let d_ff = self.identity.d_ff;
        self.keys
            .iter()
            .enumerate()
            .map(move |(slot, recs)| (KeyId::from_slot(slot, d_ff), recs.as_slice()))
    }

    pub fn key_count(&self) -> usize {
        self.keys.len()
    }

    /// Writes the binary store file.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = canonical_json(&self.identity)?;
        let mut out = Vec::with_capacity(16 + header.len() + self.keys.len() * 4);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for recs in &self.keys {
            out.extend_from_slice(&(recs.len() as u32).to_le_bytes());
            for r in recs {
                out.extend_from_slice(&r.prefix_id.to_le_bytes());
                out.extend_from_slice(&r.coefficient.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::malformed("trigger store", reason);
        if bytes.len() < 16 || &bytes[..8] != STORE_MAGIC {
            return Err(Error::BadMagic(bytes[..bytes.len().min(8)].to_vec()));
        }
        let u32_at = |pos: usize| -> Result<u32> {
            bytes
                .get(pos..pos + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| bad(format!("truncated at byte {pos}")))
        };
        let version = u32_at(8)?;
        if version != STORE_VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let hlen = u32_at(12)? as usize;
        let header = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let identity: StoreIdentity = serde_json::from_slice(header)?;
        let n = identity.n_layers * identity.d_ff;
        let mut pos = 16 + hlen;
        let mut keys = Vec::with_capacity(n);
        for _ in 0..n {
            let count = u32_at(pos)? as usize;
            pos += 4;
            if count > identity.t {
                return Err(bad(format!("{count} records exceed t = {}", identity.t)));
            }
            let mut recs = Vec::with_capacity(count);
            for _ in 0..count {
                let prefix_id = u32_at(pos)?;
                let coefficient = f32::from_bits(u32_at(pos + 4)?);
                pos += 8;
                recs.push(TriggerRecord {
                    prefix_id,
                    coefficient,
                });
            }
            keys.push(recs);
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { identity, keys })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless `corpus` is the one this store was scanned from.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.hash() != self.identity.corpus_hash {
            return Err(Error::IncompatibleStores(format!(
                "store was scanned from corpus {}, got {}",
                short(&self.identity.corpus_hash),
                short(corpus.hash())
            )));
        }
        Ok(())
    }
}

const STORE_MAGIC: &[u8; 8] = b"FFTRIG01";
const STORE_VERSION: u32 = 1;

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn identity_for(model: &Model, corpus: &Corpus, t: usize, mode: CoefficientMode) -> StoreIdentity {
    StoreIdentity {
        model_hash: model.fingerprint().to_string(),
        corpus_hash: corpus.hash().to_string(),
        t,
        n_layers: model.config().n_layers,
        d_ff: model.config().d_ff,
        mode,
    }
}

/// Scans the whole corpus, sharding across the current rayon pool.
pub fn scan(model: &Model, corpus: &Corpus, t: usize, mode: CoefficientMode) -> Result<TriggerStore> {
    scan_shard(model, corpus.shard(0..corpus.len()), t, mode)
}

/// Scans only the prefixes of `shard`; the result carries the parent corpus
/// identity so shards of one corpus can be merged.
pub fn scan_shard(
    model: &Model,
    shard: CorpusShard<'_>,
    t: usize,
    mode: CoefficientMode,
) -> Result<TriggerStore> {
    if t == 0 {
        return Err(Error::InvalidConfig("t must be at least 1".into()));
    }
    if shard.corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n_keys = model.config().total_keys();
    let acc = shard
        .prefixes
        .par_chunks(SCAN_CHUNK)
        .map(|chunk| scan_prefixes(model, chunk, t, mode))
        .try_reduce(|| Accumulator::new(t, n_keys), |a, b| Ok(a.absorb(b)))?;
    Ok(TriggerStore {
        identity: identity_for(model, shard.corpus, t, mode),
        keys: acc.into_sorted(),
    })
}

/// Per-key union of two stores over disjoint prefixes, truncated to the top t.
pub fn merge(a: &TriggerStore, b: &TriggerStore) -> Result<TriggerStore> {
    if a.identity != b.identity {
        return Err(Error::IncompatibleStores(format!(
            "{:?} vs {:?}",
            a.identity, b.identity
        )));
    }
    let t = a.identity.t;
    let keys = a
        .keys
        .iter()
        .zip(&b.keys)
        .enumerate()
        .map(|(slot, (x, y))| {
            let mut out = Vec::with_capacity(t.min(x.len() + y.len()));
            let (mut i, mut j) = (0, 0);
            while out.len() < t && (i < x.len() || j < y.len()) {
                let take_x = match (x.get(i), y.get(j)) {
                    (Some(p), Some(q)) => {
                        if p.prefix_id == q.prefix_id {
                            return Err(Error::IncompatibleStores(format!(
                                "prefix {} appears in both stores at {}",
                                p.prefix_id,
                                KeyId::from_slot(slot, a.identity.d_ff)
                            )));
                        }
                        ranks_above(p, q)
                    }
                    (Some(_), None) => true,
                    _ => false,
                };
                if take_x {
                    out.push(x[i]);
                    i += 1;
                } else {
                    out.push(y[j]);
                    j += 1;
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TriggerStore {
        identity: a.identity.clone(),
        keys,
    })
}

/// A resolved trigger example.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trigger {
    pub prefix_id: u32,
    pub coefficient: f32,
    pub text: String,
}

/// The first `k` triggers of `key`, best first, with their text.
pub fn top_triggers(store: &TriggerStore, corpus: &Corpus, key: KeyId, k: usize) -> Result<Vec<Trigger>> {
    store.check_corpus(corpus)?;
    Ok(store
        .records(key)?
        .iter()
        .take(k)
        .map(|r| Trigger {
            prefix_id: r.prefix_id,
            coefficient: r.coefficient,
            text: corpus
                .prefix(r.prefix_id)
                .map(|p| p.text.clone())
                .unwrap_or_default(),
        })
        .collect())
}

#[derive(Serialize)]
struct ExportLine<'a> {
    layer: usize,
    index: usize,
    rank: usize,
    coefficient: f32,
    prefix_id: u32,
    file_id: u32,
    line: u32,
    text: &'a str,
}

/// Writes one JSON object per (key, rank) for the selected keys (all when `None`).
pub fn export_jsonl(
    store: &TriggerStore,
    corpus: &Corpus,
    keys: Option<&[KeyId]>,
    k: usize,
    out: &mut impl Write,
) -> Result<()> {
    store.check_corpus(corpus)?;
    let selected: Vec<KeyId> = match keys {
        Some(keys) => keys.to_vec(),
        None => store.iter().map(|(k, _)| k).collect(),
    };
    for key in selected {
        for (rank, r) in store.records(key)?.iter().take(k).enumerate() {
            let prefix = corpus
                .prefix(r.prefix_id)
                .ok_or_else(|| Error::malformed("trigger store", format!("unknown prefix {}", r.prefix_id)))?;
            let line = ExportLine {
                layer: key.layer,
                index: key.index,
                rank: rank + 1,
                coefficient: r.coefficient,
                prefix_id: r.prefix_id,
                file_id: prefix.file_id,
                line: prefix.line,
                text: &prefix.text,
            };
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")
                .map_err(|e| Error::io("<trigger export>", e))?;
        }
    }
    Ok(())
}

/// Builds a store directly from per-key records; records are sorted and truncated.
pub fn store_from_records(
    identity: StoreIdentity,
    records: impl IntoIterator<Item = (KeyId, Vec<TriggerRecord>)>,
) -> Result<TriggerStore> {
    let mut store = TriggerStore::empty(identity);
    let (n_layers, d_ff, t) = (store.identity.n_layers, store.identity.d_ff, store.identity.t);
    for (key, mut recs) in records {
        key.check(n_layers, d_ff)?;
        recs.sort_by_key(|r| Ranked(*r));
        recs.truncate(t);
        store.keys[key.slot(d_ff)] = recs;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PositionEncoding};
    use crate::synth::random_weights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let cfg = ModelConfig::new(2, 8, 32, 2, 16)
            .with_d_ff(12)
            .with_position_encoding(PositionEncoding::Learned);
        Model::new(cfg.clone(), random_weights(&cfg, 9, 0.3)).unwrap()
    }

    fn corpus(n: usize, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Corpus::from_token_sequences(
            (0..n)
                .map(|_| {
                    let len = rng.random_range(1..=10);
                    (0..len).map(|_| rng.random_range(0..32)).collect()
                })
                .collect(),
        )
    }

    #[test]
    fn corpus_smaller_than_t_keeps_everything() {
        let m = model();
        let c = corpus(3, 1);
        let store = scan(&m, &c, 50, CoefficientMode::default()).unwrap();
        for (_, recs) in store.iter() {
            assert_eq!(recs.len(), 3);
            assert!(recs.windows(2).all(|w| ranks_above(&w[0], &w[1])));
        }
    }

    #[test]
    fn single_position_coefficient_is_the_product() {
        let m = model();
        let trace = m.forward(&[5]).unwrap();
        let key = KeyId::new(2, 3);
        let c = activation_coefficient(&trace, key, CoefficientMode::default(), m.config().nonlinearity)
            .unwrap();
        assert_eq!(c, trace.key_products[1].get(0, 2));
    }

    #[test]
    fn coefficient_modes() {
        let m = model();
        let trace = m.forward(&[5, 1, 9]).unwrap();
        let key = KeyId::new(1, 4);
        let col: Vec<f32> = (0..3).map(|p| trace.key_products[0].get(p, 3)).collect();
        let f = m.config().nonlinearity;
        let last = CoefficientMode {
            reduction: Reduction::LastPosition,
            ..Default::default()
        };
        assert_eq!(activation_coefficient(&trace, key, last, f).unwrap(), col[2]);
        let post = CoefficientMode {
            activation: Activation::PostNonlinearity,
            ..Default::default()
        };
        let want = col.iter().map(|&v| v.max(0.0)).fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(activation_coefficient(&trace, key, post, f).unwrap(), want);
    }

    #[test]
    fn out_of_bounds_key() {
        let m = model();
        let trace = m.forward(&[1]).unwrap();
        let f = m.config().nonlinearity;
        for key in [KeyId::new(0, 1), KeyId::new(3, 1), KeyId::new(1, 13), KeyId::new(1, 0)] {
            assert!(matches!(
                activation_coefficient(&trace, key, CoefficientMode::default(), f),
                Err(Error::KeyOutOfBounds { .. })
            ));
        }
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let m = model();
        let c = corpus(40, 2);
        let store = scan(&m, &c, 5, CoefficientMode::default()).unwrap();
        let empty = TriggerStore::empty(store.identity().clone());
        assert_eq!(merge(&store, &empty).unwrap(), store);
        assert_eq!(merge(&empty, &store).unwrap(), store);
    }

    #[test]
    fn merge_rejects_mismatched_t() {
        let m = model();
        let c = corpus(10, 3);
        let a = scan(&m, &c, 5, CoefficientMode::default()).unwrap();
        let b = scan(&m, &c, 4, CoefficientMode::default()).unwrap();
        assert!(matches!(merge(&a, &b), Err(Error::IncompatibleStores(_))));
    }

    #[test]
    fn merge_rejects_overlapping_prefixes() {
        let m = model();
        let c = corpus(10, 3);
        let a = scan(&m, &c, 5, CoefficientMode::default()).unwrap();
        assert!(matches!(merge(&a, &a), Err(Error::IncompatibleStores(_))));
    }

    #[test]
    fn store_bytes_round_trip() {
        let m = model();
        let c = corpus(25, 4);
        let store = scan(&m, &c, 4, CoefficientMode::default()).unwrap();
        let bytes = store.to_bytes().unwrap();
        assert_eq!(TriggerStore::from_bytes(&bytes).unwrap(), store);
        assert!(TriggerStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn top_triggers_follow_store_order() {
        let m = model();
        let c = corpus(25, 5);
        let store = scan(&m, &c, 6, CoefficientMode::default()).unwrap();
        let key = KeyId::new(1, 2);
        let top = top_triggers(&store, &c, key, 6).unwrap();
        let recs = store.records(key).unwrap();
        assert_eq!(top.len(), 6);
        for (t, r) in top.iter().zip(recs) {
            assert_eq!(t.prefix_id, r.prefix_id);
            assert_eq!(t.text, c.prefix(r.prefix_id).unwrap().text);
        }
        assert_eq!(top_triggers(&store, &c, key, 2).unwrap().len(), 2);
    }

    #[test]
    fn export_writes_one_line_per_rank() {
        let m = model();
        let c = corpus(8, 6);
        let store = scan(&m, &c, 3, CoefficientMode::default()).unwrap();
        let mut buf = Vec::new();
        export_jsonl(&store, &c, Some(&[KeyId::new(2, 1)]), 3, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["rank"], 1);
        assert_eq!(lines[2]["layer"], 2);
    }
}
