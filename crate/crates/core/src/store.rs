//! The explicit entity memory: anchor embeddings of masked contexts keyed to
//! the entity that fills the mask, searched exactly under Euclidean distance.

use std::fmt;
use std::io::{BufRead, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{parse_header, EncoderModel};
use crate::error::{Error, Result};
use crate::graph::{DatasetSplit, EntityId, KnowledgeGraph};
use crate::text::{EncodedSequence, Vocabulary};

pub const STORE_MAGIC: &str = "KNNKGE-STORE v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Description,
    Triple,
}

impl Provenance {
    fn code(self) -> u8 {
        match self {
            Provenance::Description => b'D',
            Provenance::Triple => b'T',
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Description => "description",
            Provenance::Triple => "triple",
        })
    }
}

/// Which slot of a train triple was masked to produce the key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Head,
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Source {
    Description { entity: EntityId },
    Triple { index: usize, slot: Slot },
}

impl Source {
    pub fn provenance(self) -> Provenance {
        match self {
            Source::Description { .. } => Provenance::Description,
            Source::Triple { .. } => Provenance::Triple,
        }
    }

    fn codes(self) -> (u8, u64, u8) {
        match self {
            Source::Description { entity } => (self.provenance().code(), entity.0 as u64, b'-'),
            Source::Triple { index, slot } => (
                self.provenance().code(),
                index as u64,
                match slot {
                    Slot::Head => b'H',
                    Slot::Tail => b'T',
                },
            ),
        }
    }

    fn from_codes(prov: u8, id: u64, slot: u8) -> Result<Self> {
        match (prov, slot) {
            (b'D', b'-') => u32::try_from(id)
                .map(|e| Source::Description { entity: EntityId(e) })
                .map_err(|_| Error::Format(format!("description source {id} out of range"))),
            (b'T', b'H') => Ok(Source::Triple {
                index: id as usize,
                slot: Slot::Head,
            }),
            (b'T', b'T') => Ok(Source::Triple {
                index: id as usize,
                slot: Slot::Tail,
            }),
            _ => Err(Error::Format(format!(
                "bad provenance/slot codes `{}`/`{}`",
                prov as char, slot as char
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreEntry {
    pub key: Vec<f64>,
    pub value: EntityId,
    pub source: Source,
}

impl StoreEntry {
    pub fn provenance(&self) -> Provenance {
        self.source.provenance()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborHit {
    pub entity: EntityId,
    pub distance: f64,
    /// Index of the matched entry in the store.
    pub entry: usize,
}

/// Immutable after construction; safe to search from many threads.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeStore {
    dim: usize,
    entries: Vec<StoreEntry>,
    /// Seed of the model whose anchors form the keys.
    seed: u64,
}

/// Which entry kinds [`KnowledgeStore::build`] generates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreSources {
    pub descriptions: bool,
    pub triples: bool,
}

impl StoreSources {
    pub const ALL: StoreSources = StoreSources {
        descriptions: true,
        triples: true,
    };
}

impl std::str::FromStr for StoreSources {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = StoreSources {
            descriptions: false,
            triples: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "descriptions" => out.descriptions = true,
                "triples" => out.triples = true,
                "all" => out = StoreSources::ALL,
                other => return Err(Error::Argument(format!("unknown store source `{other}`"))),
            }
        }
        if !out.descriptions && !out.triples {
            return Err(Error::Argument("no store sources selected".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for StoreSources {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.descriptions, self.triples) {
            (true, true) => f.write_str("descriptions,triples"),
            (true, false) => f.write_str("descriptions"),
            (false, true) => f.write_str("triples"),
            (false, false) => f.write_str(""),
        }
    }
}

fn encode_all(model: &EncoderModel, seqs: &[EncodedSequence]) -> Result<Vec<Vec<f64>>> {
    seqs.par_iter()
        .map(|s| model.encode(s).map(|a| a.vector))
        .collect()
}

/// One entry per described entity, keyed by the anchor of its description
/// input. Returns the entries and the number of entities skipped for lacking
/// a description.
pub fn build_store_descriptions(
    model: &EncoderModel,
    graph: &KnowledgeGraph,
    vocab: &Vocabulary,
) -> Result<(Vec<StoreEntry>, usize)> {
    let described: Vec<EntityId> = graph
        .entities()
        .filter(|&e| !graph.description(e).is_empty())
        .collect();
    let seqs = described
        .iter()
        .map(|&e| vocab.description_input(e, graph.description(e)))
        .collect::<Result<Vec<_>>>()?;
    let keys = encode_all(model, &seqs)?;
    let entries = described
        .iter()
        .zip(keys)
        .map(|(&e, key)| StoreEntry {
            key,
            value: e,
            source: Source::Description { entity: e },
        })
        .collect();
    Ok((entries, graph.num_entities() - described.len()))
}

/// Two entries per train triple: the tail query valued by the tail, then the
/// head query valued by the head.
pub fn build_store_triples(
    model: &EncoderModel,
    graph: &KnowledgeGraph,
    vocab: &Vocabulary,
    split: &DatasetSplit,
) -> Result<Vec<StoreEntry>> {
    let mut seqs = Vec::with_capacity(split.train.len() * 2);
    for t in &split.train {
        let rel = graph.relation_label(t.relation);
        seqs.push(vocab.tail_query(t.head, graph.description(t.head), rel)?);
        seqs.push(vocab.head_query(rel, t.tail, graph.description(t.tail))?);
    }
    let keys = encode_all(model, &seqs)?;
    Ok(keys
        .into_iter()
        .enumerate()
        .map(|(i, key)| {
            let t = &split.train[i / 2];
            let (value, slot) = if i % 2 == 0 {
                (t.tail, Slot::Tail)
            } else {
                (t.head, Slot::Head)
            };
            StoreEntry {
                key,
                value,
                source: Source::Triple { index: i / 2, slot },
            }
        })
        .collect())
}

/// Euclidean distance, summed in index order.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s.sqrt()
}

fn hit_order(a: &NeighborHit, b: &NeighborHit) -> std::cmp::Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.entry.cmp(&b.entry))
}

fn top_k(mut hits: Vec<NeighborHit>, k: usize) -> Vec<NeighborHit> {
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, hit_order);
        hits.truncate(k);
    }
    hits.sort_unstable_by(hit_order);
    hits
}

impl KnowledgeStore {
    pub fn new(dim: usize, entries: Vec<StoreEntry>, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("store dimension must be positive".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.key.len() != dim {
                return Err(Error::Argument(format!(
                    "entry {i} has dim {}, store has {dim}",
                    e.key.len()
                )));
            }
            if !e.key.iter().all(|v| v.is_finite()) {
                return Err(Error::Argument(format!("entry {i} has a non-finite key")));
            }
        }
        Ok(KnowledgeStore { dim, entries, seed })
    }

    /// Description entries (in entity order) followed by triple entries, as
    /// selected by `sources`. Returns the store and the number of entities
    /// skipped for lacking a description.
    pub fn build(
        model: &EncoderModel,
        graph: &KnowledgeGraph,
        vocab: &Vocabulary,
        split: &DatasetSplit,
        sources: StoreSources,
    ) -> Result<(Self, usize)> {
        let mut entries = Vec::new();
        let mut skipped = 0;
        if sources.descriptions {
            let (d, s) = build_store_descriptions(model, graph, vocab)?;
            entries = d;
            skipped = s;
        }
        if sources.triples {
            entries.extend(build_store_triples(model, graph, vocab, split)?);
        }
        Ok((KnowledgeStore::new(model.dim(), entries, model.seed())?, skipped))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.entries
            .iter()
            .filter(|e| e.provenance() == provenance)
            .count()
    }

    fn check_query(&self, anchor: &[f64], k: usize) -> Result<()> {
        if anchor.len() != self.dim {
            return Err(Error::Argument(format!(
                "anchor has dim {}, store has {}",
                anchor.len(),
                self.dim
            )));
        }
        if k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        if self.entries.is_empty() {
            return Err(Error::State("knowledge store is empty".into()));
        }
        Ok(())
    }

    fn scan(&self, anchor: &[f64], start: usize, entries: &[StoreEntry], k: usize) -> Vec<NeighborHit> {
        let hits = entries
            .iter()
            .enumerate()
            .map(|(i, e)| NeighborHit {
                entity: e.value,
                distance: euclidean(&e.key, anchor),
                entry: start + i,
            })
            .collect();
        top_k(hits, k)
    }

    /// The `k` entries closest to `anchor`, ascending by distance with ties
    /// broken by entry index.
    pub fn knn_search(&self, anchor: &[f64], k: usize) -> Result<Vec<NeighborHit>> {
        self.check_query(anchor, k)?;
        Ok(self.scan(anchor, 0, &self.entries, k))
    }

    /// [`Self::knn_search`] over store partitions in parallel; the merged
    /// result is identical to the sequential one.
    pub fn knn_search_par(&self, anchor: &[f64], k: usize, chunk: usize) -> Result<Vec<NeighborHit>> {
        self.check_query(anchor, k)?;
        let chunk = chunk.max(1);
        let partial: Vec<NeighborHit> = self
            .entries
            .par_chunks(chunk)
            .enumerate()
            .flat_map_iter(|(c, entries)| self.scan(anchor, c * chunk, entries, k))
            .collect();
        Ok(top_k(partial, k))
    }

    /// Writes the binary format: a header line, then per entry the entity id
    /// (`u32`), provenance code, source id (`u64`), slot code and the key, all
    /// little-endian.
    pub fn save(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "{STORE_MAGIC} dim={} n={} seed={} format=binary",
            self.dim,
            self.entries.len(),
            self.seed
        )?;
        let mut buf = Vec::with_capacity(self.entries.len() * (14 + 8 * self.dim));
        for e in &self.entries {
            let (prov, id, slot) = e.source.codes();
            buf.extend_from_slice(&e.value.0.to_le_bytes());
            buf.push(prov);
            buf.extend_from_slice(&id.to_le_bytes());
            buf.push(slot);
            for v in &e.key {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    /// Debug variant: one whitespace-separated line per entry. Keys use the
    /// shortest decimal form that parses back to the same value.
    pub fn save_text(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "{STORE_MAGIC} dim={} n={} seed={} format=text",
            self.dim,
            self.entries.len(),
            self.seed
        )?;
        for e in &self.entries {
            let (prov, id, slot) = e.source.codes();
            write!(w, "{} {} {} {}", e.value.0, prov as char, id, slot as char)?;
            for v in &e.key {
                write!(w, " {v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads either format, detected from the header.
    pub fn load(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Format(e.to_string()))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing store header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Format("store header is not UTF-8".into()))?;
        let fields = parse_header(header, STORE_MAGIC)?;
        let get = |k: &str| -> Result<&str> {
            fields
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("store header lacks `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for `{k}`")))
        };
        let dim = num("dim")? as usize;
        let n = num("n")? as usize;
        let seed = num("seed")?;
        if dim == 0 {
            return Err(Error::Format("store dim must be positive".into()));
        }
        let body = &bytes[nl + 1..];
        let entries = match get("format")? {
            "binary" => read_binary(body, dim, n)?,
            "text" => read_text(body, dim, n)?,
            other => return Err(Error::Format(format!("unknown store format `{other}`"))),
        };
        KnowledgeStore::new(dim, entries, seed).map_err(|e| Error::Format(e.to_string()))
    }
}

fn read_binary(body: &[u8], dim: usize, n: usize) -> Result<Vec<StoreEntry>> {
    let record = 14 + 8 * dim;
    if body.len() != n * record {
        return Err(Error::Format(format!(
            "store body has {} bytes, expected {} for {n} entries",
            body.len(),
            n * record
        )));
    }
    body.chunks_exact(record)
        .map(|rec| {
            let value = EntityId(u32::from_le_bytes(rec[0..4].try_into().unwrap()));
            let id = u64::from_le_bytes(rec[5..13].try_into().unwrap());
            let source = Source::from_codes(rec[4], id, rec[13])?;
            let key = rec[14..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(StoreEntry { key, value, source })
        })
        .collect()
}

fn read_text(body: &[u8], dim: usize, n: usize) -> Result<Vec<StoreEntry>> {
    if !body.is_empty() && !body.ends_with(b"\n") {
        return Err(Error::Format("store text ends mid-line".into()));
    }
    let mut entries = Vec::with_capacity(n);
    for (i, line) in body.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        let bad = |what: &str| Error::Format(format!("store line {}: {what}", i + 2));
        let mut parts = line.split_whitespace();
        let mut next = || parts.next().ok_or_else(|| bad("too few fields"));
        let value = EntityId(next()?.parse().map_err(|_| bad("bad entity id"))?);
        let prov = single_byte(next()?).ok_or_else(|| bad("bad provenance code"))?;
        let id: u64 = next()?.parse().map_err(|_| bad("bad source id"))?;
        let slot = single_byte(next()?).ok_or_else(|| bad("bad slot code"))?;
        let source = Source::from_codes(prov, id, slot)?;
        let key = parts
            .map(|v| v.parse::<f64>().map_err(|_| bad("bad key value")))
            .collect::<Result<Vec<_>>>()?;
        if key.len() != dim {
            return Err(bad("key length does not match dim"));
        }
        entries.push(StoreEntry { key, value, source });
    }
    if entries.len() != n {
        return Err(Error::Format(format!(
            "store has {} entries, header says {n}",
            entries.len()
        )));
    }
    Ok(entries)
}

fn single_byte(s: &str) -> Option<u8> {
    match s.as_bytes() {
        [b] => Some(*b),
        _ => None,
    }
}

/// Keeps the first (closest) hit of each entity; input must be ascending.
pub fn dedupe_per_entity(hits: &[NeighborHit]) -> Vec<NeighborHit> {
    let mut seen = std::collections::HashSet::with_capacity(hits.len());
    hits.iter()
        .filter(|h| seen.insert(h.entity))
        .copied()
        .collect()
}

/// Sparse distribution over entities in hit order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseDistribution(pub Vec<(EntityId, f64)>);

impl SparseDistribution {
    pub fn get(&self, e: EntityId) -> f64 {
        self.0
            .iter()
            .find(|(x, _)| *x == e)
            .map_or(0.0, |&(_, p)| p)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_dense(&self, num_entities: usize) -> Vec<f64> {
        let mut out = vec![0.0; num_entities];
        for &(e, p) in &self.0 {
            out[e.index()] = p;
        }
        out
    }
}

/// `p(e) ∝ exp(-d_e)` over deduplicated hits.
pub fn knn_distribution(hits: &[NeighborHit]) -> Result<SparseDistribution> {
    knn_distribution_with_temperature(hits, 1.0)
}

/// `p(e) ∝ exp(-d_e / temperature)`, computed with max-shifted exponentials.
pub fn knn_distribution_with_temperature(
    hits: &[NeighborHit],
    temperature: f64,
) -> Result<SparseDistribution> {
    if hits.is_empty() {
        return Err(Error::Argument("no neighbors to form a distribution".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut seen = std::collections::HashSet::with_capacity(hits.len());
    if !hits.iter().all(|h| seen.insert(h.entity)) {
        return Err(Error::Argument("hits are not deduplicated".into()));
    }
    let top = hits
        .iter()
        .map(|h| -h.distance / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = hits
        .iter()
        .map(|h| (-h.distance / temperature - top).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    Ok(SparseDistribution(
        hits.iter()
            .zip(weights)
            .map(|(h, w)| (h.entity, w / z))
            .collect(),
    ))
}
