//! Knowledge graph ingestion, dataset splits and frequency profiling.
//!
//! A [`KnowledgeGraph`] owns dense entity and relation tables, the
//! deduplicated triple list and one description per entity. Ids are
//! assigned in first-appearance order: entities seen in the triples file
//! first (head before tail on each line), then description-only entities
//! in descriptions-file order.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

/// Non-fatal issues found while loading.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadWarnings {
    pub missing_descriptions: usize,
    pub duplicate_triples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    entities: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relations: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    triples: Vec<Triple>,
    descriptions: Vec<String>,
    warnings: LoadWarnings,
}

/// Incremental builder used by the file loaders and the toy generator.
#[derive(Default)]
pub struct GraphBuilder {
    entities: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relations: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    triples: Vec<Triple>,
    seen: HashSet<Triple>,
    descriptions: HashMap<EntityId, String>,
    duplicate_triples: usize,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity(&mut self, label: &str) -> EntityId {
        if let Some(&id) = self.entity_index.get(label) {
            return id;
        }
        let id = EntityId(self.entities.len() as u32);
        self.entities.push(label.to_string());
        self.entity_index.insert(label.to_string(), id);
        id
    }

    pub fn relation(&mut self, label: &str) -> RelationId {
        if let Some(&id) = self.relation_index.get(label) {
            return id;
        }
        let id = RelationId(self.relations.len() as u32);
        self.relations.push(label.to_string());
        self.relation_index.insert(label.to_string(), id);
        id
    }

    /// Adds a triple by label. Returns `false` if it was a duplicate.
    pub fn add_triple(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let h = self.entity(head);
        let r = self.relation(relation);
        let t = self.entity(tail);
        let triple = Triple::new(h, r, t);
        if self.seen.insert(triple) {
            self.triples.push(triple);
            true
        } else {
            self.duplicate_triples += 1;
            false
        }
    }

    /// Sets the description of `label`, registering the entity if needed.
    /// Returns `false` if the entity already had a description.
    pub fn describe(&mut self, label: &str, text: &str) -> bool {
        let id = self.entity(label);
        if self.descriptions.contains_key(&id) {
            return false;
        }
        self.descriptions.insert(id, text.to_string());
        true
    }

    pub fn build(self) -> Result<KnowledgeGraph> {
        if self.triples.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let mut missing = 0;
        let mut descriptions = Vec::with_capacity(self.entities.len());
        let mut provided = self.descriptions;
        for i in 0..self.entities.len() {
            match provided.remove(&EntityId(i as u32)) {
                Some(text) => descriptions.push(text),
                None => {
                    missing += 1;
                    descriptions.push(String::new());
                }
            }
        }
        Ok(KnowledgeGraph {
            entities: self.entities,
            entity_index: self.entity_index,
            relations: self.relations,
            relation_index: self.relation_index,
            triples: self.triples,
            descriptions,
            warnings: LoadWarnings {
                missing_descriptions: missing,
                duplicate_triples: self.duplicate_triples,
            },
        })
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    line.strip_suffix('\r').unwrap_or(line).split('\t').collect()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_triples_into(builder: &mut GraphBuilder, path: &Path) -> Result<Vec<Triple>> {
    let text = read_text(path)?;
    let mut added = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(line);
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 3 tab-separated columns, found {}", fields.len()),
            });
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty label".into(),
            });
        }
        if builder.add_triple(fields[0], fields[1], fields[2]) {
            added.push(*builder.triples.last().unwrap());
        }
    }
    Ok(added)
}

fn parse_descriptions_into(builder: &mut GraphBuilder, path: &Path) -> Result<()> {
    let text = read_text(path)?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(line);
        if fields.len() != 2 || fields[0].is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!(
                    "expected `entity<TAB>description`, found {} columns",
                    fields.len()
                ),
            });
        }
        if !builder.describe(fields[0], fields[1]) {
            return Err(Error::DescriptionConflict {
                path: path.to_path_buf(),
                line: i + 1,
                entity: fields[0].to_string(),
            });
        }
    }
    Ok(())
}

/// Loads a graph from a triples file and a descriptions file.
pub fn load_graph(triples_path: &Path, descriptions_path: &Path) -> Result<KnowledgeGraph> {
    let mut builder = GraphBuilder::new();
    parse_triples_into(&mut builder, triples_path)?;
    parse_descriptions_into(&mut builder, descriptions_path)?;
    builder.build()
}

/// Loads a pre-made split from `train.txt`, `valid.txt` and `test.txt` in
/// `dir`, sharing one descriptions file. A triple repeated across files is
/// kept in the first file it appears in.
pub fn load_split_dir(dir: &Path, descriptions_path: &Path) -> Result<(KnowledgeGraph, DatasetSplit)> {
    let mut builder = GraphBuilder::new();
    let train = parse_triples_into(&mut builder, &dir.join("train.txt"))?;
    let valid = parse_triples_into(&mut builder, &dir.join("valid.txt"))?;
    let test = parse_triples_into(&mut builder, &dir.join("test.txt"))?;
    parse_descriptions_into(&mut builder, descriptions_path)?;
    let graph = builder.build()?;

    let seen = entities_of(&train);
    let mut held_out: Vec<EntityId> = valid
        .iter()
        .chain(&test)
        .flat_map(|t| [t.head, t.tail])
        .filter(|e| !seen.contains(e))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    held_out.sort();
    let mode = if held_out.is_empty() {
        SplitMode::Transductive
    } else {
        SplitMode::Inductive
    };
    Ok((
        graph,
        DatasetSplit {
            train,
            valid,
            test,
            mode,
            held_out,
        },
    ))
}

impl KnowledgeGraph {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        &self.entities[id.index()]
    }

    pub fn relation_label(&self, id: RelationId) -> &str {
        &self.relations[id.index()]
    }

    pub fn entity_labels(&self) -> &[String] {
        &self.entities
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relations
    }

    pub fn description(&self, id: EntityId) -> &str {
        &self.descriptions[id.index()]
    }

    pub fn entity_id(&self, label: &str) -> Option<EntityId> {
        self.entity_index.get(label).copied()
    }

    pub fn relation_id(&self, label: &str) -> Option<RelationId> {
        self.relation_index.get(label).copied()
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> {
        (0..self.entities.len() as u32).map(EntityId)
    }

    pub fn warnings(&self) -> &LoadWarnings {
        &self.warnings
    }

    pub(crate) fn set_warnings(&mut self, warnings: LoadWarnings) {
        self.warnings = warnings;
    }

    pub fn described_count(&self) -> usize {
        self.descriptions.iter().filter(|d| !d.is_empty()).count()
    }
}

impl fmt::Display for KnowledgeGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} entities, {} relations, {} triples",
            self.num_entities(),
            self.num_relations(),
            self.triples.len()
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Transductive,
    Inductive,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transductive" => Ok(SplitMode::Transductive),
            "inductive" => Ok(SplitMode::Inductive),
            other => Err(Error::Argument(format!("unknown split mode `{other}`"))),
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Transductive => "transductive",
            SplitMode::Inductive => "inductive",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub mode: SplitMode,
    /// Entities withheld from training (inductive mode), sorted by id.
    pub held_out: Vec<EntityId>,
}

impl DatasetSplit {
    /// Per-entity flag: `true` if the entity belongs to the train entity view.
    pub fn train_view(&self, num_entities: usize) -> Vec<bool> {
        let mut view = vec![true; num_entities];
        for e in &self.held_out {
            view[e.index()] = false;
        }
        view
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

fn entities_of(triples: &[Triple]) -> HashSet<EntityId> {
    triples.iter().flat_map(|t| [t.head, t.tail]).collect()
}

fn validate_fractions(fractions: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return Err(Error::Argument(format!(
            "split fractions must be positive, got ({a}, {b}, {c})"
        )));
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "split fractions must sum to 1, got {}",
            a + b + c
        )));
    }
    Ok(())
}

/// Generates a seeded train/valid/test split.
///
/// Transductive mode shuffles the triples, cuts valid and test blocks of
/// `round(f * |T|)` triples and then moves every valid/test triple that
/// mentions a train-unseen entity back into train. Inductive mode draws a
/// seeded set of `round(f_test * |E_T|)` entities (at least one) among the
/// entities that occur in triples, routes every triple touching them to
/// test, and splits the rest into train and valid.
pub fn make_split(
    graph: &KnowledgeGraph,
    fractions: (f64, f64, f64),
    mode: SplitMode,
    seed: u64,
) -> Result<DatasetSplit> {
    validate_fractions(fractions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triples = graph.triples();
    let n = triples.len();

    match mode {
        SplitMode::Transductive => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let n_test = ((fractions.2 * n as f64).round() as usize).min(n);
            let n_valid = ((fractions.1 * n as f64).round() as usize).min(n - n_test);
            let mut test_idx: Vec<usize> = order[..n_test].to_vec();
            let mut valid_idx: Vec<usize> = order[n_test..n_test + n_valid].to_vec();
            let mut train_idx: Vec<usize> = order[n_test + n_valid..].to_vec();
            test_idx.sort_unstable();
            valid_idx.sort_unstable();
            train_idx.sort_unstable();

            let mut train: Vec<Triple> = train_idx.iter().map(|&i| triples[i]).collect();
            let mut covered = entities_of(&train);
            let mut keep = |idx: Vec<usize>, train: &mut Vec<Triple>| -> Vec<Triple> {
                let mut kept = Vec::new();
                for i in idx {
                    let t = triples[i];
                    if covered.contains(&t.head) && covered.contains(&t.tail) {
                        kept.push(t);
                    } else {
                        covered.insert(t.head);
                        covered.insert(t.tail);
                        train.push(t);
                    }
                }
                kept
            };
            let valid = keep(valid_idx, &mut train);
            let test = keep(test_idx, &mut train);
            Ok(DatasetSplit {
                train,
                valid,
                test,
                mode,
                held_out: Vec::new(),
            })
        }
        SplitMode::Inductive => {
            let mut candidates: Vec<EntityId> = entities_of(triples).into_iter().collect();
            candidates.sort();
            if candidates.len() < 2 {
                return Err(Error::Infeasible(
                    "fewer than two entities occur in triples".into(),
                ));
            }
            candidates.shuffle(&mut rng);
            let n_new = ((fractions.2 * candidates.len() as f64).round() as usize)
                .clamp(1, candidates.len() - 1);
            let mut held_out: Vec<EntityId> = candidates[..n_new].to_vec();
            held_out.sort();
            let new_set: HashSet<EntityId> = held_out.iter().copied().collect();

            let (test, rest): (Vec<Triple>, Vec<Triple>) = triples
                .iter()
                .partition(|t| new_set.contains(&t.head) || new_set.contains(&t.tail));
            if rest.is_empty() {
                return Err(Error::Infeasible(
                    "every triple touches a held-out entity; no training triples remain".into(),
                ));
            }

            let mut order: Vec<usize> = (0..rest.len()).collect();
            order.shuffle(&mut rng);
            let valid_share = fractions.1 / (fractions.0 + fractions.1);
            let n_valid = ((valid_share * rest.len() as f64).round() as usize).min(rest.len() - 1);
            let mut valid_idx = order[..n_valid].to_vec();
            let mut train_idx = order[n_valid..].to_vec();
            valid_idx.sort_unstable();
            train_idx.sort_unstable();
            let mut train: Vec<Triple> = train_idx.iter().map(|&i| rest[i]).collect();
            let mut covered = entities_of(&train);
            let mut valid = Vec::new();
            for i in valid_idx {
                let t = rest[i];
                if covered.contains(&t.head) && covered.contains(&t.tail) {
                    valid.push(t);
                } else {
                    covered.insert(t.head);
                    covered.insert(t.tail);
                    train.push(t);
                }
            }
            Ok(DatasetSplit {
                train,
                valid,
                test,
                mode,
                held_out,
            })
        }
    }
}

/// Keeps a seeded uniform subset of `round(fraction * |train|)` training
/// triples in their original order. Valid and test are untouched.
pub fn subsample_training(split: &DatasetSplit, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "subsample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let n = split.train.len();
    let keep = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut chosen = order[..keep].to_vec();
    chosen.sort_unstable();
    Ok(DatasetSplit {
        train: chosen.into_iter().map(|i| split.train[i]).collect(),
        ..split.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    /// Train-triple occurrences per entity, indexed by entity id.
    pub counts: Vec<u64>,
    /// Ascending lower bounds; bucket `i` is `[b_i, b_{i+1})`, the last is open.
    pub boundaries: Vec<u64>,
}

impl FrequencyTable {
    pub fn count(&self, e: EntityId) -> u64 {
        self.counts[e.index()]
    }

    pub fn num_buckets(&self) -> usize {
        self.boundaries.len()
    }

    pub fn bucket_of_count(&self, count: u64) -> usize {
        self.boundaries.partition_point(|&b| b <= count) - 1
    }

    pub fn bucket(&self, e: EntityId) -> usize {
        self.bucket_of_count(self.count(e))
    }

    pub fn bucket_label(&self, i: usize) -> String {
        match self.boundaries.get(i + 1) {
            Some(hi) => format!("[{},{})", self.boundaries[i], hi),
            None => format!("[{},inf)", self.boundaries[i]),
        }
    }

    pub fn bucket_range(&self, i: usize) -> (u64, Option<u64>) {
        (self.boundaries[i], self.boundaries.get(i + 1).copied())
    }
}

/// Counts head/tail occurrences of every graph entity in the train triples.
pub fn entity_frequency(
    split: &DatasetSplit,
    num_entities: usize,
    boundaries: &[u64],
) -> Result<FrequencyTable> {
    if boundaries.first() != Some(&0) {
        return Err(Error::Argument(
            "bucket boundaries must start at 0 to partition [0, inf)".into(),
        ));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument(
            "bucket boundaries must be strictly ascending".into(),
        ));
    }
    let mut counts = vec![0u64; num_entities];
    for t in &split.train {
        counts[t.head.index()] += 1;
        counts[t.tail.index()] += 1;
    }
    Ok(FrequencyTable {
        counts,
        boundaries: boundaries.to_vec(),
    })
}
