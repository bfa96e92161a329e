//! Interpolated inference, filtered ranking and link prediction metrics.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::graph::{DatasetSplit, EntityId, FrequencyTable, KnowledgeGraph, RelationId, Triple};
use crate::store::{
    dedupe_per_entity, knn_distribution_with_temperature, KnowledgeStore, NeighborHit, Provenance,
    Source, SparseDistribution,
};
use crate::text::{EncodedSequence, Vocabulary};

/// Which slot of the test triple is predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Head,
    Tail,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Head => "head",
            Direction::Tail => "tail",
        })
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Direction::Head),
            "tail" => Ok(Direction::Tail),
            other => Err(Error::Argument(format!("unknown direction `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub lambda: f64,
    pub k: usize,
    pub filtered: bool,
    pub directions: Vec<Direction>,
    /// Divisor of the negative distances in `p_kNN`.
    pub temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lambda: 0.2,
            k: 64,
            filtered: true,
            directions: vec![Direction::Head, Direction::Tail],
            temperature: 1.0,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Argument(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        if self.directions.is_empty() {
            return Err(Error::Argument("no evaluation directions".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Argument("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// `λ·p_kNN + (1-λ)·p_MEM` per entity, with `p_kNN` zero off its support.
pub fn interpolate(p_knn: &SparseDistribution, p_mem: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if let Some(&(e, _)) = p_knn.0.iter().find(|(e, _)| e.index() >= p_mem.len()) {
        return Err(Error::Argument(format!(
            "kNN entity {} outside a distribution over {} entities",
            e.0,
            p_mem.len()
        )));
    }
    let knn = p_knn.to_dense(p_mem.len());
    Ok(knn
        .iter()
        .zip(p_mem)
        .map(|(&k, &m)| lambda * k + (1.0 - lambda) * m)
        .collect())
}

/// Dense interpolated distribution together with its two components.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolatedDistribution {
    pub probs: Vec<f64>,
    pub mem: Vec<f64>,
    pub knn: Option<SparseDistribution>,
    /// Deduplicated neighbors behind `knn`.
    pub neighbors: Vec<NeighborHit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub triple: Triple,
    pub direction: Direction,
    pub gold: EntityId,
    /// Average-over-ties rank among the unfiltered candidates.
    pub rank: f64,
    pub filtered: bool,
}

/// Rank of `gold` under `probs`, skipping entities flagged in `filter_out`.
/// Entities tied with the gold count half each.
pub fn rank_entities(probs: &[f64], gold: EntityId, filter_out: &[EntityId]) -> Result<f64> {
    let g = gold.index();
    if g >= probs.len() {
        return Err(Error::Argument(format!("gold entity {} out of range", gold.0)));
    }
    if filter_out.contains(&gold) {
        return Err(Error::Argument("gold entity is filtered out".into()));
    }
    let mut removed = vec![false; probs.len()];
    for e in filter_out {
        if let Some(r) = removed.get_mut(e.index()) {
            *r = true;
        }
    }
    let pg = probs[g];
    let mut above = 0usize;
    let mut ties = 0usize;
    for (i, &p) in probs.iter().enumerate() {
        if i == g || removed[i] {
            continue;
        }
        if p > pg {
            above += 1;
        } else if p == pg {
            ties += 1;
        }
    }
    Ok(1.0 + above as f64 + ties as f64 / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub mr: f64,
    pub mrr: f64,
}

impl Metrics {
    /// `None` when there are no ranks, so empty groups stay distinguishable
    /// from groups scoring zero.
    pub fn from_ranks(ranks: &[f64]) -> Option<Metrics> {
        if ranks.is_empty() {
            return None;
        }
        let n = ranks.len() as f64;
        let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Some(Metrics {
            count: ranks.len(),
            hits1: hits(1.0),
            hits3: hits(3.0),
            hits10: hits(10.0),
            mr: ranks.iter().sum::<f64>() / n,
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
        })
    }
}

/// One machine-readable report cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// `head`, `tail` or `both`.
    pub direction: String,
    /// Frequency bucket label, or `all`.
    pub bucket: String,
    pub lambda: f64,
    pub k: usize,
    /// Absent when the cell has no query instances.
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub lambda: f64,
    pub k: usize,
    pub filtered: bool,
    pub overall: Option<Metrics>,
    pub head: Option<Metrics>,
    pub tail: Option<Metrics>,
    pub rankings: Vec<RankingResult>,
}

impl MetricsReport {
    pub fn from_rankings(lambda: f64, k: usize, filtered: bool, rankings: Vec<RankingResult>) -> Self {
        let ranks = |d: Option<Direction>| -> Vec<f64> {
            rankings
                .iter()
                .filter(|r| d.is_none_or(|d| r.direction == d))
                .map(|r| r.rank)
                .collect()
        };
        MetricsReport {
            lambda,
            k,
            filtered,
            overall: Metrics::from_ranks(&ranks(None)),
            head: Metrics::from_ranks(&ranks(Some(Direction::Head))),
            tail: Metrics::from_ranks(&ranks(Some(Direction::Tail))),
            rankings,
        }
    }

    /// Direction cells for the `all` bucket.
    pub fn records(&self) -> Vec<MetricsRecord> {
        [("both", self.overall), ("head", self.head), ("tail", self.tail)]
            .into_iter()
            .map(|(d, m)| MetricsRecord {
                direction: d.into(),
                bucket: "all".into(),
                lambda: self.lambda,
                k: self.k,
                metrics: m,
            })
            .collect()
    }
}

/// Known true answers per query, over every split.
pub struct FilterIndex {
    answers: HashMap<(Direction, EntityId, RelationId), Vec<EntityId>>,
}

impl FilterIndex {
    pub fn new(split: &DatasetSplit) -> Self {
        let mut answers: HashMap<_, Vec<EntityId>> = HashMap::new();
        for t in split.all_triples() {
            answers
                .entry((Direction::Tail, t.head, t.relation))
                .or_default()
                .push(t.tail);
            answers
                .entry((Direction::Head, t.tail, t.relation))
                .or_default()
                .push(t.head);
        }
        for v in answers.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        FilterIndex { answers }
    }

    /// Every other true answer of the query built from `triple`.
    pub fn others(&self, triple: &Triple, direction: Direction) -> Vec<EntityId> {
        let (anchor, gold) = match direction {
            Direction::Tail => (triple.head, triple.tail),
            Direction::Head => (triple.tail, triple.head),
        };
        self.answers
            .get(&(direction, anchor, triple.relation))
            .map(|v| v.iter().copied().filter(|&e| e != gold).collect())
            .unwrap_or_default()
    }
}

/// A link prediction query: the known entity, the relation and which slot
/// is missing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub entity: EntityId,
    pub relation: RelationId,
    pub direction: Direction,
}

impl Query {
    pub fn of(triple: &Triple, direction: Direction) -> Self {
        let entity = match direction {
            Direction::Tail => triple.head,
            Direction::Head => triple.tail,
        };
        Query {
            entity,
            relation: triple.relation,
            direction,
        }
    }

    /// Parses `head|relation|?` or `?|relation|tail` by label.
    pub fn parse(graph: &KnowledgeGraph, text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split('|').map(str::trim).collect();
        let [h, r, t] = parts[..] else {
            return Err(Error::Argument(format!(
                "query `{text}` is not of the form `head|relation|?` or `?|relation|tail`"
            )));
        };
        let relation = graph.relation_id(r).ok_or_else(|| Error::Lookup {
            kind: "relation",
            label: r.into(),
        })?;
        let entity = |l: &str| {
            graph.entity_id(l).ok_or_else(|| Error::Lookup {
                kind: "entity",
                label: l.into(),
            })
        };
        match (h, t) {
            ("?", "?") => Err(Error::Argument("query must name one entity".into())),
            (h, "?") => Ok(Query {
                entity: entity(h)?,
                relation,
                direction: Direction::Tail,
            }),
            ("?", t) => Ok(Query {
                entity: entity(t)?,
                relation,
                direction: Direction::Head,
            }),
            _ => Err(Error::Argument("query must leave one slot as `?`".into())),
        }
    }
}

/// The masked input sequence for `query`.
pub fn build_query(graph: &KnowledgeGraph, vocab: &Vocabulary, query: &Query) -> Result<EncodedSequence> {
    let rel = graph.relation_label(query.relation);
    let e = query.entity;
    match query.direction {
        Direction::Tail => vocab.tail_query(e, graph.description(e), rel),
        Direction::Head => vocab.head_query(rel, e, graph.description(e)),
    }
}

fn gold_of(triple: &Triple, direction: Direction) -> EntityId {
    match direction {
        Direction::Tail => triple.tail,
        Direction::Head => triple.head,
    }
}

/// Everything about a query instance that does not depend on `λ` or `k`.
struct Prepared {
    triple: Triple,
    direction: Direction,
    mem: Vec<f64>,
    /// The `k_max` nearest store entries.
    hits: Vec<NeighborHit>,
    filter: Vec<EntityId>,
}

/// Shared inputs of evaluation runs.
pub struct EvalContext<'a> {
    pub model: &'a EncoderModel,
    /// `None` restricts evaluation to `λ = 0`.
    pub store: Option<&'a KnowledgeStore>,
    pub graph: &'a KnowledgeGraph,
    pub vocab: &'a Vocabulary,
    pub split: &'a DatasetSplit,
}

impl EvalContext<'_> {
    fn check(&self, needs_store: bool) -> Result<()> {
        match self.store {
            Some(s) if s.dim() != self.model.dim() => Err(Error::Config(format!(
                "store has dim {}, model has {}",
                s.dim(),
                self.model.dim()
            ))),
            Some(s) if needs_store && s.is_empty() => {
                Err(Error::Config("knowledge store is empty".into()))
            }
            None if needs_store => Err(Error::Config(
                "a knowledge store is required when lambda > 0".into(),
            )),
            _ => Ok(()),
        }
    }

    fn prepare(
        &self,
        triples: &[Triple],
        directions: &[Direction],
        k_max: usize,
        filtered: bool,
    ) -> Result<Vec<Prepared>> {
        let filter = filtered.then(|| FilterIndex::new(self.split));
        let instances: Vec<(Triple, Direction)> = triples
            .iter()
            .flat_map(|t| directions.iter().map(move |&d| (*t, d)))
            .collect();
        instances
            .par_iter()
            .map(|&(triple, direction)| {
                let seq = build_query(self.graph, self.vocab, &Query::of(&triple, direction))?;
                let anchor = self.model.encode(&seq)?.vector;
                let mem = self.model.mem_from_anchor(&anchor)?;
                let hits = match self.store {
                    Some(s) if k_max > 0 && !s.is_empty() => s.knn_search(&anchor, k_max)?,
                    _ => Vec::new(),
                };
                Ok(Prepared {
                    triple,
                    direction,
                    mem,
                    hits,
                    filter: filter
                        .as_ref()
                        .map(|f| f.others(&triple, direction))
                        .unwrap_or_default(),
                })
            })
            .collect()
    }
}

fn distribution(
    p: &Prepared,
    lambda: f64,
    k: usize,
    temperature: f64,
) -> Result<InterpolatedDistribution> {
    if lambda == 0.0 || p.hits.is_empty() {
        return Ok(InterpolatedDistribution {
            probs: interpolate(&SparseDistribution(Vec::new()), &p.mem, lambda)?,
            mem: p.mem.clone(),
            knn: None,
            neighbors: Vec::new(),
        });
    }
    let neighbors = dedupe_per_entity(&p.hits[..k.min(p.hits.len())]);
    let knn = knn_distribution_with_temperature(&neighbors, temperature)?;
    Ok(InterpolatedDistribution {
        probs: interpolate(&knn, &p.mem, lambda)?,
        mem: p.mem.clone(),
        knn: Some(knn),
        neighbors,
    })
}

fn rank_cell(
    prepared: &[Prepared],
    lambda: f64,
    k: usize,
    filtered: bool,
    temperature: f64,
) -> Result<MetricsReport> {
    let rankings = prepared
        .iter()
        .map(|p| {
            let dist = distribution(p, lambda, k, temperature)?;
            let gold = gold_of(&p.triple, p.direction);
            Ok(RankingResult {
                triple: p.triple,
                direction: p.direction,
                gold,
                rank: rank_entities(&dist.probs, gold, &p.filter)?,
                filtered,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_rankings(lambda, k, filtered, rankings))
}

/// Ranks the gold entity of every test triple in every configured direction.
pub fn evaluate(ctx: &EvalContext<'_>, config: &EvalConfig) -> Result<MetricsReport> {
    evaluate_on(ctx, &ctx.split.test, config)
}

/// [`evaluate`] over an explicit triple list.
pub fn evaluate_on(ctx: &EvalContext<'_>, triples: &[Triple], config: &EvalConfig) -> Result<MetricsReport> {
    config.validate()?;
    ctx.check(config.lambda > 0.0)?;
    let k_max = if config.lambda > 0.0 { config.k } else { 0 };
    let prepared = ctx.prepare(triples, &config.directions, k_max, config.filtered)?;
    rank_cell(&prepared, config.lambda, config.k, config.filtered, config.temperature)
}

/// One evaluation per `(λ, k)` cell in row-major order (λ outer). Anchors,
/// `p_MEM` and the `max(ks)` nearest entries are computed once per query;
/// smaller `k` use prefixes of that list, which equal a fresh search.
pub fn sweep(
    ctx: &EvalContext<'_>,
    base: &EvalConfig,
    lambdas: &[f64],
    ks: &[usize],
) -> Result<Vec<MetricsReport>> {
    if lambdas.is_empty() || ks.is_empty() {
        return Err(Error::Argument("sweep grids must be non-empty".into()));
    }
    for &l in lambdas {
        check_lambda(l)?;
    }
    if ks.contains(&0) {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    base.validate()?;
    let needs_store = lambdas.iter().any(|&l| l > 0.0);
    ctx.check(needs_store)?;
    let k_max = if needs_store { *ks.iter().max().unwrap() } else { 0 };
    let prepared = ctx.prepare(&ctx.split.test, &base.directions, k_max, base.filtered)?;
    let mut out = Vec::with_capacity(lambdas.len() * ks.len());
    for &l in lambdas {
        for &k in ks {
            out.push(rank_cell(&prepared, l, k, base.filtered, base.temperature)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub bucket: String,
    pub min_count: u64,
    pub max_count: Option<u64>,
    pub metrics: Option<Metrics>,
}

/// Metrics grouped by the train frequency of each instance's gold entity.
pub fn bucket_report(rankings: &[RankingResult], freq: &FrequencyTable) -> Vec<BucketMetrics> {
    let mut ranks: Vec<Vec<f64>> = vec![Vec::new(); freq.num_buckets()];
    for r in rankings {
        ranks[freq.bucket(r.gold)].push(r.rank);
    }
    ranks
        .iter()
        .enumerate()
        .map(|(i, rs)| {
            let (lo, hi) = freq.bucket_range(i);
            BucketMetrics {
                bucket: freq.bucket_label(i),
                min_count: lo,
                max_count: hi,
                metrics: Metrics::from_ranks(rs),
            }
        })
        .collect()
}

/// Bucket cells of `report` in machine-readable form, per direction.
pub fn bucket_records(report: &MetricsReport, freq: &FrequencyTable) -> Vec<MetricsRecord> {
    let mut out = Vec::new();
    for (name, dir) in [("both", None), ("head", Some(Direction::Head)), ("tail", Some(Direction::Tail))] {
        let subset: Vec<RankingResult> = report
            .rankings
            .iter()
            .filter(|r| dir.is_none_or(|d| r.direction == d))
            .copied()
            .collect();
        for b in bucket_report(&subset, freq) {
            out.push(MetricsRecord {
                direction: name.into(),
                bucket: b.bucket,
                lambda: report.lambda,
                k: report.k,
                metrics: b.metrics,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntity {
    pub entity: EntityId,
    pub label: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainedNeighbor {
    pub entity: EntityId,
    pub label: String,
    pub distance: f64,
    pub entry: usize,
    pub provenance: Provenance,
    pub source: Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub query: String,
    pub direction: Direction,
    pub gold: Option<ScoredEntity>,
    /// Rank of the gold under the interpolated distribution, unfiltered.
    pub gold_rank: Option<f64>,
    pub lambda: f64,
    pub k: usize,
    pub mem: Vec<ScoredEntity>,
    pub knn: Vec<ScoredEntity>,
    pub interpolated: Vec<ScoredEntity>,
    pub neighbors: Vec<ExplainedNeighbor>,
}

fn top_n(graph: &KnowledgeGraph, probs: &[f64], n: usize) -> Vec<ScoredEntity> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(n)
        .map(|i| ScoredEntity {
            entity: EntityId(i as u32),
            label: graph.entity_label(EntityId(i as u32)).to_string(),
            probability: probs[i],
        })
        .collect()
}

/// Top entities under `p_MEM`, `p_kNN` and their interpolation for one query,
/// plus the retrieved neighbors with provenance.
pub fn explain_query(
    ctx: &EvalContext<'_>,
    query: &Query,
    gold: Option<EntityId>,
    config: &EvalConfig,
    n: usize,
) -> Result<Explanation> {
    config.validate()?;
    let store = ctx
        .store
        .ok_or_else(|| Error::Config("explanations need a knowledge store".into()))?;
    ctx.check(true)?;
    let seq = build_query(ctx.graph, ctx.vocab, query)?;
    let anchor = ctx.model.encode(&seq)?.vector;
    let mem = ctx.model.mem_from_anchor(&anchor)?;
    let neighbors = dedupe_per_entity(&store.knn_search(&anchor, config.k)?);
    let knn = knn_distribution_with_temperature(&neighbors, config.temperature)?;
    let probs = interpolate(&knn, &mem, config.lambda)?;
    let gold_rank = gold.map(|g| rank_entities(&probs, g, &[])).transpose()?;
    Ok(Explanation {
        query: ctx.vocab.render(&seq),
        direction: query.direction,
        gold: gold.map(|g| ScoredEntity {
            entity: g,
            label: ctx.graph.entity_label(g).to_string(),
            probability: probs[g.index()],
        }),
        gold_rank,
        lambda: config.lambda,
        k: config.k,
        mem: top_n(ctx.graph, &mem, n),
        knn: top_n(ctx.graph, &knn.to_dense(mem.len()), n),
        interpolated: top_n(ctx.graph, &probs, n),
        neighbors: neighbors
            .iter()
            .map(|h| {
                let entry = &store.entries()[h.entry];
                ExplainedNeighbor {
                    entity: h.entity,
                    label: ctx.graph.entity_label(h.entity).to_string(),
                    distance: h.distance,
                    entry: h.entry,
                    provenance: entry.provenance(),
                    source: entry.source,
                }
            })
            .collect(),
    })
}

fn fmt_metrics(m: &Option<Metrics>) -> String {
    match m {
        Some(m) => format!(
            "{:>6} {:>7.4} {:>7.4} {:>7.4} {:>8.2} {:>7.4}",
            m.count, m.hits1, m.hits3, m.hits10, m.mr, m.mrr
        ),
        None => format!("{:>6} {:>7} {:>7} {:>7} {:>8} {:>7}", 0, "-", "-", "-", "-", "-"),
    }
}

/// Fixed-width text table of report cells.
pub fn render_table(records: &[MetricsRecord]) -> String {
    let mut s = format!(
        "{:<9} {:<12} {:>6} {:>4} {:>6} {:>7} {:>7} {:>7} {:>8} {:>7}\n",
        "direction", "bucket", "lambda", "k", "n", "hits@1", "hits@3", "hits@10", "MR", "MRR"
    );
    for r in records {
        s.push_str(&format!(
            "{:<9} {:<12} {:>6.2} {:>4} {}\n",
            r.direction,
            r.bucket,
            r.lambda,
            r.k,
            fmt_metrics(&r.metrics)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: u32) -> EntityId {
        EntityId(i)
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let mem = vec![0.1, 0.2, 0.3, 0.4];
        let knn = SparseDistribution(vec![(e(2), 0.75), (e(0), 0.25)]);
        assert_eq!(interpolate(&knn, &mem, 0.0).unwrap(), mem);
        assert_eq!(interpolate(&knn, &mem, 1.0).unwrap(), vec![0.25, 0.0, 0.75, 0.0]);
        assert!(interpolate(&knn, &mem, 1.5).is_err());
        assert!(interpolate(&knn, &mem, -0.1).is_err());
    }

    #[test]
    fn interpolation_worked_example() {
        let knn = SparseDistribution(vec![(e(0), 0.7), (e(1), 0.3)]);
        let p = interpolate(&knn, &[0.2, 0.5, 0.3], 0.5).unwrap();
        for (got, want) in p.iter().zip([0.45, 0.40, 0.15]) {
            assert!((got - want).abs() <= f64::EPSILON, "{got} vs {want}");
            assert_eq!(format!("{got:.2}"), format!("{want:.2}"));
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_is_affine_in_lambda() {
        let mem = vec![0.5, 0.3, 0.2];
        let knn = SparseDistribution(vec![(e(1), 1.0)]);
        let a = interpolate(&knn, &mem, 0.25).unwrap();
        let b = interpolate(&knn, &mem, 0.75).unwrap();
        let mid = interpolate(&knn, &mem, 0.5).unwrap();
        for i in 0..3 {
            assert!(((a[i] + b[i]) / 2.0 - mid[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn rank_rules() {
        assert_eq!(rank_entities(&[0.1, 0.6, 0.3], e(1), &[]).unwrap(), 1.0);
        assert_eq!(rank_entities(&[0.3, 0.3, 0.3, 0.1], e(1), &[]).unwrap(), 2.0);
        assert_eq!(rank_entities(&[0.5, 0.3, 0.2], e(1), &[]).unwrap(), 2.0);
        assert_eq!(rank_entities(&[0.5, 0.3, 0.2], e(1), &[e(0)]).unwrap(), 1.0);
        assert!(rank_entities(&[0.5, 0.3, 0.2], e(1), &[e(1)]).is_err());
        assert!(rank_entities(&[0.5], e(3), &[]).is_err());
    }

    #[test]
    fn metrics_from_ranks() {
        let m = Metrics::from_ranks(&[1.0, 2.0, 4.0, 12.0]).unwrap();
        assert_eq!(m.count, 4);
        assert_eq!(m.hits1, 0.25);
        assert_eq!(m.hits3, 0.5);
        assert_eq!(m.hits10, 0.75);
        assert_eq!(m.mr, 19.0 / 4.0);
        assert_eq!(m.mrr, (1.0 + 0.5 + 0.25 + 1.0 / 12.0) / 4.0);
        assert!(Metrics::from_ranks(&[]).is_none());
    }

    #[test]
    fn filter_index_excludes_gold_only() {
        let t = |h, r, tl| Triple::new(e(h), RelationId(r), e(tl));
        let split = DatasetSplit {
            train: vec![t(0, 0, 1), t(0, 0, 2)],
            valid: vec![t(3, 0, 2)],
            test: vec![t(0, 0, 3)],
            mode: crate::graph::SplitMode::Transductive,
            held_out: vec![],
        };
        let f = FilterIndex::new(&split);
        assert_eq!(f.others(&t(0, 0, 3), Direction::Tail), [e(1), e(2)]);
        assert_eq!(f.others(&t(0, 0, 2), Direction::Head), [e(3)]);
        assert!(f.others(&t(5, 0, 2), Direction::Tail).is_empty());
    }

    #[test]
    fn bucket_partition_and_empty_buckets() {
        let freq = FrequencyTable {
            counts: vec![0, 3, 30],
            boundaries: vec![0, 5, 20, 100],
        };
        let r = |gold, rank| RankingResult {
            triple: Triple::new(e(0), RelationId(0), e(gold)),
            direction: Direction::Tail,
            gold: e(gold),
            rank,
            filtered: true,
        };
        let rows = bucket_report(&[r(0, 1.0), r(1, 2.0), r(2, 1.0)], &freq);
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].metrics.unwrap().count, 2);
        assert!(rows[1].metrics.is_none());
        assert_eq!(rows[2].metrics.unwrap().count, 1);
        assert!(rows[3].metrics.is_none());
        let total: usize = rows.iter().filter_map(|b| b.metrics).map(|m| m.count).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn table_marks_empty_cells() {
        let rec = MetricsRecord {
            direction: "both".into(),
            bucket: "[0,5)".into(),
            lambda: 0.2,
            k: 64,
            metrics: None,
        };
        let t = render_table(&[rec]);
        assert!(t.lines().nth(1).unwrap().contains(" - "));
    }
}
