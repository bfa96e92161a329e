use knnkge_core::encoder::TrainConfig;
use knnkge_core::eval::{evaluate, explain_query, sweep, EvalConfig, EvalContext, Query};
use knnkge_core::graph::{make_split, SplitMode};
use knnkge_core::pipeline::{train_all, ModelSettings};
use knnkge_core::store::{KnowledgeStore, Provenance, StoreSources};
use knnkge_core::toy::{generate, ToyConfig};

fn small_toy() -> knnkge_core::graph::KnowledgeGraph {
    generate(&ToyConfig {
        entities_per_type: 12,
        facts_per_pair: 20,
        ..ToyConfig::default()
    })
    .unwrap()
}

fn settings() -> ModelSettings {
    ModelSettings {
        dim: 8,
        layers: 1,
        heads: 2,
        max_len: 16,
        min_freq: 1,
    }
}

#[test]
fn train_index_and_evaluate_through_public_api() {
    let g = small_toy();
    let split = make_split(&g, (0.8, 0.1, 0.1), SplitMode::Transductive, 1).unwrap();
    let mut exp = TrainConfig::expansion_default(1);
    exp.epochs = 20;
    let mut mem = TrainConfig::mem_default(1);
    mem.epochs = 3;
    let trained = train_all(&g, &split, &settings(), &exp, &mem, 1).unwrap();
    assert_eq!(trained.logs.len(), 23);

    let (store, skipped) =
        KnowledgeStore::build(&trained.model, &g, &trained.vocab, &split, StoreSources::ALL).unwrap();
    assert_eq!(skipped, 0);
    assert_eq!(store.count(Provenance::Description), g.num_entities());
    assert_eq!(store.count(Provenance::Triple), 2 * split.train.len());

    let ctx = EvalContext {
        model: &trained.model,
        store: Some(&store),
        graph: &g,
        vocab: &trained.vocab,
        split: &split,
    };
    let report = evaluate(&ctx, &EvalConfig::default()).unwrap();
    let m = report.overall.unwrap();
    assert_eq!(m.count, 2 * split.test.len());
    assert!(m.hits1 <= m.hits3 && m.hits3 <= m.hits10);
    assert!(m.mrr > 0.0 && m.mrr <= 1.0);

    let grid = sweep(&ctx, &EvalConfig::default(), &[0.0, 0.5, 1.0], &[1, 64]).unwrap();
    assert_eq!(grid.len(), 6);
    assert_eq!(grid[3], report_at(&ctx, 0.5, 64));

    let t = split.test[0];
    let q = Query::of(&t, knnkge_core::eval::Direction::Tail);
    let ex = explain_query(&ctx, &q, Some(t.tail), &EvalConfig::default(), 3).unwrap();
    assert_eq!(ex.mem.len(), 3);
    assert!(ex.gold_rank.unwrap() >= 1.0);
}

fn report_at(ctx: &EvalContext<'_>, lambda: f64, k: usize) -> knnkge_core::eval::MetricsReport {
    evaluate(
        ctx,
        &EvalConfig {
            lambda,
            k,
            ..EvalConfig::default()
        },
    )
    .unwrap()
}

#[test]
fn store_file_round_trip_preserves_search() {
    let g = small_toy();
    let split = make_split(&g, (0.8, 0.1, 0.1), SplitMode::Inductive, 2).unwrap();
    let mut exp = TrainConfig::expansion_default(2);
    exp.epochs = 5;
    let mut mem = TrainConfig::mem_default(2);
    mem.epochs = 1;
    let trained = train_all(&g, &split, &settings(), &exp, &mem, 2).unwrap();
    let (store, _) =
        KnowledgeStore::build(&trained.model, &g, &trained.vocab, &split, StoreSources::ALL).unwrap();

    let mut bin = Vec::new();
    store.save(&mut bin).unwrap();
    let mut text = Vec::new();
    store.save_text(&mut text).unwrap();
    assert_eq!(KnowledgeStore::load(&bin[..]).unwrap(), store);
    assert_eq!(KnowledgeStore::load(&text[..]).unwrap(), store);

    let anchor = &store.entries()[0].key;
    let hits = store.knn_search(anchor, 5).unwrap();
    assert_eq!(hits[0].entry, 0);
    assert_eq!(hits[0].distance, 0.0);
}
