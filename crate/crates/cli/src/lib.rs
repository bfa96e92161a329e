//! Command-line driver: ingestion, training, store construction,
//! evaluation, sweeps and reports as seeded, reproducible runs.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::json;

use knnkge_core::dataset::{load_dataset, save_dataset, write_atomic, SplitCounts, SplitMeta};
use knnkge_core::encoder::{train_expansion, train_mem, EncoderModel, EpochLog};
use knnkge_core::eval::{
    bucket_records, evaluate, explain_query, render_table, sweep, EvalContext, MetricsRecord,
    MetricsReport, Query,
};
use knnkge_core::graph::{
    entity_frequency, load_graph, load_split_dir, make_split, subsample_training, DatasetSplit,
    KnowledgeGraph,
};
use knnkge_core::pipeline::{init_model, train_all};
use knnkge_core::store::{dedupe_per_entity, KnowledgeStore, Provenance};
use knnkge_core::text::Vocabulary;
use knnkge_core::toy;

pub use config::RunConfig;

const COMMANDS: &[(&str, &str)] = &[
    ("gen-toy", "Write the synthetic toy graph (triples and descriptions)"),
    ("ingest", "Load a graph, split it and persist the dataset"),
    ("train", "Run entity expansion, then masked entity modeling"),
    ("build-store", "Encode descriptions and train triples into the knowledge store"),
    ("eval", "Evaluate link prediction on the test split"),
    ("sweep", "Evaluate a grid of lambda and k values"),
    ("bucket", "Evaluate per train-frequency bucket of the gold entity"),
    ("explain", "Show MEM, kNN and interpolated top entities for one query"),
    ("subsample-eval", "Retrain on subsampled training data and evaluate each"),
    ("dump-embeddings", "Dump a query anchor and its nearest store keys"),
];

fn key_args() -> Vec<Arg> {
    config::KEYS
        .iter()
        .map(|k| {
            let mut arg = Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .help(format!("{} [default: {}]", k.help, k.default))
                .help_heading("Config keys");
            if let Some(alias) = k.alias {
                arg = arg.visible_alias(alias);
            }
            arg
        })
        .collect()
}

pub fn command() -> Command {
    let mut cmd = Command::new("knnkge")
        .about("Semi-parametric knowledge graph completion with a kNN knowledge store")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about) in COMMANDS {
        let mut sub = Command::new(name)
            .about(about)
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .help("Flat key=value config file; flags override its values"),
            )
            .args(key_args());
        match name {
            "train" => {
                sub = sub
                    .arg(
                        Arg::new("stage")
                            .long("stage")
                            .value_parser(["all", "expansion", "mem"])
                            .default_value("all")
                            .help("Which training stage(s) to run"),
                    )
                    .arg(
                        Arg::new("skip-expansion")
                            .long("skip-expansion")
                            .action(ArgAction::SetTrue)
                            .help("Run the MEM stage from a fresh model without entity expansion"),
                    );
            }
            "eval" | "bucket" => {
                sub = sub.arg(
                    Arg::new("no-store")
                        .long("no-store")
                        .action(ArgAction::SetTrue)
                        .help("Evaluate the encoder alone (forces lambda to 0)"),
                );
            }
            _ => {}
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Defaults, then `--config`, then explicit flags.
pub fn resolve_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        c.merge_file(Path::new(path))?;
    }
    for k in config::KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            c.set(k.name, v)?;
        }
    }
    Ok(c)
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = command().try_get_matches_from(args)?;
    let (name, m) = matches.subcommand().expect("subcommand is required");
    let mut cfg = resolve_config(m)?;
    match name {
        "gen-toy" => cmd_gen_toy(&cfg, out),
        "ingest" => cmd_ingest(&cfg, out),
        "train" => cmd_train(
            &cfg,
            m.get_one::<String>("stage").map(String::as_str).unwrap_or("all"),
            m.get_flag("skip-expansion"),
            out,
        ),
        "build-store" => cmd_build_store(&cfg, out),
        "eval" | "bucket" => {
            let no_store = m.get_flag("no-store");
            if no_store {
                cfg.set("eval.lambda", "0")?;
            }
            cmd_eval(&cfg, no_store, name == "bucket", out)
        }
        "sweep" => cmd_sweep(&cfg, out),
        "explain" => cmd_explain(&cfg, out),
        "subsample-eval" => cmd_subsample_eval(&cfg, out),
        "dump-embeddings" => cmd_dump_embeddings(&cfg, out),
        other => bail!("unknown command `{other}`"),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn write_file(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    ensure_parent(path)?;
    write_atomic(path, fill)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_file(path, |w| w.write_all(text.as_bytes()))
}

fn cmd_gen_toy(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let toy_cfg = cfg.toy_config()?;
    let graph = toy::generate(&toy_cfg)?;
    let dir = cfg.path("toy.out");
    let mut triples = String::new();
    for t in graph.triples() {
        triples.push_str(&format!(
            "{}\t{}\t{}\n",
            graph.entity_label(t.head),
            graph.relation_label(t.relation),
            graph.entity_label(t.tail)
        ));
    }
    let mut descs = String::new();
    for e in graph.entities() {
        descs.push_str(&format!("{}\t{}\n", graph.entity_label(e), graph.description(e)));
    }
    write_file(&dir.join("triples.tsv"), |w| w.write_all(triples.as_bytes()))?;
    write_file(&dir.join("descriptions.tsv"), |w| w.write_all(descs.as_bytes()))?;
    writeln!(out, "{graph} (toy seed {})", toy_cfg.seed)?;
    writeln!(out, "wrote {}", dir.display())?;
    Ok(())
}

fn cmd_ingest(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let desc = cfg.path("data.descriptions");
    let split_dir = cfg.raw("data.split_dir");
    let (graph, split, seed, fractions) = if split_dir.is_empty() {
        let graph = load_graph(&cfg.path("data.triples"), &desc)?;
        let fractions = cfg.split_fractions()?;
        let seed = cfg.seed()?;
        let split = make_split(&graph, fractions, cfg.split_mode()?, seed)?;
        (graph, split, Some(seed), Some(fractions))
    } else {
        let (graph, split) = load_split_dir(Path::new(split_dir), &desc)?;
        (graph, split, None, None)
    };
    let meta = SplitMeta {
        mode: split.mode,
        seed,
        fractions,
        held_out: split
            .held_out
            .iter()
            .map(|&e| graph.entity_label(e).to_string())
            .collect(),
        counts: SplitCounts::of(&graph, &split),
    };
    let dir = cfg.path("data.dir");
    save_dataset(&dir, &graph, &split, &meta)?;
    let w = graph.warnings();
    writeln!(out, "{graph}")?;
    writeln!(
        out,
        "split: mode={} train={} valid={} test={} held_out={}",
        split.mode,
        split.train.len(),
        split.valid.len(),
        split.test.len(),
        split.held_out.len()
    )?;
    writeln!(
        out,
        "warnings: {} entities without description, {} duplicate triples",
        w.missing_descriptions, w.duplicate_triples
    )?;
    writeln!(out, "wrote {}", dir.display())?;
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<(KnowledgeGraph, DatasetSplit)> {
    let dir = cfg.path("data.dir");
    let (g, s, _) = load_dataset(&dir)
        .with_context(|| format!("loading dataset {} (run `ingest` first)", dir.display()))?;
    Ok((g, s))
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    let path = cfg.path("paths.vocab");
    let f = fs::File::open(&path).with_context(|| format!("opening vocabulary {}", path.display()))?;
    Ok(Vocabulary::read_from(
        std::io::BufReader::new(f),
        cfg.get("model.max_len")?,
    )?)
}

fn load_model(path: &Path) -> Result<EncoderModel> {
    let f = fs::File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    EncoderModel::load(std::io::BufReader::new(f))
        .with_context(|| format!("reading checkpoint {}", path.display()))
}

fn check_compat(graph: &KnowledgeGraph, vocab: &Vocabulary, model: &EncoderModel) -> Result<()> {
    let c = model.config();
    let offset = vocab.entity_offset().map(|o| o as usize);
    if vocab.len() != c.vocab_size
        || offset != Some(c.entity_offset)
        || c.num_entities != graph.num_entities()
        || c.max_len != vocab.max_len()
    {
        return Err(knnkge_core::Error::Config(format!(
            "checkpoint (vocab {}, entity offset {}, {} entities, max_len {}) does not match \
             vocabulary (size {}, entity offset {:?}, max_len {}) and graph ({} entities)",
            c.vocab_size,
            c.entity_offset,
            c.num_entities,
            c.max_len,
            vocab.len(),
            offset,
            vocab.max_len(),
            graph.num_entities()
        ))
        .into());
    }
    Ok(())
}

fn save_model(path: &Path, model: &EncoderModel) -> Result<()> {
    write_file(path, |w| model.save(w))
}

fn write_log(cfg: &RunConfig, logs: &[EpochLog], out: &mut dyn Write) -> Result<()> {
    let mut text = format!("# seed={}\nstage\tepoch\tloss\n", cfg.seed()?);
    for l in logs {
        let stage = serde_json::to_value(l.stage)?;
        text.push_str(&format!(
            "{}\t{}\t{:?}\n",
            stage.as_str().unwrap_or("?"),
            l.epoch,
            l.loss
        ));
    }
    out.write_all(text.as_bytes())?;
    write_file(&cfg.path("paths.log"), |w| w.write_all(text.as_bytes()))
}

fn cmd_train(cfg: &RunConfig, stage: &str, skip_expansion: bool, out: &mut dyn Write) -> Result<()> {
    let (graph, split) = load_data(cfg)?;
    let settings = cfg.model_settings()?;
    let seed = cfg.seed()?;
    let vocab_path = cfg.path("paths.vocab");
    let exp_path = cfg.path("paths.expansion");
    let final_path = cfg.path("paths.checkpoint");
    let mut logs = Vec::new();

    let (vocab, mut model) = if stage == "mem" && !skip_expansion {
        if !exp_path.exists() {
            bail!(
                "no expansion checkpoint at {}; run `train --stage expansion` first \
                 or pass --skip-expansion",
                exp_path.display()
            );
        }
        let vocab = load_vocab(cfg)?;
        let model = load_model(&exp_path)?;
        check_compat(&graph, &vocab, &model)?;
        (vocab, model)
    } else {
        let (vocab, mut model) = init_model(&graph, &split, &settings, seed)?;
        write_file(&vocab_path, |w| vocab.write_to(w))?;
        if !skip_expansion {
            logs.extend(train_expansion(&mut model, &graph, &vocab, &cfg.expansion_config()?)?);
            save_model(&exp_path, &model)?;
            writeln!(out, "wrote {}", exp_path.display())?;
        }
        (vocab, model)
    };
    if stage != "expansion" {
        logs.extend(train_mem(&mut model, &graph, &vocab, &split, &cfg.mem_config()?)?);
        save_model(&final_path, &model)?;
        writeln!(out, "wrote {}", final_path.display())?;
    }
    write_log(cfg, &logs, out)
}

fn load_trained(cfg: &RunConfig) -> Result<(KnowledgeGraph, DatasetSplit, Vocabulary, EncoderModel)> {
    let (graph, split) = load_data(cfg)?;
    let vocab = load_vocab(cfg)?;
    let model = load_model(&cfg.path("paths.checkpoint"))?;
    check_compat(&graph, &vocab, &model)?;
    Ok((graph, split, vocab, model))
}

fn save_store(cfg: &RunConfig, store: &KnowledgeStore) -> Result<()> {
    let path = cfg.path("paths.store");
    match cfg.raw("store.format") {
        "binary" => write_file(&path, |w| store.save(w)),
        "text" => write_file(&path, |w| store.save_text(w)),
        other => bail!("unknown store.format `{other}` (expected binary or text)"),
    }
}

fn load_store(cfg: &RunConfig) -> Result<KnowledgeStore> {
    let path = cfg.path("paths.store");
    let f = fs::File::open(&path).with_context(|| format!("opening store {}", path.display()))?;
    KnowledgeStore::load(std::io::BufReader::new(f))
        .with_context(|| format!("reading store {}", path.display()))
}

fn cmd_build_store(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (graph, split, vocab, model) = load_trained(cfg)?;
    let (store, skipped) = KnowledgeStore::build(&model, &graph, &vocab, &split, cfg.store_sources()?)?;
    save_store(cfg, &store)?;
    writeln!(
        out,
        "{} description entries, {} triple entries",
        store.count(Provenance::Description),
        store.count(Provenance::Triple)
    )?;
    if skipped > 0 && cfg.store_sources()?.descriptions {
        writeln!(out, "warning: {skipped} entities without description skipped")?;
    }
    writeln!(out, "wrote {}", cfg.path("paths.store").display())?;
    Ok(())
}

fn report(cfg: &RunConfig, command: &str, body: serde_json::Value) -> Result<serde_json::Value> {
    let mut v = json!({
        "command": command,
        "seed": cfg.seed()?,
        "config": cfg.to_json(),
    });
    if let (Some(obj), serde_json::Value::Object(extra)) = (v.as_object_mut(), body) {
        obj.extend(extra);
    }
    Ok(v)
}

fn report_records(
    report: &MetricsReport,
    graph: &KnowledgeGraph,
    split: &DatasetSplit,
    cfg: &RunConfig,
    with_buckets: bool,
) -> Result<Vec<MetricsRecord>> {
    let mut records = report.records();
    if with_buckets {
        let freq = entity_frequency(split, graph.num_entities(), &cfg.list::<u64>("eval.buckets")?)?;
        records.extend(bucket_records(report, &freq));
    }
    Ok(records)
}

fn cmd_eval(cfg: &RunConfig, no_store: bool, buckets_only: bool, out: &mut dyn Write) -> Result<()> {
    let (graph, split, vocab, model) = load_trained(cfg)?;
    let eval_cfg = cfg.eval_config()?;
    let store = if no_store || eval_cfg.lambda == 0.0 {
        None
    } else {
        Some(load_store(cfg)?)
    };
    let ctx = EvalContext {
        model: &model,
        store: store.as_ref(),
        graph: &graph,
        vocab: &vocab,
        split: &split,
    };
    let rep = evaluate(&ctx, &eval_cfg)?;
    let mut records = report_records(&rep, &graph, &split, cfg, true)?;
    if buckets_only {
        records.retain(|r| r.bucket != "all" || r.direction == "both");
    }
    out.write_all(render_table(&records).as_bytes())?;
    let name = if buckets_only { "bucket" } else { "eval" };
    write_json(
        &cfg.path("paths.report"),
        &report(cfg, name, json!({ "records": records }))?,
    )
}

fn cmd_sweep(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (graph, split, vocab, model) = load_trained(cfg)?;
    let lambdas: Vec<f64> = cfg.list("sweep.lambdas")?;
    let ks: Vec<usize> = cfg.list("sweep.ks")?;
    let store = if lambdas.iter().any(|&l| l > 0.0) {
        Some(load_store(cfg)?)
    } else {
        None
    };
    let ctx = EvalContext {
        model: &model,
        store: store.as_ref(),
        graph: &graph,
        vocab: &vocab,
        split: &split,
    };
    let grid = sweep(&ctx, &cfg.eval_config()?, &lambdas, &ks)?;
    let records: Vec<MetricsRecord> = grid.iter().flat_map(|r| r.records()).collect();
    let both: Vec<MetricsRecord> = records
        .iter()
        .filter(|r| r.direction == "both")
        .cloned()
        .collect();
    out.write_all(render_table(&both).as_bytes())?;
    writeln!(out, "{} cells", grid.len())?;
    write_json(
        &cfg.path("paths.report"),
        &report(
            cfg,
            "sweep",
            json!({ "lambdas": lambdas, "ks": ks, "cells": grid.len(), "records": records }),
        )?,
    )
}

fn cmd_explain(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (graph, split, vocab, model) = load_trained(cfg)?;
    let store = load_store(cfg)?;
    let text = cfg.raw("explain.query");
    if text.is_empty() {
        bail!("explain needs --explain.query `head|relation|?` or `?|relation|tail`");
    }
    let query = Query::parse(&graph, text)?;
    let gold = match cfg.raw("explain.gold") {
        "" => None,
        l => Some(graph.entity_id(l).ok_or_else(|| knnkge_core::Error::Lookup {
            kind: "entity",
            label: l.into(),
        })?),
    };
    let ctx = EvalContext {
        model: &model,
        store: Some(&store),
        graph: &graph,
        vocab: &vocab,
        split: &split,
    };
    let ex = explain_query(&ctx, &query, gold, &cfg.eval_config()?, cfg.get("explain.top_n")?)?;
    writeln!(out, "query: {}", ex.query)?;
    if let (Some(g), Some(rank)) = (&ex.gold, ex.gold_rank) {
        writeln!(out, "gold: {} p={:.4} rank={}", g.label, g.probability, rank)?;
    }
    for (name, list) in [("MEM", &ex.mem), ("kNN", &ex.knn), ("interpolated", &ex.interpolated)] {
        let items: Vec<String> = list
            .iter()
            .map(|s| format!("{} {:.3}", s.label, s.probability))
            .collect();
        writeln!(out, "{name:>12}: {}", items.join(", "))?;
    }
    writeln!(out, "neighbors:")?;
    for n in &ex.neighbors {
        writeln!(out, "  {:<16} {:>9.4} {} #{}", n.label, n.distance, n.provenance, n.entry)?;
    }
    write_json(
        &cfg.path("paths.report"),
        &report(cfg, "explain", json!({ "explanation": ex }))?,
    )
}

fn cmd_subsample_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (graph, split) = load_data(cfg)?;
    let fractions: Vec<f64> = cfg.list("subsample.fractions")?;
    if fractions.is_empty() {
        bail!("subsample.fractions is empty");
    }
    let seed = cfg.seed()?;
    let eval_cfg = cfg.eval_config()?;
    let mut reports = Vec::new();
    for &f in &fractions {
        let sub = subsample_training(&split, f, seed)?;
        let trained = train_all(
            &graph,
            &sub,
            &cfg.model_settings()?,
            &cfg.expansion_config()?,
            &cfg.mem_config()?,
            seed,
        )?;
        let (store, _) = KnowledgeStore::build(
            &trained.model,
            &graph,
            &trained.vocab,
            &sub,
            cfg.store_sources()?,
        )?;
        // rank against the full split so dropped train facts stay filtered
        let ctx = EvalContext {
            model: &trained.model,
            store: Some(&store),
            graph: &graph,
            vocab: &trained.vocab,
            split: &split,
        };
        let rep = evaluate(&ctx, &eval_cfg)?;
        let records = rep.records();
        writeln!(out, "fraction {f} ({} train triples)", sub.train.len())?;
        out.write_all(render_table(&records[..1]).as_bytes())?;
        reports.push(json!({
            "fraction": f,
            "train_triples": sub.train.len(),
            "records": records,
        }));
    }
    write_json(
        &cfg.path("paths.report"),
        &report(cfg, "subsample-eval", json!({ "reports": reports }))?,
    )
}

fn fmt_vector(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

fn cmd_dump_embeddings(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (graph, _split, vocab, model) = load_trained(cfg)?;
    let store = load_store(cfg)?;
    let text = cfg.raw("explain.query");
    if text.is_empty() {
        bail!("dump-embeddings needs --explain.query `head|relation|?` or `?|relation|tail`");
    }
    let query = Query::parse(&graph, text)?;
    let k: usize = cfg.get("dump.k")?;
    if k == 0 {
        bail!("dump.k must be at least 1");
    }
    let seq = knnkge_core::eval::build_query(&graph, &vocab, &query)?;
    let anchor = model.encode(&seq)?.vector;
    // widen the search until k distinct entities are found
    let mut width = k;
    let neighbors = loop {
        let hits = dedupe_per_entity(&store.knn_search(&anchor, width)?);
        if hits.len() >= k || width >= store.len() {
            break hits.into_iter().take(k).collect::<Vec<_>>();
        }
        width = (width * 2).min(store.len());
    };
    let mut s = format!(
        "# query={} k={} seed={}\n",
        vocab.render(&seq),
        k,
        cfg.seed()?
    );
    s.push_str("# kind\tlabel\tdistance\tprovenance\tentry\tvector\n");
    s.push_str(&format!("anchor\t?\t0\t-\t-\t{}\n", fmt_vector(&anchor)));
    for n in &neighbors {
        let e = &store.entries()[n.entry];
        s.push_str(&format!(
            "neighbor\t{}\t{:?}\t{}\t{}\t{}\n",
            graph.entity_label(n.entity),
            n.distance,
            e.provenance(),
            n.entry,
            fmt_vector(&e.key)
        ));
    }
    let path = cfg.path("paths.dump");
    write_file(&path, |w| w.write_all(s.as_bytes()))?;
    writeln!(out, "{} rows written to {}", neighbors.len() + 1, path.display())?;
    Ok(())
}
