use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use knnkge_core::eval::{build_query, Query};
use knnkge_core::store::{dedupe_per_entity, KnowledgeStore};
use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--model.dim",
    "8",
    "--model.layers",
    "1",
    "--train.expansion.epochs",
    "3",
    "--train.mem.epochs",
    "1",
];

fn toy_file(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy").join(name);
    p.to_string_lossy().into_owned()
}

fn knnkge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_knnkge"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = knnkge(dir, args);
    assert!(
        out.status.success(),
        "knnkge {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn ingest_toy(dir: &Path, extra: &[&str]) -> String {
    let (t, d) = (toy_file("triples.tsv"), toy_file("descriptions.tsv"));
    let mut args = vec!["ingest", "--data.triples", &t, "--data.descriptions", &d];
    args.extend_from_slice(extra);
    ok(dir, &args)
}

/// Ingested, trained and indexed toy workspace shared by read-only tests.
fn trained() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        ingest_toy(dir.path(), &[]);
        ok(dir.path(), &with_small(&["train"]));
        ok(dir.path(), &with_small(&["build-store"]));
        dir
    })
    .path()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Report with its output locations blanked, for comparing runs.
fn report_body(path: PathBuf) -> serde_json::Value {
    let mut v = json(path);
    for key in ["paths.report", "paths.store"] {
        v["config"][key] = "".into();
    }
    v
}

#[test]
fn ingest_counts_plato_graph() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("t.tsv"),
        "Plato\tnationality\tGreece\nPlato\tlives\tAthens\n",
    )
    .unwrap();
    fs::write(dir.path().join("d.tsv"), "Plato\tGreek philosopher\n").unwrap();
    let out = ok(
        dir.path(),
        &["ingest", "--data.triples", "t.tsv", "--data.descriptions", "d.tsv"],
    );
    assert!(out.contains("3 entities, 2 relations, 2 triples"), "{out}");
    assert!(out.contains("2 entities without description"), "{out}");
}

#[test]
fn missing_descriptions_file_fails_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let t = toy_file("triples.tsv");
    let out = knnkge(
        dir.path(),
        &["ingest", "--data.triples", &t, "--data.descriptions", "no_such_desc.tsv"],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no_such_desc.tsv"), "{err}");
    assert!(!dir.path().join("work").exists());
}

#[test]
fn unknown_flag_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = knnkge(dir.path(), &["eval", "--model.dimm", "3"]);
    assert!(!out.status.success());
}

#[test]
fn inductive_split_summary_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["--mode", "inductive", "--seed", "7"];
    let sa = ingest_toy(a.path(), &args);
    let sb = ingest_toy(b.path(), &args);
    let strip = |s: &str| s.lines().filter(|l| !l.starts_with("wrote")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&sa), strip(&sb));
    assert!(sa.contains("held_out=20"), "{sa}");
    let meta = |d: &Path| fs::read(d.join("work/dataset/split.json")).unwrap();
    assert_eq!(meta(a.path()), meta(b.path()));
}

#[test]
fn mem_stage_requires_expansion_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    ingest_toy(dir.path(), &[]);
    let out = knnkge(dir.path(), &with_small(&["train", "--stage", "mem"]));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--skip-expansion"));
    assert!(!dir.path().join("work/model.ckpt").exists());

    ok(dir.path(), &with_small(&["train", "--stage", "expansion"]));
    assert!(dir.path().join("work/expansion.ckpt").exists());
    assert!(!dir.path().join("work/model.ckpt").exists());
    ok(dir.path(), &with_small(&["train", "--stage", "mem"]));
    assert!(dir.path().join("work/model.ckpt").exists());

    let fresh = tempfile::tempdir().unwrap();
    ingest_toy(fresh.path(), &[]);
    ok(fresh.path(), &with_small(&["train", "--stage", "mem", "--skip-expansion"]));
    assert!(!fresh.path().join("work/expansion.ckpt").exists());
    assert!(fresh.path().join("work/model.ckpt").exists());
}

#[test]
fn staged_training_matches_single_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ingest_toy(a.path(), &[]);
    ingest_toy(b.path(), &[]);
    ok(a.path(), &with_small(&["train"]));
    ok(b.path(), &with_small(&["train", "--stage", "expansion"]));
    ok(b.path(), &with_small(&["train", "--stage", "mem"]));
    let read = |d: &Path| fs::read(d.join("work/model.ckpt")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ingest_toy(d.path(), &[]);
        ok(d.path(), &with_small(&["train"]));
    }
    for f in ["vocab.txt", "expansion.ckpt", "model.ckpt", "train_log.tsv"] {
        let read = |d: &TempDir| fs::read(d.path().join("work").join(f)).unwrap();
        assert_eq!(read(&a), read(&b), "{f} differs");
    }
    let c = tempfile::tempdir().unwrap();
    ingest_toy(c.path(), &[]);
    ok(c.path(), &with_small(&["train", "--seed", "1"]));
    assert_ne!(
        fs::read(a.path().join("work/model.ckpt")).unwrap(),
        fs::read(c.path().join("work/model.ckpt")).unwrap()
    );
}

#[test]
fn loss_log_monotone_on_bundled_toy_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    ingest_toy(dir.path(), &[]);
    ok(dir.path(), &["train"]);
    let log = fs::read_to_string(dir.path().join("work/train_log.tsv")).unwrap();
    assert!(log.starts_with("# seed=0\n"));
    let losses: Vec<f64> = log
        .lines()
        .skip(2)
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 220);
    for (i, w) in losses.windows(2).enumerate() {
        assert!(w[1] <= w[0], "loss rose at row {}: {} -> {}", i + 1, w[0], w[1]);
    }
}

/// 50 described entities, 100 train triples, pre-made split files.
fn fifty_entity_split(dir: &Path) {
    let split = dir.join("split");
    fs::create_dir_all(&split).unwrap();
    let mut train = String::new();
    for i in 0..100 {
        train.push_str(&format!("e{:02}\tr{}\te{:02}\n", i % 50, i % 4, (7 * i + 3) % 50));
    }
    fs::write(split.join("train.txt"), train).unwrap();
    fs::write(split.join("valid.txt"), "e00\trv\te01\n").unwrap();
    fs::write(split.join("test.txt"), "e02\trv\te03\n").unwrap();
    let desc: String = (0..50).map(|i| format!("e{i:02}\tthing number {i}\n")).collect();
    fs::write(dir.join("d.tsv"), desc).unwrap();
}

#[test]
fn build_store_counts_by_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fifty_entity_split(p);
    ok(p, &["ingest", "--data.split_dir", "split", "--data.descriptions", "d.tsv"]);
    ok(p, &with_small(&["train"]));
    let out = ok(p, &["build-store"]);
    assert!(out.contains("50 description entries, 200 triple entries"), "{out}");
    let first = fs::read(p.join("work/store.bin")).unwrap();
    ok(p, &["build-store"]);
    assert_eq!(first, fs::read(p.join("work/store.bin")).unwrap());

    let out = ok(p, &["build-store", "--sources", "descriptions", "--paths.store", "d.bin"]);
    assert!(out.contains("50 description entries, 0 triple entries"), "{out}");
    let out = ok(p, &["build-store", "--sources", "triples", "--paths.store", "t.bin"]);
    assert!(out.contains("0 description entries, 200 triple entries"), "{out}");
}

#[test]
fn build_store_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fifty_entity_split(p);
    ok(p, &["ingest", "--data.split_dir", "split", "--data.descriptions", "d.tsv"]);
    ok(p, &with_small(&["train"]));
    // a checkpoint trained on the toy graph does not fit this vocabulary
    let ckpt = trained().join("work/model.ckpt");
    let out = knnkge(p, &["build-store", "--paths.checkpoint", ckpt.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
}

#[test]
fn text_store_evaluates_like_binary() {
    let p = trained();
    ok(p, &["build-store", "--store.format", "text", "--paths.store", "work/store.txt"]);
    let text = fs::read_to_string(p.join("work/store.txt")).unwrap();
    assert!(text.starts_with("KNNKGE-STORE v1"));
    ok(p, &["eval", "--paths.report", "work/bin.json"]);
    ok(p, &["eval", "--paths.store", "work/store.txt", "--paths.report", "work/txt.json"]);
    assert_eq!(report_body(p.join("work/bin.json")), report_body(p.join("work/txt.json")));
}

#[test]
fn lambda_zero_report_equals_no_store_report() {
    let p = trained();
    ok(p, &["eval", "--lambda", "0", "--paths.report", "work/l0.json"]);
    ok(p, &["eval", "--no-store", "--paths.report", "work/nostore.json"]);
    let v = report_body(p.join("work/l0.json"));
    assert_eq!(v, report_body(p.join("work/nostore.json")));
    assert_eq!(v["seed"], 0);
    assert_eq!(v["config"]["eval.lambda"], "0");
}

#[test]
fn no_store_runs_without_store_file() {
    let p = trained();
    ok(
        p,
        &["eval", "--no-store", "--paths.store", "missing.bin", "--paths.report", "work/ns2.json"],
    );
    let out = knnkge(p, &["eval", "--paths.store", "missing.bin", "--paths.report", "work/ns3.json"]);
    assert!(!out.status.success());
    assert!(!p.join("work/ns3.json").exists());
}

#[test]
fn sweep_emits_full_grid() {
    let p = trained();
    let out = ok(
        p,
        &[
            "sweep",
            "--lambdas",
            "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0",
            "--ks",
            "1,8,64",
            "--paths.report",
            "work/sweep.json",
        ],
    );
    assert!(out.contains("33 cells"), "{out}");
    let v = json(p.join("work/sweep.json"));
    assert_eq!(v["cells"], 33);
    let both = v["records"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["direction"] == "both")
        .count();
    assert_eq!(both, 33);
}

#[test]
fn bucket_report_covers_every_bucket() {
    let p = trained();
    ok(p, &["bucket", "--eval.buckets", "0,5,20", "--paths.report", "work/bucket.json"]);
    let v = json(p.join("work/bucket.json"));
    let buckets: Vec<&str> = v["records"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["direction"] == "both")
        .map(|r| r["bucket"].as_str().unwrap())
        .collect();
    assert_eq!(buckets, ["all", "[0,5)", "[5,20)", "[20,inf)"]);
}

#[test]
fn subsample_eval_reports_each_fraction() {
    let p = trained();
    let args = with_small(&[
        "subsample-eval",
        "--fractions",
        "0.3,0.5,0.7,1.0",
        "--paths.report",
        "work/sub.json",
    ]);
    ok(p, &args);
    let v = json(p.join("work/sub.json"));
    let reports = v["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 4);
    let sizes: Vec<u64> = reports.iter().map(|r| r["train_triples"].as_u64().unwrap()).collect();
    assert!(sizes.windows(2).all(|w| w[0] < w[1]), "{sizes:?}");
    assert_eq!(sizes[3], 974);
}

#[test]
fn explain_lists_distributions_and_neighbors() {
    let p = trained();
    let out = ok(
        p,
        &[
            "explain",
            "--query",
            "person_031|works for|?",
            "--explain.gold",
            "company_000",
            "--paths.report",
            "work/explain.json",
        ],
    );
    assert!(out.contains("gold: company_000"), "{out}");
    let v = json(p.join("work/explain.json"));
    assert_eq!(v["explanation"]["mem"].as_array().unwrap().len(), 5);
    let neighbors = v["explanation"]["neighbors"].as_array().unwrap();
    assert!(!neighbors.is_empty() && neighbors.len() <= 64);
    let d: Vec<f64> = neighbors.iter().map(|n| n["distance"].as_f64().unwrap()).collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]));

    let bad = knnkge(p, &["explain", "--query", "nobody|works for|?"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("nobody"));
}

fn dump_rows(p: &Path, k: &str, out: &str) -> Vec<Vec<String>> {
    ok(
        p,
        &["dump-embeddings", "--query", "?|works for|company_000", "--dump.k", k, "--paths.dump", out],
    );
    fs::read_to_string(p.join(out))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').map(String::from).collect())
        .collect()
}

#[test]
fn dump_embeddings_rows_match_search() {
    let p = trained();
    let rows = dump_rows(p, "20", "work/dump20.tsv");
    assert_eq!(rows.len(), 21);
    assert_eq!(rows[0][0], "anchor");
    assert_eq!(dump_rows(p, "1", "work/dump1.tsv").len(), 2);

    let (graph, _, _) = knnkge_core::dataset::load_dataset(&p.join("work/dataset")).unwrap();
    let vocab = knnkge_core::text::Vocabulary::read_from(
        std::io::BufReader::new(fs::File::open(p.join("work/vocab.txt")).unwrap()),
        32,
    )
    .unwrap();
    let model = knnkge_core::encoder::EncoderModel::load(fs::File::open(p.join("work/model.ckpt")).unwrap())
        .unwrap();
    let store = KnowledgeStore::load(fs::File::open(p.join("work/store.bin")).unwrap()).unwrap();
    let query = Query::parse(&graph, "?|works for|company_000").unwrap();
    let anchor = model.encode(&build_query(&graph, &vocab, &query).unwrap()).unwrap().vector;
    let dumped_anchor: Vec<f64> = rows[0][5].split(' ').map(|x| x.parse().unwrap()).collect();
    assert_eq!(dumped_anchor, anchor);
    let hits = dedupe_per_entity(&store.knn_search(&anchor, store.len()).unwrap());
    for (row, hit) in rows[1..].iter().zip(&hits) {
        assert_eq!(row[1], graph.entity_label(hit.entity));
        assert_eq!(row[2].parse::<f64>().unwrap(), hit.distance);
        assert_eq!(row[4].parse::<usize>().unwrap(), hit.entry);
    }
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let p = trained();
    ok(p, &["eval", "--paths.report", "work/r1.json"]);
    ok(p, &["eval", "--paths.report", "work/r2.json"]);
    let a = fs::read_to_string(p.join("work/r1.json")).unwrap();
    let b = fs::read_to_string(p.join("work/r2.json")).unwrap();
    assert_eq!(
        a.replace("work/r1.json", ""),
        b.replace("work/r2.json", "")
    );
}

#[test]
fn config_file_is_overridden_by_flags() {
    let p = trained();
    fs::write(p.join("run.conf"), "# eval settings\neval.lambda = 1\neval.k = 8\n").unwrap();
    ok(
        p,
        &["eval", "--config", "run.conf", "--k", "4", "--paths.report", "work/conf.json"],
    );
    let v = json(p.join("work/conf.json"));
    assert_eq!(v["config"]["eval.lambda"], "1");
    assert_eq!(v["config"]["eval.k"], "4");
    assert_eq!(v["records"][0]["k"], 4);
}
