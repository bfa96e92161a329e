//! On-disk dataset directory: the graph with its id order plus one split.
//!
//! Layout: `entities.tsv` (label, description; in id order),
//! `relations.txt` (labels in id order), `triples.txt` (every triple in
//! graph order), `train.txt` / `valid.txt` / `test.txt` and `split.json`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DatasetSplit, EntityId, GraphBuilder, KnowledgeGraph, SplitMode, Triple};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub mode: SplitMode,
    /// Seed and fractions of a generated split; absent for pre-made splits.
    pub seed: Option<u64>,
    pub fractions: Option<(f64, f64, f64)>,
    pub held_out: Vec<String>,
    pub counts: SplitCounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub missing_descriptions: usize,
    pub duplicate_triples: usize,
}

impl SplitCounts {
    pub fn of(graph: &KnowledgeGraph, split: &DatasetSplit) -> Self {
        SplitCounts {
            entities: graph.num_entities(),
            relations: graph.num_relations(),
            triples: graph.triples().len(),
            train: split.train.len(),
            valid: split.valid.len(),
            test: split.test.len(),
            missing_descriptions: graph.warnings().missing_descriptions,
            duplicate_triples: graph.warnings().duplicate_triples,
        }
    }
}

/// Writes `path` through a temporary file in the same directory, renamed
/// into place only after `fill` succeeds.
pub fn write_atomic(
    path: &Path,
    fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn triples_text(graph: &KnowledgeGraph, triples: &[Triple]) -> String {
    let mut s = String::new();
    for t in triples {
        let _ = writeln!(
            s,
            "{}\t{}\t{}",
            graph.entity_label(t.head),
            graph.relation_label(t.relation),
            graph.entity_label(t.tail)
        );
    }
    s
}

fn write_string(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

pub fn save_dataset(dir: &Path, graph: &KnowledgeGraph, split: &DatasetSplit, meta: &SplitMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entities = String::new();
    for e in graph.entities() {
        let _ = writeln!(entities, "{}\t{}", graph.entity_label(e), graph.description(e));
    }
    write_string(&dir.join("entities.tsv"), &entities)?;
    let mut relations = String::new();
    for r in graph.relation_labels() {
        let _ = writeln!(relations, "{r}");
    }
    write_string(&dir.join("relations.txt"), &relations)?;
    write_string(&dir.join("triples.txt"), &triples_text(graph, graph.triples()))?;
    write_string(&dir.join("train.txt"), &triples_text(graph, &split.train))?;
    write_string(&dir.join("valid.txt"), &triples_text(graph, &split.valid))?;
    write_string(&dir.join("test.txt"), &triples_text(graph, &split.test))?;
    let json = serde_json::to_string_pretty(meta).expect("split metadata serializes");
    write_string(&dir.join("split.json"), &(json + "\n"))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_triples(path: &Path, graph: &KnowledgeGraph) -> Result<Vec<Triple>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(parse_err(path, i + 1, "expected 3 tab-separated columns"));
        }
        let ent = |l: &str| {
            graph
                .entity_id(l)
                .ok_or_else(|| parse_err(path, i + 1, format!("unknown entity `{l}`")))
        };
        let rel = graph
            .relation_id(f[1])
            .ok_or_else(|| parse_err(path, i + 1, format!("unknown relation `{}`", f[1])))?;
        out.push(Triple::new(ent(f[0])?, rel, ent(f[2])?));
    }
    Ok(out)
}

/// Reads a directory written by [`save_dataset`], reproducing entity and
/// relation ids exactly.
pub fn load_dataset(dir: &Path) -> Result<(KnowledgeGraph, DatasetSplit, SplitMeta)> {
    let mut b = GraphBuilder::new();
    let ent_path = dir.join("entities.tsv");
    for (i, line) in read(&ent_path)?.lines().enumerate() {
        let (label, desc) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(&ent_path, i + 1, "expected `label<TAB>description`"))?;
        if b.entity(label).index() != i {
            return Err(parse_err(&ent_path, i + 1, format!("duplicate entity `{label}`")));
        }
        if !desc.is_empty() {
            b.describe(label, desc);
        }
    }
    let rel_path = dir.join("relations.txt");
    for (i, label) in read(&rel_path)?.lines().enumerate() {
        if b.relation(label).index() != i {
            return Err(parse_err(&rel_path, i + 1, format!("duplicate relation `{label}`")));
        }
    }
    let tri_path = dir.join("triples.txt");
    for (i, line) in read(&tri_path)?.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(parse_err(&tri_path, i + 1, "expected 3 tab-separated columns"));
        }
        b.add_triple(f[0], f[1], f[2]);
    }
    let mut graph = b.build()?;
    let meta_path = dir.join("split.json");
    let meta: SplitMeta = serde_json::from_str(&read(&meta_path)?)
        .map_err(|e| parse_err(&meta_path, e.line(), e.to_string()))?;
    // Restore the warning tallies of the original ingest.
    graph.set_warnings(crate::graph::LoadWarnings {
        missing_descriptions: meta.counts.missing_descriptions,
        duplicate_triples: meta.counts.duplicate_triples,
    });
    let held_out = meta
        .held_out
        .iter()
        .map(|l| {
            graph.entity_id(l).ok_or_else(|| Error::Lookup {
                kind: "entity",
                label: l.clone(),
            })
        })
        .collect::<Result<Vec<EntityId>>>()?;
    let split = DatasetSplit {
        train: read_triples(&dir.join("train.txt"), &graph)?,
        valid: read_triples(&dir.join("valid.txt"), &graph)?,
        test: read_triples(&dir.join("test.txt"), &graph)?,
        mode: meta.mode,
        held_out,
    };
    Ok((graph, split, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::make_split;
    use crate::toy::{generate, ToyConfig};

    #[test]
    fn dataset_round_trip() {
        let g = generate(&ToyConfig::default()).unwrap();
        let split = make_split(&g, (0.8, 0.1, 0.1), SplitMode::Inductive, 3).unwrap();
        let meta = SplitMeta {
            mode: split.mode,
            seed: Some(3),
            fractions: Some((0.8, 0.1, 0.1)),
            held_out: split
                .held_out
                .iter()
                .map(|&e| g.entity_label(e).to_string())
                .collect(),
            counts: SplitCounts::of(&g, &split),
        };
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &g, &split, &meta).unwrap();
        let (g2, s2, m2) = load_dataset(dir.path()).unwrap();
        assert_eq!(g2, g);
        assert_eq!(s2, split);
        assert_eq!(m2, meta);
    }

    #[test]
    fn atomic_write_leaves_nothing_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        let r = write_atomic(&path, |w| {
            w.write_all(b"partial")?;
            Err(std::io::Error::other("boom"))
        });
        assert!(r.is_err());
        assert!(!path.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn missing_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("entities.tsv"), "{err}");
    }
}
