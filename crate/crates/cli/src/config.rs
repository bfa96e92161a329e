//! Flat `key=value` run configuration with built-in defaults, an optional
//! config file and command-line overrides, applied in that order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use knnkge_core::encoder::{Optimizer, Stage, TrainConfig};
use knnkge_core::eval::{Direction, EvalConfig};
use knnkge_core::graph::SplitMode;
use knnkge_core::pipeline::ModelSettings;
use knnkge_core::store::StoreSources;
use knnkge_core::toy::ToyConfig;

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    /// Short flag spelling accepted in addition to `--<name>`.
    pub alias: Option<&'static str>,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
        alias: None,
    }
}

const fn aliased(name: &'static str, alias: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
        alias: Some(alias),
    }
}

pub const KEYS: &[Key] = &[
    key("seed", "0", "Seed for splits, initialization, shuffling and subsampling"),
    key("data.triples", "data/toy/triples.tsv", "Triples file (head<TAB>relation<TAB>tail)"),
    key("data.descriptions", "data/toy/descriptions.tsv", "Descriptions file (entity<TAB>text)"),
    key("data.split_dir", "", "Directory with train.txt/valid.txt/test.txt; empty to generate a split"),
    key("data.dir", "work/dataset", "Ingested dataset directory"),
    aliased("split.mode", "mode", "transductive", "Split mode: transductive or inductive"),
    key("split.fractions", "0.8,0.1,0.1", "Train, valid and test fractions"),
    key("model.dim", "32", "Hidden size"),
    key("model.layers", "2", "Transformer layers"),
    key("model.heads", "2", "Attention heads"),
    key("model.max_len", "32", "Maximum input length in tokens"),
    key("model.min_freq", "1", "Minimum word count for the vocabulary"),
    key("train.expansion.lr", "0.1", "Entity expansion learning rate"),
    key("train.expansion.epochs", "200", "Entity expansion epochs"),
    key("train.expansion.batch_size", "0", "Entity expansion batch size (0 = full batch)"),
    key("train.expansion.optimizer", "sgd", "Entity expansion optimizer: sgd or adam"),
    key("train.mem.lr", "0.002", "Masked entity modeling learning rate"),
    key("train.mem.epochs", "20", "Masked entity modeling epochs"),
    key("train.mem.batch_size", "32", "Masked entity modeling batch size (0 = full batch)"),
    key("train.mem.optimizer", "adam", "Masked entity modeling optimizer: sgd or adam"),
    key("train.mem.descriptions", "true", "Also train the MEM stage on description inputs"),
    key("paths.vocab", "work/vocab.txt", "Vocabulary file"),
    key("paths.expansion", "work/expansion.ckpt", "Checkpoint after entity expansion"),
    key("paths.checkpoint", "work/model.ckpt", "Final model checkpoint"),
    key("paths.log", "work/train_log.tsv", "Per-epoch training loss log"),
    key("paths.store", "work/store.bin", "Knowledge store file"),
    key("paths.report", "work/report.json", "Report output"),
    key("paths.dump", "work/embeddings.tsv", "Embedding dump output"),
    aliased("store.sources", "sources", "descriptions,triples", "Store entry sources: descriptions, triples or both"),
    key("store.format", "binary", "Store file format: binary or text"),
    aliased("eval.lambda", "lambda", "0.2", "Interpolation weight of the kNN distribution"),
    aliased("eval.k", "k", "64", "Neighbors retrieved per query"),
    key("eval.filtered", "true", "Filter other known answers when ranking"),
    key("eval.directions", "head,tail", "Prediction directions"),
    key("eval.temperature", "1", "Divisor of negative distances in the kNN distribution"),
    key("eval.buckets", "0,5,20", "Lower bounds of train-frequency buckets"),
    aliased("sweep.lambdas", "lambdas", "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1", "Lambda grid"),
    aliased("sweep.ks", "ks", "1,2,4,8,16,32,64", "k grid"),
    aliased("subsample.fractions", "fractions", "0.3,0.5,0.7,1", "Training fractions"),
    aliased("explain.query", "query", "", "Query `head|relation|?` or `?|relation|tail`"),
    key("explain.gold", "", "Optional gold entity label for the explained query"),
    key("explain.top_n", "5", "Entities listed per distribution"),
    key("dump.k", "20", "Distinct neighbor entities to dump"),
    key("toy.out", "data/toy", "Output directory of gen-toy"),
    key("toy.seed", "17", "Seed of the synthetic graph"),
    key("toy.entities_per_type", "50", "Entities per type"),
    key("toy.facts_per_pair", "170", "Distinct facts per relation pair"),
    key("toy.mirror_prob", "0.8", "Chance a fact is stated under both relations of its pair"),
    key("toy.zipf_exponent", "1.2", "Exponent of the popularity weights"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|k| (k.name.to_string(), k.default.to_string()))
                .collect(),
        }
    }
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow!("{key}: bad list item `{s}`: {e}")))
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => bail!("unknown config key `{key}`"),
        }
    }

    /// Applies a flat `key = value` file; `#` starts a comment line.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), i + 1))?;
            self.set(k.trim(), v)
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key `{key}` is not declared"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| anyhow!("config key `{key}`: bad value `{raw}`: {e}"))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        parse_list(key, self.raw(key))
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.raw(key))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    /// Every resolved key, sorted, for embedding in reports.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.values).expect("string map serializes")
    }

    pub fn split_fractions(&self) -> Result<(f64, f64, f64)> {
        match self.list::<f64>("split.fractions")?[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => bail!("split.fractions needs three values"),
        }
    }

    pub fn split_mode(&self) -> Result<SplitMode> {
        self.get("split.mode")
    }

    pub fn model_settings(&self) -> Result<ModelSettings> {
        Ok(ModelSettings {
            dim: self.get("model.dim")?,
            layers: self.get("model.layers")?,
            heads: self.get("model.heads")?,
            max_len: self.get("model.max_len")?,
            min_freq: self.get("model.min_freq")?,
        })
    }

    fn train_config(&self, stage: Stage, prefix: &str) -> Result<TrainConfig> {
        let k = |name: &str| format!("{prefix}.{name}");
        Ok(TrainConfig {
            stage,
            lr: self.get(&k("lr"))?,
            epochs: self.get(&k("epochs"))?,
            batch_size: self.get(&k("batch_size"))?,
            seed: self.seed()?,
            optimizer: self.get::<Optimizer>(&k("optimizer"))?,
            include_descriptions: stage == Stage::Mem && self.get("train.mem.descriptions")?,
        })
    }

    pub fn expansion_config(&self) -> Result<TrainConfig> {
        self.train_config(Stage::Expansion, "train.expansion")
    }

    pub fn mem_config(&self) -> Result<TrainConfig> {
        self.train_config(Stage::Mem, "train.mem")
    }

    pub fn store_sources(&self) -> Result<StoreSources> {
        self.get("store.sources")
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let config = EvalConfig {
            lambda: self.get("eval.lambda")?,
            k: self.get("eval.k")?,
            filtered: self.get("eval.filtered")?,
            directions: self.list::<Direction>("eval.directions")?,
            temperature: self.get("eval.temperature")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn toy_config(&self) -> Result<ToyConfig> {
        Ok(ToyConfig {
            entities_per_type: self.get("toy.entities_per_type")?,
            facts_per_pair: self.get("toy.facts_per_pair")?,
            mirror_prob: self.get("toy.mirror_prob")?,
            zipf_exponent: self.get("toy.zipf_exponent")?,
            seed: self.get("toy.seed")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let c = RunConfig::default();
        assert_eq!(c.model_settings().unwrap().dim, 32);
        assert_eq!(c.eval_config().unwrap(), EvalConfig::default());
        assert_eq!(c.mem_config().unwrap().batch_size, 32);
        assert_eq!(c.list::<f64>("sweep.lambdas").unwrap().len(), 11);
        assert_eq!(c.split_fractions().unwrap(), (0.8, 0.1, 0.1));
        assert_eq!(c.toy_config().unwrap(), ToyConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("model.dimm", "3").is_err());
        c.set("model.dim", " 16 ").unwrap();
        assert_eq!(c.raw("model.dim"), "16");
    }

    #[test]
    fn file_values_apply() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        fs::write(&p, "# comment\nmodel.dim = 16\n\neval.lambda=0.5\n").unwrap();
        let mut c = RunConfig::default();
        c.merge_file(&p).unwrap();
        assert_eq!(c.get::<usize>("model.dim").unwrap(), 16);
        assert_eq!(c.get::<f64>("eval.lambda").unwrap(), 0.5);
        fs::write(&p, "nope\n").unwrap();
        assert!(c.merge_file(&p).is_err());
    }
}
