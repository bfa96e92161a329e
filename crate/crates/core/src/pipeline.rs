//! End-to-end training: vocabulary, entity expansion, then masked entity
//! modeling.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    train_expansion, train_mem, EncoderConfig, EncoderModel, EpochLog, TrainConfig,
};
use crate::error::Result;
use crate::graph::{DatasetSplit, KnowledgeGraph};
use crate::text::{build_vocabulary, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub min_freq: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            dim: 64,
            layers: 2,
            heads: 2,
            max_len: 32,
            min_freq: 1,
        }
    }
}

/// Expanded vocabulary and a freshly initialized model whose MEM head covers
/// the split's train entity view.
pub fn init_model(
    graph: &KnowledgeGraph,
    split: &DatasetSplit,
    settings: &ModelSettings,
    seed: u64,
) -> Result<(Vocabulary, EncoderModel)> {
    let vocab = build_vocabulary(graph, settings.min_freq, settings.max_len)?
        .expand_entities(graph.num_entities())?;
    let config = EncoderConfig::for_vocab(&vocab, settings.dim, settings.layers, settings.heads)?;
    let model = EncoderModel::new(config, split.train_view(graph.num_entities()), seed)?;
    Ok((vocab, model))
}

pub struct Trained {
    pub vocab: Vocabulary,
    pub model: EncoderModel,
    pub logs: Vec<EpochLog>,
}

/// Initializes a model and runs both training stages in order.
pub fn train_all(
    graph: &KnowledgeGraph,
    split: &DatasetSplit,
    settings: &ModelSettings,
    expansion: &TrainConfig,
    mem: &TrainConfig,
    seed: u64,
) -> Result<Trained> {
    let (vocab, mut model) = init_model(graph, split, settings, seed)?;
    let mut logs = train_expansion(&mut model, graph, &vocab, expansion)?;
    logs.extend(train_mem(&mut model, graph, &vocab, split, mem)?);
    Ok(Trained { vocab, model, logs })
}
