//! Two-stage training: entity vocabulary expansion with a frozen backbone,
//! then masked entity modeling over head and tail queries.

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn;
use super::params::Params;
use super::EncoderModel;
use crate::error::{Error, Result};
use crate::graph::{DatasetSplit, KnowledgeGraph};
use crate::text::{EncodedSequence, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Expansion,
    Mem,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Argument(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub epochs: usize,
    /// Sequences per update; 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// MEM stage only: also train on the description inputs of the MEM-head
    /// entities, keeping description and query anchors in one space.
    #[serde(default)]
    pub include_descriptions: bool,
}

impl TrainConfig {
    pub fn expansion_default(seed: u64) -> Self {
        TrainConfig {
            stage: Stage::Expansion,
            lr: 0.1,
            epochs: 200,
            batch_size: 0,
            seed,
            optimizer: Optimizer::Sgd,
            include_descriptions: false,
        }
    }

    pub fn mem_default(seed: u64) -> Self {
        TrainConfig {
            stage: Stage::Mem,
            lr: 1e-3,
            epochs: 40,
            batch_size: 32,
            seed,
            optimizer: Optimizer::Adam,
            include_descriptions: false,
        }
    }

    fn validate(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Config(format!(
                "config is for stage {:?}, expected {stage:?}",
                self.stage
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.epochs == 0 {
            return Err(Error::Config(
                "learning rate and epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    /// Mean loss over the epoch's sequences, measured before each update.
    pub loss: f64,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamState {
    fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Updates `values` in place; `values`, `grads` and the state are all
    /// walked in the same fixed order.
    fn step<'a, 'b>(
        &mut self,
        lr: f64,
        values: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = &'b f64>,
    ) {
        self.step += 1;
        let c1 = 1.0 - ADAM_B1.powi(self.step);
        let c2 = 1.0 - ADAM_B2.powi(self.step);
        for (((p, &g), m), v) in values.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * g;
            *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

fn batches(n: usize, batch_size: usize, shuffle: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    let size = if batch_size == 0 { n.max(1) } else { batch_size };
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Description inputs for every MEM-head entity that has a description.
pub fn description_inputs(
    model: &EncoderModel,
    graph: &KnowledgeGraph,
    vocab: &Vocabulary,
) -> Result<Vec<EncodedSequence>> {
    graph
        .entities()
        .filter(|e| model.mem_mask()[e.index()] && !graph.description(*e).is_empty())
        .map(|e| vocab.description_input(e, graph.description(e)))
        .collect()
}

/// Head and tail queries for every train triple: the tail query of each
/// triple immediately followed by its head query.
pub fn query_inputs(
    graph: &KnowledgeGraph,
    vocab: &Vocabulary,
    split: &DatasetSplit,
) -> Result<Vec<EncodedSequence>> {
    let mut out = Vec::with_capacity(split.train.len() * 2);
    for t in &split.train {
        let rel = graph.relation_label(t.relation);
        out.push(
            vocab
                .tail_query(t.head, graph.description(t.head), rel)?
                .with_target(t.tail),
        );
        out.push(
            vocab
                .head_query(rel, t.tail, graph.description(t.tail))?
                .with_target(t.head),
        );
    }
    Ok(out)
}

fn check_loss(loss: f64, epoch: usize, logs: &[EpochLog]) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            epoch,
            last_finite_loss: logs.last().map(|l| l.loss),
        })
    }
}

/// Fits the entity-token rows to predict each entity from its description
/// while every other parameter stays bit-identical.
///
/// Description inputs never contain entity tokens, so with the backbone
/// frozen their anchors are constant; they are computed once and training
/// reduces to softmax regression of the entity rows on fixed features.
pub fn train_expansion(
    model: &mut EncoderModel,
    graph: &KnowledgeGraph,
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    config.validate(super::Stage::Expansion)?;
    let inputs = description_inputs(model, graph, vocab)?;
    if inputs.is_empty() {
        return Err(Error::Argument(
            "no described entities to train entity embeddings on".into(),
        ));
    }
    let off = model.config.entity_offset;
    if inputs
        .iter()
        .any(|s| s.ids.iter().any(|&id| id as usize >= off))
    {
        return Err(Error::State(
            "description inputs must not contain entity tokens".into(),
        ));
    }
    model.validate_batch(&inputs, &[crate::text::SequenceKind::DescriptionInput])?;

    let dim = model.dim();
    let n_ent = model.config.num_entities;
    let mut anchors = Array2::zeros((inputs.len(), dim));
    for (mut row, seq) in anchors.rows_mut().into_iter().zip(&inputs) {
        row.assign(&nn::anchor(
            &model.params,
            model.config.heads,
            &seq.ids,
            seq.mask_position,
        ));
    }
    let targets: Vec<usize> = inputs.iter().map(|s| s.target.unwrap().index()).collect();
    let mask = model.mem_mask.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e0e0);
    let mut adam = AdamState::new(n_ent * dim);
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for batch in batches(inputs.len(), config.batch_size, config.batch_size != 0, &mut rng) {
            let rows = model.params.tok.slice(s![off..off + n_ent, ..]);
            let a = anchors.select(Axis(0), &batch);
            let logits = a.dot(&rows.t());
            let mut dlogits = Array2::zeros(logits.raw_dim());
            let scale = 1.0 / batch.len() as f64;
            for (i, &b) in batch.iter().enumerate() {
                let row: Vec<Option<f64>> = logits
                    .row(i)
                    .iter()
                    .zip(&mask)
                    .map(|(&l, &m)| m.then_some(l))
                    .collect();
                let probs = nn::masked_softmax(&row);
                epoch_loss += -probs[targets[b]].ln();
                for (d, p) in dlogits.row_mut(i).iter_mut().zip(&probs) {
                    *d = p * scale;
                }
                dlogits[[i, targets[b]]] -= scale;
            }
            let grad = dlogits.t().dot(&a);
            let mut rows = model.params.tok.slice_mut(s![off..off + n_ent, ..]);
            match config.optimizer {
                Optimizer::Sgd => rows.scaled_add(-config.lr, &grad),
                Optimizer::Adam => adam.step(config.lr, rows.iter_mut(), grad.iter()),
            }
        }
        let loss = epoch_loss / inputs.len() as f64;
        check_loss(loss, epoch, &logs)?;
        logs.push(EpochLog {
            stage: Stage::Expansion,
            epoch,
            loss,
        });
    }
    if !model.params.all_finite() {
        return Err(Error::Divergence {
            epoch: config.epochs,
            last_finite_loss: logs.last().map(|l| l.loss),
        });
    }
    Ok(logs)
}

/// Masked entity modeling over both query directions of every train triple,
/// updating all parameters.
pub fn train_mem(
    model: &mut EncoderModel,
    graph: &KnowledgeGraph,
    vocab: &Vocabulary,
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    config.validate(Stage::Mem)?;
    let mut inputs = query_inputs(graph, vocab, split)?;
    if inputs.is_empty() {
        return Err(Error::Argument("no training triples".into()));
    }
    model.validate_batch(
        &inputs,
        &[
            crate::text::SequenceKind::HeadQuery,
            crate::text::SequenceKind::TailQuery,
        ],
    )?;
    if config.include_descriptions {
        inputs.extend(description_inputs(model, graph, vocab)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0e3e_5eed);
    let mut grad = Params::zeros(&model.config);
    let mut adam = AdamState::new(model.params.num_values());
    let mut logs = Vec::with_capacity(config.epochs);
    let mut batch_seqs: Vec<EncodedSequence> = Vec::new();
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for batch in batches(inputs.len(), config.batch_size, true, &mut rng) {
            batch_seqs.clear();
            batch_seqs.extend(batch.iter().map(|&i| inputs[i].clone()));
            grad.fill_zero();
            let loss = model.batch_loss(&batch_seqs, Some(&mut grad));
            epoch_loss += loss * batch.len() as f64;
            if !loss.is_finite() {
                break;
            }
            match config.optimizer {
                Optimizer::Sgd => {
                    for ((_, p), (_, g)) in model.params.tensors_mut().into_iter().zip(grad.tensors()) {
                        for (p, g) in p.iter_mut().zip(g) {
                            *p -= config.lr * g;
                        }
                    }
                }
                Optimizer::Adam => {
                    let mut values = model.params.tensors_mut();
                    let grads = grad.tensors();
                    adam.step(
                        config.lr,
                        values.iter_mut().flat_map(|(_, s)| s.iter_mut()),
                        grads.iter().flat_map(|(_, s)| s.iter()),
                    );
                }
            }
        }
        let loss = epoch_loss / inputs.len() as f64;
        check_loss(loss, epoch, &logs)?;
        logs.push(EpochLog {
            stage: Stage::Mem,
            epoch,
            loss,
        });
    }
    if !model.params.all_finite() {
        return Err(Error::Divergence {
            epoch: config.epochs,
            last_finite_loss: logs.last().map(|l| l.loss),
        });
    }
    Ok(logs)
}
