//! A small from-scratch contextual encoder with a masked-entity (MEM) head.
//!
//! The encoder is a pre-LN transformer over token ids. The anchor embedding
//! of a sequence is the final-layer hidden state at its `[MASK]` slot. The
//! MEM head scores entities by the dot product between the anchor and the
//! entity-token rows of the (tied) token embedding matrix, followed by a
//! softmax restricted to the entities the head knows about.

mod nn;
pub mod params;
mod train;

use std::io::{Read, Write};

use ndarray::{s, Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use params::{Block, Params};
pub use train::{
    description_inputs, query_inputs, train_expansion, train_mem, EpochLog, Optimizer, Stage,
    TrainConfig,
};

use crate::error::{Error, Result};
use crate::graph::EntityId;
use crate::text::{EncodedSequence, SequenceKind, Vocabulary};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub entity_offset: usize,
    pub num_entities: usize,
}

impl EncoderConfig {
    pub const DEFAULT_DIM: usize = 64;
    pub const DEFAULT_LAYERS: usize = 2;
    pub const DEFAULT_HEADS: usize = 2;

    /// Shape taken from an expanded vocabulary; `ffn_dim` defaults to `4 * dim`.
    pub fn for_vocab(vocab: &Vocabulary, dim: usize, layers: usize, heads: usize) -> Result<Self> {
        let entity_offset = vocab
            .entity_offset()
            .ok_or_else(|| Error::State("entity vocabulary not expanded".into()))?
            as usize;
        let cfg = EncoderConfig {
            dim,
            layers,
            heads,
            ffn_dim: 4 * dim,
            max_len: vocab.max_len(),
            vocab_size: vocab.len(),
            entity_offset,
            num_entities: vocab.num_entities(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::Config(format!("dim must be at least 8, got {}", self.dim)));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.ffn_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("ffn_dim and max_len must be positive".into()));
        }
        if self.entity_offset + self.num_entities != self.vocab_size {
            return Err(Error::Config(
                "entity block must end the vocabulary".into(),
            ));
        }
        Ok(())
    }
}

/// Hidden state at the `[MASK]` slot of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorEmbedding {
    pub vector: Vec<f64>,
    pub kind: SequenceKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    pub params: Params,
    /// Entities covered by the MEM head. Others receive probability 0.
    mem_mask: Vec<bool>,
    seed: u64,
}

impl EncoderModel {
    /// Fresh model with seeded random parameters.
    pub fn new(config: EncoderConfig, mem_mask: Vec<bool>, seed: u64) -> Result<Self> {
        config.validate()?;
        if mem_mask.len() != config.num_entities {
            return Err(Error::Argument(format!(
                "MEM mask covers {} entities, model has {}",
                mem_mask.len(),
                config.num_entities
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::random(&config, &mut rng);
        Ok(EncoderModel {
            config,
            params,
            mem_mask,
            seed,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mem_mask(&self) -> &[bool] {
        &self.mem_mask
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Row of the MEM head (and token embedding) for `e`.
    pub fn entity_row(&self, e: EntityId) -> ArrayView1<'_, f64> {
        self.params.tok.row(self.config.entity_offset + e.index())
    }

    fn check(&self, seq: &EncodedSequence) -> Result<()> {
        if seq.ids.len() > self.config.max_len {
            return Err(Error::Length {
                needed: seq.ids.len(),
                max_len: self.config.max_len,
            });
        }
        if seq.mask_position >= seq.ids.len() {
            return Err(Error::Argument("mask position outside sequence".into()));
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenIndex {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn anchor_array(&self, seq: &EncodedSequence) -> Result<Array1<f64>> {
        self.check(seq)?;
        Ok(nn::anchor(
            &self.params,
            self.config.heads,
            &seq.ids,
            seq.mask_position,
        ))
    }

    /// Final-layer hidden state at the mask position.
    pub fn encode(&self, seq: &EncodedSequence) -> Result<AnchorEmbedding> {
        Ok(AnchorEmbedding {
            vector: self.anchor_array(seq)?.to_vec(),
            kind: seq.kind,
        })
    }

    /// `p_MEM` from a precomputed anchor: dense over all entities, zero
    /// outside the MEM head.
    pub fn mem_from_anchor(&self, anchor: &[f64]) -> Result<Vec<f64>> {
        if anchor.len() != self.config.dim {
            return Err(Error::Argument(format!(
                "anchor has dim {}, model has {}",
                anchor.len(),
                self.config.dim
            )));
        }
        if !self.mem_mask.iter().any(|&m| m) {
            return Err(Error::State("MEM head covers no entities".into()));
        }
        let logits = nn::entity_logits(
            &self.params,
            self.config.entity_offset,
            &self.mem_mask,
            ArrayView1::from(anchor),
        );
        Ok(nn::masked_softmax(&logits))
    }

    pub fn mem_distribution(&self, seq: &EncodedSequence) -> Result<Vec<f64>> {
        let anchor = self.anchor_array(seq)?;
        self.mem_from_anchor(anchor.as_slice().unwrap())
    }

    fn validate_batch(&self, batch: &[EncodedSequence], kinds: &[SequenceKind]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        for seq in batch {
            if !kinds.contains(&seq.kind) {
                return Err(Error::Argument(format!(
                    "sequence of kind {:?} not allowed here",
                    seq.kind
                )));
            }
            let target = seq
                .target
                .ok_or_else(|| Error::Argument("sequence has no target".into()))?;
            if !self.mem_mask.get(target.index()).copied().unwrap_or(false) {
                return Err(Error::Argument(format!(
                    "target entity {} is outside the MEM head",
                    target.0
                )));
            }
            self.check(seq)?;
        }
        Ok(())
    }

    /// Mean cross-entropy `-log p([MASK] = target)` over description inputs.
    pub fn expansion_loss(&self, batch: &[EncodedSequence]) -> Result<f64> {
        self.validate_batch(batch, &[SequenceKind::DescriptionInput])?;
        Ok(self.batch_loss(batch, None))
    }

    /// Mean cross-entropy over head and tail queries.
    pub fn mem_loss(&self, batch: &[EncodedSequence]) -> Result<f64> {
        self.validate_batch(batch, &[SequenceKind::HeadQuery, SequenceKind::TailQuery])?;
        Ok(self.batch_loss(batch, None))
    }

    /// Loss of [`Self::expansion_loss`] plus its gradient with respect to every
    /// parameter, accumulated into `grad`.
    pub fn expansion_loss_grad(&self, batch: &[EncodedSequence], grad: &mut Params) -> Result<f64> {
        self.validate_batch(batch, &[SequenceKind::DescriptionInput])?;
        Ok(self.batch_loss(batch, Some(grad)))
    }

    pub fn mem_loss_grad(&self, batch: &[EncodedSequence], grad: &mut Params) -> Result<f64> {
        self.validate_batch(batch, &[SequenceKind::HeadQuery, SequenceKind::TailQuery])?;
        Ok(self.batch_loss(batch, Some(grad)))
    }

    /// Per-sequence losses (pre-validated) summed and divided by the batch
    /// size; gradients are accumulated with the same `1/B` factor.
    fn batch_loss(&self, batch: &[EncodedSequence], mut grad: Option<&mut Params>) -> f64 {
        let scale = 1.0 / batch.len() as f64;
        let off = self.config.entity_offset;
        let n = self.config.num_entities;
        let mut total = 0.0;
        for seq in batch {
            let target = seq.target.expect("validated").index();
            let (anchor, cache) = nn::forward(
                &self.params,
                self.config.heads,
                &seq.ids,
                seq.mask_position,
            );
            let logits = nn::entity_logits(&self.params, off, &self.mem_mask, anchor.view());
            let probs = nn::masked_softmax(&logits);
            total += -probs[target].ln();

            if let Some(grad) = grad.as_deref_mut() {
                let mut dlogits = Array1::from(probs);
                dlogits[target] -= 1.0;
                dlogits *= scale;
                let rows = self.params.tok.slice(s![off..off + n, ..]);
                let d_anchor = rows.t().dot(&dlogits);
                {
                    let mut grows = grad.tok.slice_mut(s![off..off + n, ..]);
                    for (mut row, &dl) in grows.rows_mut().into_iter().zip(dlogits.iter()) {
                        if dl != 0.0 {
                            row.scaled_add(dl, &anchor);
                        }
                    }
                }
                nn::backward(
                    &self.params,
                    grad,
                    self.config.heads,
                    &cache,
                    d_anchor.view(),
                );
            }
        }
        total * scale
    }

    /// Writes the checkpoint: a text header line, one mask byte per entity,
    /// then every tensor of [`Params::tensors`] as little-endian `f64`.
    pub fn save(&self, mut w: impl Write) -> std::io::Result<()> {
        let c = &self.config;
        writeln!(
            w,
            "{MODEL_MAGIC} dim={} layers={} heads={} ffn={} max_len={} vocab={} entity_offset={} entities={} seed={}",
            c.dim, c.layers, c.heads, c.ffn_dim, c.max_len, c.vocab_size, c.entity_offset, c.num_entities, self.seed
        )?;
        let mask: Vec<u8> = self.mem_mask.iter().map(|&m| m as u8).collect();
        w.write_all(&mask)?;
        let mut buf = Vec::with_capacity(self.params.num_values() * 8);
        for (_, t) in self.params.tensors() {
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    pub fn load(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Format(e.to_string()))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing checkpoint header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let fields = parse_header(header, MODEL_MAGIC)?;
        let get = |k: &str| -> Result<usize> {
            fields
                .iter()
                .find(|(key, _)| key == k)
                .ok_or_else(|| Error::Format(format!("checkpoint header lacks `{k}`")))?
                .1
                .parse()
                .map_err(|_| Error::Format(format!("bad value for `{k}`")))
        };
        let config = EncoderConfig {
            dim: get("dim")?,
            layers: get("layers")?,
            heads: get("heads")?,
            ffn_dim: get("ffn")?,
            max_len: get("max_len")?,
            vocab_size: get("vocab")?,
            entity_offset: get("entity_offset")?,
            num_entities: get("entities")?,
        };
        config.validate()?;
        let seed = get("seed")? as u64;
        let mut params = Params::zeros(&config);
        let body = &bytes[nl + 1..];
        let expected = config.num_entities + params.num_values() * 8;
        if body.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint body has {} bytes, expected {expected}",
                body.len()
            )));
        }
        let (mask_bytes, mut rest) = body.split_at(config.num_entities);
        let mut mem_mask = Vec::with_capacity(config.num_entities);
        for &b in mask_bytes {
            match b {
                0 => mem_mask.push(false),
                1 => mem_mask.push(true),
                _ => return Err(Error::Format("bad MEM mask byte".into())),
            }
        }
        for (_, t) in params.tensors_mut() {
            for v in t.iter_mut() {
                let (head, tail) = rest.split_at(8);
                *v = f64::from_le_bytes(head.try_into().unwrap());
                rest = tail;
            }
        }
        Ok(EncoderModel {
            config,
            params,
            mem_mask,
            seed,
        })
    }
}

pub const MODEL_MAGIC: &str = "KNNKGE-MODEL v1";

/// Splits `MAGIC key=value key=value ...` into pairs.
pub(crate) fn parse_header(header: &str, magic: &str) -> Result<Vec<(String, String)>> {
    let rest = header
        .strip_prefix(magic)
        .ok_or_else(|| Error::Format(format!("expected `{magic}` header, found `{header}`")))?;
    rest.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("bad header field `{kv}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests;
