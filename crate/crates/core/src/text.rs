//! Word-level vocabulary with one special token per entity, and the input
//! templates that turn queries and descriptions into token-id sequences.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Words rendered around the mask in description inputs: `the entity [MASK] is`.
const PROMPT_BEFORE: [&str; 2] = ["the", "entity"];
const PROMPT_AFTER: [&str; 1] = ["is"];

pub const DEFAULT_MAX_LEN: usize = 64;

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    entity_offset: Option<u32>,
    max_len: usize,
}

fn entity_token(i: usize) -> String {
    format!("[ENT:{i}]")
}

/// Counts words over relation labels (once per triple occurrence) and entity
/// descriptions, keeping words seen at least `min_freq` times. Prompt words
/// are always kept. Base tokens are ordered by descending count, then
/// lexicographically.
pub fn build_vocabulary(graph: &KnowledgeGraph, min_freq: usize, max_len: usize) -> Result<Vocabulary> {
    if min_freq == 0 {
        return Err(Error::Argument("min_freq must be at least 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let relation_words: Vec<Vec<String>> = graph
        .relation_labels()
        .iter()
        .map(|l| tokenize(l))
        .collect();
    for t in graph.triples() {
        for w in &relation_words[t.relation.index()] {
            *counts.entry(w.clone()).or_default() += 1;
        }
    }
    for e in graph.entities() {
        for w in tokenize(graph.description(e)) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let forced: Vec<&str> = PROMPT_BEFORE.iter().chain(&PROMPT_AFTER).copied().collect();
    let mut words: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_freq || forced.contains(&w.as_str()))
        .collect();
    for w in &forced {
        if !words.iter().any(|(x, _)| x == w) {
            words.push((w.to_string(), 0));
        }
    }
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(words.into_iter().map(|(w, _)| w));
    Vocabulary::from_tokens(tokens, None, max_len)
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, entity_offset: Option<u32>, max_len: usize) -> Result<Self> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Format(format!("special token {s} missing at id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            entity_offset,
            max_len,
        })
    }

    /// Appends one token per entity as a contiguous block.
    pub fn expand_entities(mut self, num_entities: usize) -> Result<Self> {
        if self.entity_offset.is_some() {
            return Err(Error::State("entity vocabulary already expanded".into()));
        }
        let offset = self.tokens.len() as u32;
        for i in 0..num_entities {
            let tok = entity_token(i);
            self.index.insert(tok.clone(), offset + i as u32);
            self.tokens.push(tok);
        }
        self.entity_offset = Some(offset);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn entity_offset(&self) -> Option<u32> {
        self.entity_offset
    }

    pub fn num_entities(&self) -> usize {
        match self.entity_offset {
            Some(off) => self.tokens.len() - off as usize,
            None => 0,
        }
    }

    /// Number of non-entity tokens (specials included).
    pub fn num_base(&self) -> usize {
        self.entity_offset
            .map(|o| o as usize)
            .unwrap_or(self.tokens.len())
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn entity_token_id(&self, e: EntityId) -> Result<u32> {
        let off = self.expanded()?;
        if e.index() >= self.num_entities() {
            return Err(Error::Argument(format!("entity {} has no token", e.0)));
        }
        Ok(off + e.0)
    }

    fn expanded(&self) -> Result<u32> {
        self.entity_offset
            .ok_or_else(|| Error::State("entity vocabulary not expanded".into()))
    }

    /// Maps text to base-vocabulary ids; unknown words become UNK.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        let base = self.num_base() as u32;
        tokenize(text)
            .iter()
            .map(|w| match self.index.get(w) {
                Some(&id) if id < base => id,
                _ => UNK,
            })
            .collect()
    }

    fn relation_budget(&self, relation: &str, fixed: usize) -> Result<(Vec<u32>, usize)> {
        if fixed > self.max_len {
            return Err(Error::Length {
                needed: fixed,
                max_len: self.max_len,
            });
        }
        let mut rel = self.encode_text(relation);
        rel.truncate(self.max_len - fixed);
        let room = self.max_len - fixed - rel.len();
        Ok((rel, room))
    }

    /// `[CLS] <head> d [SEP] r [SEP] [MASK] [SEP]`
    pub fn tail_query(&self, head: EntityId, description: &str, relation: &str) -> Result<EncodedSequence> {
        let ent = self.entity_token_id(head)?;
        let (rel, room) = self.relation_budget(relation, 6)?;
        let mut desc = self.encode_text(description);
        desc.truncate(room);
        let mut ids = Vec::with_capacity(6 + rel.len() + desc.len());
        ids.push(CLS);
        ids.push(ent);
        ids.extend(desc);
        ids.push(SEP);
        ids.extend(rel);
        ids.push(SEP);
        let mask_position = ids.len();
        ids.push(MASK);
        ids.push(SEP);
        Ok(EncodedSequence {
            ids,
            mask_position,
            target: None,
            kind: SequenceKind::TailQuery,
        })
    }

    /// `[CLS] [MASK] [SEP] r [SEP] <tail> d [SEP]`
    pub fn head_query(&self, relation: &str, tail: EntityId, description: &str) -> Result<EncodedSequence> {
        let ent = self.entity_token_id(tail)?;
        let (rel, room) = self.relation_budget(relation, 6)?;
        let mut desc = self.encode_text(description);
        desc.truncate(room);
        let mut ids = Vec::with_capacity(6 + rel.len() + desc.len());
        ids.extend([CLS, MASK, SEP]);
        ids.extend(rel);
        ids.push(SEP);
        ids.push(ent);
        ids.extend(desc);
        ids.push(SEP);
        Ok(EncodedSequence {
            ids,
            mask_position: 1,
            target: None,
            kind: SequenceKind::HeadQuery,
        })
    }

    /// `[CLS] the entity [MASK] is [SEP] d [SEP]`, targeting `entity`.
    pub fn description_input(&self, entity: EntityId, description: &str) -> Result<EncodedSequence> {
        self.expanded()?;
        let fixed = 4 + PROMPT_BEFORE.len() + PROMPT_AFTER.len();
        if fixed > self.max_len {
            return Err(Error::Length {
                needed: fixed,
                max_len: self.max_len,
            });
        }
        let mut desc = self.encode_text(description);
        desc.truncate(self.max_len - fixed);
        let word = |w: &str| self.id(w).unwrap_or(UNK);
        let mut ids = Vec::with_capacity(fixed + desc.len());
        ids.push(CLS);
        ids.extend(PROMPT_BEFORE.iter().map(|w| word(w)));
        let mask_position = ids.len();
        ids.push(MASK);
        ids.extend(PROMPT_AFTER.iter().map(|w| word(w)));
        ids.push(SEP);
        ids.extend(desc);
        ids.push(SEP);
        Ok(EncodedSequence {
            ids,
            mask_position,
            target: Some(entity),
            kind: SequenceKind::DescriptionInput,
        })
    }

    /// Human-readable rendering, mostly for debugging and tests.
    pub fn render(&self, seq: &EncodedSequence) -> String {
        seq.ids
            .iter()
            .map(|&id| match self.entity_offset {
                Some(off) if id >= off => format!("<{}>", id - off),
                _ => self.token(id).unwrap_or("?").to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line in id order, preceded by `#entity_offset=<n>`.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        match self.entity_offset {
            Some(off) => writeln!(w, "#entity_offset={off}")?,
            None => writeln!(w, "#entity_offset=none")?,
        }
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead, max_len: usize) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::Format(e.to_string()))?
            .ok_or_else(|| Error::Format("empty vocabulary file".into()))?;
        let value = header
            .strip_prefix("#entity_offset=")
            .ok_or_else(|| Error::Format(format!("bad vocabulary header `{header}`")))?;
        let entity_offset = match value {
            "none" => None,
            v => Some(
                v.parse::<u32>()
                    .map_err(|_| Error::Format(format!("bad entity offset `{v}`")))?,
            ),
        };
        let tokens = lines
            .collect::<std::io::Result<Vec<String>>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        if let Some(off) = entity_offset {
            if off as usize > tokens.len() {
                return Err(Error::Format("entity offset past end of vocabulary".into()));
            }
            for (i, t) in tokens[off as usize..].iter().enumerate() {
                if *t != entity_token(i) {
                    return Err(Error::Format(format!("unexpected entity token `{t}`")));
                }
            }
        }
        Vocabulary::from_tokens(tokens, entity_offset, max_len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequenceKind {
    TailQuery,
    HeadQuery,
    DescriptionInput,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<u32>,
    pub mask_position: usize,
    /// Supervision only; never enters the forward pass.
    pub target: Option<EntityId>,
    pub kind: SequenceKind,
}

impl EncodedSequence {
    pub fn with_target(mut self, target: EntityId) -> Self {
        self.target = Some(target);
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
