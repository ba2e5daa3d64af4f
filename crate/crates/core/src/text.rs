//! Hash tokenizer and causal text tower.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{BoolMask, Tensor};
use crate::transformer::{Block, LayerNormParams, LinearParams, INIT_STD};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const FIRST_WORD_ID: u32 = 3;

pub const DEFAULT_MAX_LEN: usize = 70;

/// Lowercase whitespace tokenizer hashing each word into the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTokenizer {
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for ToyTokenizer {
    fn default() -> Self {
        Self { vocab_size: 4096, max_len: DEFAULT_MAX_LEN }
    }
}

// FNV-1a, 64-bit. Stable across platforms and releases, unlike std's hasher.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ToyTokenizer {
    pub fn new(vocab_size: usize, max_len: usize) -> Result<Self> {
        if vocab_size <= FIRST_WORD_ID as usize || max_len < 2 {
            return Err(Error::Config(format!(
                "tokenizer needs vocab > {FIRST_WORD_ID} and max_len >= 2"
            )));
        }
        Ok(Self { vocab_size, max_len })
    }

    pub fn word_id(&self, word: &str) -> u32 {
        let span = (self.vocab_size as u64) - FIRST_WORD_ID as u64;
        FIRST_WORD_ID + (fnv1a(word.as_bytes()) % span) as u32
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let lower = text.to_lowercase();
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(BOS);
        ids.extend(lower.split_whitespace().take(self.max_len - 2).map(|w| self.word_id(w)));
        ids.push(EOS);
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { vocab_size: 4096, max_len: DEFAULT_MAX_LEN, d_model: 64, n_layers: 2, n_heads: 4, embed_dim: 64 }
    }
}

impl TextConfig {
    pub fn tokenizer(&self) -> ToyTokenizer {
        ToyTokenizer { vocab_size: self.vocab_size, max_len: self.max_len }
    }

    pub fn validate(&self) -> Result<()> {
        ToyTokenizer::new(self.vocab_size, self.max_len)?;
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.n_layers == 0 || self.embed_dim == 0 {
            return Err(Error::Config("text n_layers and embed_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TextTower {
    config: TextConfig,
    token_embedding: ParamId,
    pos_embedding: ParamId,
    blocks: Vec<Block>,
    output_norm: LayerNormParams,
    output_projection: LinearParams,
}

impl TextTower {
    pub fn new(config: TextConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding =
            store.add_normal("text.token_embedding", &[config.vocab_size, d], INIT_STD, rng);
        let pos_embedding = store.add_normal("text.pos_embedding", &[config.max_len, d], INIT_STD, rng);
        let blocks = (0..config.n_layers)
            .map(|l| Block::new(store, &format!("text.blocks.{l}"), d, config.n_heads, rng))
            .collect();
        let output_norm = LayerNormParams::new(store, "text.output_norm", d);
        let output_projection =
            LinearParams::new(store, "text.output_projection", d, config.embed_dim, false, rng);
        Ok(Self { config, token_embedding, pos_embedding, blocks, output_norm, output_projection })
    }

    pub fn config(&self) -> &TextConfig {
        &self.config
    }

    fn eos_position(&self, ids: &[u32]) -> Result<usize> {
        if ids.len() < 2 {
            return Err(Error::Input(format!("sequence length {} is below 2", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} >= vocab size {}", self.config.vocab_size)));
        }
        let eos = ids
            .iter()
            .position(|&i| i == EOS)
            .ok_or_else(|| Error::Input("sequence has no EOS token".into()))?;
        if eos >= self.config.max_len {
            return Err(Error::Input(format!("EOS at {eos} exceeds max_len {}", self.config.max_len)));
        }
        Ok(eos)
    }

    /// Records the encoding of a batch of id sequences; returns unit rows
    /// `[B, embed_dim]` read at each sequence's EOS position.
    pub fn encode_graph(&self, g: &mut Graph, store: &ParamStore, batch: &[&[u32]]) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::Input("empty text batch".into()));
        }
        let eos = batch.iter().map(|ids| self.eos_position(ids)).collect::<Result<Vec<_>>>()?;
        // Everything after EOS is invisible to the EOS position, so sequences
        // are cut there and PAD-filled to a shared length.
        let len = eos.iter().max().copied().unwrap_or(0) + 1;
        let mut tokens = Vec::with_capacity(batch.len() * len);
        for (ids, &e) in batch.iter().zip(&eos) {
            tokens.extend(ids[..=e].iter().map(|&i| i as usize));
            tokens.extend(std::iter::repeat_n(PAD as usize, len - e - 1));
        }
        let table = g.param(store, self.token_embedding);
        let x = g.gather_rows(table, &tokens)?;
        let pos_table = g.param(store, self.pos_embedding);
        let positions: Vec<usize> = (0..tokens.len()).map(|r| r % len).collect();
        let p = g.gather_rows(pos_table, &positions)?;
        let mut x = g.add(x, p)?;
        let mask = Rc::new(BoolMask::causal(len));
        for block in &self.blocks {
            x = block.forward(g, store, x, &mask, batch.len())?;
        }
        let read: Vec<usize> = eos.iter().enumerate().map(|(b, &e)| b * len + e).collect();
        let x = g.gather_rows(x, &read)?;
        let x = self.output_norm.apply(g, store, x)?;
        let x = self.output_projection.apply(g, store, x)?;
        g.l2_normalize(x)
    }

    pub fn encode_text(&self, store: &ParamStore, ids: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let id = self.encode_graph(&mut g, store, &[ids])?;
        let row = g.value(id).row(0).to_vec();
        Tensor::new(vec![row.len()], row)
    }

    pub fn encode_texts(&self, store: &ParamStore, batch: &[&[u32]], chunk: usize) -> Result<Tensor> {
        let mut rows = Vec::new();
        for part in batch.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let id = self.encode_graph(&mut g, store, part)?;
            rows.extend_from_slice(g.value(id).data());
        }
        Tensor::new(vec![batch.len(), self.config.embed_dim], rows)
    }
}
