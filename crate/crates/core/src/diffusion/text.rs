use candle_core::{Device, Tensor};

use crate::data::PAD_TOKEN;
use crate::error::{arg_err, Result};
use crate::nn::{Builder, Embedding, Init};

/// Caption embedder: token embedding plus learned positions, `K x C` per caption.
#[derive(Clone, Debug)]
pub struct TextEmbedder {
    tokens: Embedding,
    positions: Tensor,
    vocab: usize,
    len: usize,
}

impl TextEmbedder {
    pub fn new(b: &Builder, vocab: usize, len: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            tokens: Embedding::new(&b.pp("tokens"), vocab, channels)?,
            positions: b.get(&[len, channels], "positions", Init::Randn(0.5))?,
            vocab,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.positions.dims()[1]
    }

    /// Pads with the pad token (or truncates) to the embedder's length.
    pub fn pad(&self, tokens: &[u32]) -> Result<Vec<u32>> {
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(arg_err!("token {bad} outside vocabulary of {}", self.vocab));
        }
        let mut ids: Vec<u32> = tokens.iter().copied().take(self.len).collect();
        ids.resize(self.len, PAD_TOKEN);
        Ok(ids)
    }

    /// `(B, K, C)` tokens for a batch of captions.
    pub fn forward(&self, captions: &[&[u32]]) -> Result<Tensor> {
        let mut ids = Vec::with_capacity(captions.len() * self.len);
        for c in captions {
            ids.extend(self.pad(c)?);
        }
        let ids = Tensor::from_vec(ids, (captions.len(), self.len), &Device::Cpu)?;
        Ok(self.tokens.forward(&ids)?.broadcast_add(&self.positions)?)
    }

    /// `(K, C)` tokens of one caption.
    pub fn encode(&self, caption: &[u32]) -> Result<Tensor> {
        Ok(self.forward(&[caption])?.squeeze(0)?)
    }

    /// The all-padding caption `t_∅`, shape `(K, C)`.
    pub fn null_tokens(&self) -> Result<Tensor> {
        self.encode(&[])
    }
}
