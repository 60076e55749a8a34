//! Frozen audio featurizer and the trainable audio projector.
//!
//! The featurizer turns a log-mel spectrogram into a unit-norm clip embedding
//! through fixed pooled statistics and a fixed random projection; it has no
//! trainable state. The projector maps a clip embedding to `K` conditioning
//! tokens of width `C`: a linear lift onto a short token grid, two 1-D
//! convolutions, two stride-2 deconvolutions, then four self-attention blocks.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{MelSpectrogram, LOG_FLOOR};
use crate::error::{arg_err, Result};
use crate::nn::{Builder, Conv1d, Deconv1d, Init, Linear, SelfAttentionBlock};

/// Clip-level audio embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEmbedding(pub Vec<f32>);

impl AudioEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.0, (1, self.0.len()), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Stack embeddings into a `(batch, dim)` tensor.
pub fn stack_embeddings(embs: &[&AudioEmbedding], dtype: DType) -> Result<Tensor> {
    let dim = embs.first().map(|e| e.dim()).unwrap_or(0);
    let mut flat = Vec::with_capacity(embs.len() * dim);
    for e in embs {
        if e.dim() != dim {
            return Err(arg_err!("embedding dims differ: {} vs {dim}", e.dim()));
        }
        flat.extend_from_slice(&e.0);
    }
    Ok(Tensor::from_vec(flat, (embs.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `K x C` conditioning tokens.
#[derive(Debug, Clone)]
pub struct AudioTokens(pub Tensor);

impl AudioTokens {
    pub fn shape(&self) -> (usize, usize) {
        let d = self.0.dims();
        (d[0], d[1])
    }
}

const FEATURIZER_SEED: u64 = 0x00c1_a9f0_0d5e_ed00;

/// Parameter-free clip encoder standing in for a pretrained audio model.
#[derive(Debug, Clone)]
pub struct AudioFeaturizer {
    d_audio: usize,
    n_mels: usize,
    /// Row-major `d_audio x (3 * n_mels)`.
    projection: Vec<f64>,
}

impl AudioFeaturizer {
    pub fn new(d_audio: usize, n_mels: usize) -> Self {
        let n_feat = 3 * n_mels;
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURIZER_SEED);
        let scale = 1.0 / (n_feat as f64).sqrt();
        let projection = (0..d_audio * n_feat)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self {
            d_audio,
            n_mels,
            projection,
        }
    }

    pub fn dim(&self) -> usize {
        self.d_audio
    }

    /// Per-band mean, standard deviation and maximum of the log-mel energy
    /// above the floor, scaled so that silence maps to zero.
    pub fn pooled_stats(&self, mel: &MelSpectrogram) -> Vec<f64> {
        let floor = LOG_FLOOR.ln();
        let scale = -floor;
        let mut out = Vec::with_capacity(3 * mel.n_mels);
        for m in 0..mel.n_mels {
            let band: Vec<f64> = mel.band(m).iter().map(|v| (v - floor) / scale).collect();
            let n = band.len() as f64;
            let mean = band.iter().sum::<f64>() / n;
            let var = band.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let max = band.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out.extend([mean, var.sqrt(), max]);
        }
        out
    }

    pub fn encode(&self, mel: &MelSpectrogram) -> Result<AudioEmbedding> {
        if mel.n_mels != self.n_mels {
            return Err(arg_err!(
                "featurizer expects {} mel bands, got {}",
                self.n_mels,
                mel.n_mels
            ));
        }
        let stats = self.pooled_stats(mel);
        let n_feat = stats.len();
        let mut emb: Vec<f64> = (0..self.d_audio)
            .map(|r| {
                self.projection[r * n_feat..(r + 1) * n_feat]
                    .iter()
                    .zip(&stats)
                    .map(|(w, s)| w * s)
                    .sum()
            })
            .collect();
        let norm = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in &mut emb {
                *v /= norm;
            }
        }
        Ok(AudioEmbedding(emb.into_iter().map(|v| v as f32).collect()))
    }
}

pub fn encode_audio(mel: &MelSpectrogram, featurizer: &AudioFeaturizer) -> Result<AudioEmbedding> {
    featurizer.encode(mel)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectorConfig {
    pub d_audio: usize,
    pub tokens: usize,
    pub channels: usize,
    pub blocks: usize,
    pub ff_mult: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            d_audio: 512,
            tokens: 8,
            channels: 64,
            blocks: 4,
            ff_mult: 4,
        }
    }
}

impl ProjectorConfig {
    /// Grid length after the linear lift; two stride-2 deconvolutions then
    /// reach at least `tokens` positions.
    pub fn lift_positions(&self) -> usize {
        self.tokens.div_ceil(4).max(1)
    }
}

pub struct AudioProjector {
    pub cfg: ProjectorConfig,
    lift: Linear,
    conv1: Conv1d,
    conv2: Conv1d,
    deconv1: Deconv1d,
    deconv2: Deconv1d,
    pos: Tensor,
    blocks: Vec<SelfAttentionBlock>,
}

impl AudioProjector {
    pub fn new(b: &Builder, cfg: ProjectorConfig) -> Result<Self> {
        if cfg.blocks != 4 {
            return Err(crate::Error::Config(format!(
                "projector uses exactly 4 self-attention blocks, got {}",
                cfg.blocks
            )));
        }
        let c = cfg.channels;
        let lp = cfg.lift_positions();
        let blocks = (0..cfg.blocks)
            .map(|i| SelfAttentionBlock::new(&b.pp(format!("blocks.{i}")), c, cfg.ff_mult))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            lift: Linear::new(&b.pp("lift"), cfg.d_audio, lp * c, true)?,
            conv1: Conv1d::new(&b.pp("conv1"), c, c, 3)?,
            conv2: Conv1d::new(&b.pp("conv2"), c, c, 3)?,
            deconv1: Deconv1d::new(&b.pp("deconv1"), c, c)?,
            deconv2: Deconv1d::new(&b.pp("deconv2"), c, c)?,
            pos: b.get(&[cfg.tokens, c], "pos", Init::Randn(0.02))?,
            blocks,
        })
    }

    /// `(batch, d_audio)` -> `(batch, K, C)`.
    pub fn forward(&self, emb: &Tensor) -> Result<Tensor> {
        let (bsz, d) = emb.dims2()?;
        if d != self.cfg.d_audio {
            return Err(arg_err!("projector expects dim {}, got {d}", self.cfg.d_audio));
        }
        let c = self.cfg.channels;
        let lp = self.cfg.lift_positions();
        let h = self.lift.forward(emb)?.reshape((bsz, lp, c))?.transpose(1, 2)?;
        let h = self.conv1.forward(&h)?.silu()?;
        let h = self.conv2.forward(&h)?.silu()?;
        let h = self.deconv1.forward(&h)?.silu()?;
        let h = self.deconv2.forward(&h)?;
        let h = h.narrow(2, 0, self.cfg.tokens)?.transpose(1, 2)?;
        let mut h = h.broadcast_add(&self.pos)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        Ok(h)
    }

    pub fn project(&self, emb: &AudioEmbedding) -> Result<AudioTokens> {
        let dtype = self.pos.dtype();
        let t = self.forward(&emb.to_tensor(dtype)?)?;
        Ok(AudioTokens(t.squeeze(0)?))
    }

    /// Tokens of the zero embedding: the unconditional audio input.
    pub fn null_tokens(&self) -> Result<AudioTokens> {
        self.project(&AudioEmbedding::zeros(self.cfg.d_audio))
    }
}

pub fn project(embedding: &AudioEmbedding, projector: &AudioProjector) -> Result<AudioTokens> {
    projector.project(embedding)
}

pub fn null_audio_tokens(projector: &AudioProjector) -> Result<AudioTokens> {
    projector.null_tokens()
}
