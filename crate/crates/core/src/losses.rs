//! Training objectives.
//!
//! Stage 1 aligns projected audio tokens with a per-token contrastive loss and
//! a per-token squared error against caption tokens, both summed with
//! reverse-sigmoid token weights `w_i = t / (t + exp(i / t))`. Stage 2 uses the
//! noise-prediction loss of the audio-conditioned denoiser.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{arg_err, Result};
use crate::nn::logsumexp_keepdim;

/// Reverse-sigmoid weight of the 1-based token index `i`.
pub fn token_weight(i: usize, t_w: f64) -> Result<f64> {
    if i == 0 {
        return Err(arg_err!("token indices start at 1"));
    }
    if !(t_w > 0.0) {
        return Err(arg_err!("temperature must be positive, got {t_w}"));
    }
    Ok(t_w / (t_w + (i as f64 / t_w).exp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenWeighting {
    ReverseSigmoid { temperature: f64 },
    Uniform,
}

impl Default for TokenWeighting {
    fn default() -> Self {
        TokenWeighting::ReverseSigmoid { temperature: 5.0 }
    }
}

impl TokenWeighting {
    /// Weights for token positions `1..=k` (position 1 is the first row).
    pub fn weights(&self, k: usize) -> Result<Vec<f64>> {
        match *self {
            TokenWeighting::ReverseSigmoid { temperature } => {
                (1..=k).map(|i| token_weight(i, temperature)).collect()
            }
            TokenWeighting::Uniform => Ok(vec![1.0 / k as f64; k]),
        }
    }

    fn tensor(&self, k: usize, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.weights(k)?, k, &Device::Cpu)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

/// Whether the contrastive softmax runs per token row or once over whole clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveReduction {
    #[default]
    PerToken,
    Clip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_contrastive: f64,
    pub alpha_mse: f64,
    pub weighting: TokenWeighting,
    pub similarity: Similarity,
    pub reduction: ContrastiveReduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_contrastive: 1.0,
            alpha_mse: 0.25,
            weighting: TokenWeighting::default(),
            similarity: Similarity::Dot,
            reduction: ContrastiveReduction::PerToken,
        }
    }
}

/// Batched stage-1 inputs. Shapes: anchor/positive/text `(B, K, C)`,
/// negatives `(B, N, K, C)`. Text tokens may have a different `K` from the
/// audio tokens, in which case the squared error compares against their mean.
#[derive(Debug, Clone)]
pub struct Stage1Batch {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negatives: Tensor,
    pub text: Tensor,
}

fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Contrastive loss with the positive in slot 0 of the softmax.
pub fn infonce_loss(
    batch: &Stage1Batch,
    weighting: TokenWeighting,
    similarity: Similarity,
    reduction: ContrastiveReduction,
) -> Result<Tensor> {
    let (bsz, k, c) = batch.anchor.dims3()?;
    let (nb, n, nk, nc) = batch.negatives.dims4()?;
    if n == 0 {
        return Err(arg_err!("contrastive loss needs at least one negative"));
    }
    if nb != bsz || nk != k || nc != c || batch.positive.dims() != batch.anchor.dims() {
        return Err(arg_err!("stage-1 batch shapes are inconsistent"));
    }
    let (mut a0, mut a1, mut neg) = (
        batch.anchor.clone(),
        batch.positive.clone(),
        batch.negatives.clone(),
    );
    if reduction == ContrastiveReduction::Clip {
        a0 = a0.reshape((bsz, 1, k * c))?;
        a1 = a1.reshape((bsz, 1, k * c))?;
        neg = neg.reshape((bsz, n, 1, k * c))?;
    }
    if similarity == Similarity::Cosine {
        a0 = normalize_rows(&a0)?;
        a1 = normalize_rows(&a1)?;
        neg = normalize_rows(&neg)?;
    }
    // (B, K') similarities with the positive, (B, N, K') with the negatives.
    let pos = (&a0 * &a1)?.sum(D::Minus1)?;
    let negs = neg.broadcast_mul(&a0.unsqueeze(1)?)?.sum(D::Minus1)?;
    let logits = Tensor::cat(&[pos.unsqueeze(1)?, negs], 1)?;
    let per_token = (logsumexp_keepdim(&logits, 1)?.squeeze(1)? - &pos)?;
    let total = match reduction {
        ContrastiveReduction::PerToken => per_token
            .broadcast_mul(&weighting.tensor(k, per_token.dtype())?)?
            .sum(1)?,
        ContrastiveReduction::Clip => per_token.sum(1)?,
    };
    Ok(total.mean(0)?)
}

/// Weighted per-token squared error `Σ_i w_i ‖a_i − t_i‖²`, averaged over the batch.
pub fn mse_token_loss(audio: &Tensor, text: &Tensor, weighting: TokenWeighting) -> Result<Tensor> {
    let (_, k, c) = audio.dims3()?;
    let (tb, tk, tc) = text.dims3()?;
    if tc != c || tb != audio.dim(0)? {
        return Err(arg_err!(
            "token shapes differ: audio {:?} vs text {:?}",
            audio.dims(),
            text.dims()
        ));
    }
    let target = if tk == k {
        text.clone()
    } else if k == 1 {
        text.mean_keepdim(1)?
    } else {
        return Err(arg_err!("audio has {k} tokens but text has {tk}"));
    };
    let per_token = (audio - target)?.sqr()?.sum(D::Minus1)?;
    Ok(per_token
        .broadcast_mul(&weighting.tensor(k, per_token.dtype())?)?
        .sum(1)?
        .mean(0)?)
}

#[derive(Debug, Clone)]
pub struct Stage1Loss {
    pub total: Tensor,
    pub contrastive: Tensor,
    pub mse: Tensor,
}

pub fn stage1_loss(batch: &Stage1Batch, w: &LossWeights) -> Result<Stage1Loss> {
    let contrastive = infonce_loss(batch, w.weighting, w.similarity, w.reduction)?;
    let mse = mse_token_loss(&batch.anchor, &batch.text, w.weighting)?;
    let total = ((&contrastive * w.alpha_contrastive)? + (&mse * w.alpha_mse)?)?;
    Ok(Stage1Loss {
        total,
        contrastive,
        mse,
    })
}

/// Noise-prediction loss `‖ε − ε_θ(z_t, t)‖²` per example, averaged over the
/// batch, with `z_t` formed from `(z0, t, noise)` by the forward process.
pub fn ddpm_loss<F>(
    model: F,
    z0: &Tensor,
    t: &[usize],
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor>
where
    F: FnOnce(&Tensor, &[usize]) -> Result<Tensor>,
{
    let zt = schedule.add_noise(z0, t, noise)?;
    let pred = model(&zt, t)?;
    noise_mse(&pred, noise)
}

/// Per-example squared norm of `pred − target`, averaged over the batch.
pub fn noise_mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(arg_err!("prediction {:?} vs target {:?}", pred.dims(), target.dims()));
    }
    let bsz = pred.dim(0)?;
    Ok((pred - target)?.sqr()?.reshape((bsz, ()))?.sum(1)?.mean(0)?)
}

/// Class-aware contrastive loss over a `(B, B)` score matrix whose diagonal
/// holds the positive pairs; off-diagonal entries that share the anchor's
/// label are excluded from the denominator.
pub fn masked_infonce(scores: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, b2) = scores.dims2()?;
    if b != b2 || labels.len() != b {
        return Err(arg_err!("scores must be square and match the labels"));
    }
    let mut mask = vec![0f32; b * b];
    for i in 0..b {
        for j in 0..b {
            if i != j && labels[i] == labels[j] {
                mask[i * b + j] = -1e9;
            }
        }
    }
    let mask = Tensor::from_vec(mask, (b, b), &Device::Cpu)?.to_dtype(scores.dtype())?;
    let masked = (scores + mask)?;
    let lse = logsumexp_keepdim(&masked, 1)?.squeeze(1)?;
    let diag = (scores * Tensor::eye(b, scores.dtype(), &Device::Cpu)?)?.sum(1)?;
    Ok((lse - diag)?.mean(0)?)
}
