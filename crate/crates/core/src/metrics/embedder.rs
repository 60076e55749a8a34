use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, caption_tokens, image_batch, ImageSample};
use crate::error::{arg_err, Result};
use crate::losses::masked_infonce;
use crate::nn::{
    logsumexp_keepdim, randn_tensor, scalar_value, tensor_to_vec_f64, Builder, Embedding,
    Linear, ParamStore,
};
use crate::optim::{AdamW, AdamWParams};
use crate::projector::{stack_embeddings, AudioEmbedding};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub hidden: usize,
    /// Average-pooling window applied to images before the MLP.
    pub pool: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub temperature: f64,
    /// Std of Gaussian pixel noise added during training.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            hidden: 128,
            pool: 4,
            steps: 300,
            batch: 64,
            lr: 3e-3,
            temperature: 0.1,
            noise_std: 0.15,
            seed: 0,
        }
    }
}

/// Dual encoder (image, audio) with a caption pathway for class prototypes.
/// All outputs are L2-normalized.
pub struct EvalEmbedder {
    img1: Linear,
    img2: Linear,
    aud1: Linear,
    aud2: Linear,
    tok: Embedding,
    txt: Linear,
    pool: usize,
    n_classes: usize,
    store: ParamStore,
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, d) = t.dims2()?;
    let v = tensor_to_vec_f64(t)?;
    Ok((0..n).map(|i| v[i * d..(i + 1) * d].to_vec()).collect())
}

impl EvalEmbedder {
    pub fn new(
        b: &Builder,
        cfg: &EmbedderConfig,
        image_size: usize,
        d_audio: usize,
        vocab: usize,
        n_classes: usize,
    ) -> Result<Self> {
        if cfg.pool == 0 || image_size % cfg.pool != 0 {
            return Err(arg_err!("pool {} does not tile image size {image_size}", cfg.pool));
        }
        let pooled = 3 * (image_size / cfg.pool).pow(2);
        let this = Self {
            img1: Linear::new(&b.pp("image.fc1"), pooled, cfg.hidden, true)?,
            img2: Linear::new(&b.pp("image.fc2"), cfg.hidden, cfg.dim, true)?,
            aud1: Linear::new(&b.pp("audio.fc1"), d_audio, cfg.hidden, true)?,
            aud2: Linear::new(&b.pp("audio.fc2"), cfg.hidden, cfg.dim, true)?,
            tok: Embedding::new(&b.pp("text.tokens"), vocab, cfg.hidden)?,
            txt: Linear::new(&b.pp("text.fc"), cfg.hidden, cfg.dim, true)?,
            pool: cfg.pool,
            n_classes,
            store: ParamStore::new(),
        };
        Ok(Self {
            store: b.store(),
            ..this
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// `(B, 3, S, S)` -> `(B, dim)`.
    pub fn image_tensor(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.dim(0)?;
        let pooled = images.avg_pool2d(self.pool)?.reshape((b, ()))?;
        l2_normalize(&self.img2.forward(&self.img1.forward(&pooled)?.silu()?)?)
    }

    /// `(B, D_a)` -> `(B, dim)`.
    pub fn audio_tensor(&self, embs: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.aud2.forward(&self.aud1.forward(embs)?.silu()?)?)
    }

    /// Class prototypes from the caption of every class, `(M, dim)`.
    pub fn prototype_tensor(&self) -> Result<Tensor> {
        let mut protos = Vec::with_capacity(self.n_classes);
        for k in 0..self.n_classes {
            let ids = Tensor::new(caption_tokens(k).as_slice(), &Device::Cpu)?;
            protos.push(self.tok.forward(&ids)?.mean(0)?);
        }
        let pooled = Tensor::stack(&protos, 0)?;
        l2_normalize(&self.txt.forward(&pooled)?)
    }

    pub fn embed_images(&self, images: &[&ImageSample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            out.extend(rows(&self.image_tensor(&image_batch(chunk, DType::F32)?)?)?);
        }
        Ok(out)
    }

    pub fn embed_image_tensor(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        rows(&self.image_tensor(images)?)
    }

    pub fn embed_audio(&self, embs: &[&AudioEmbedding]) -> Result<Vec<Vec<f64>>> {
        rows(&self.audio_tensor(&stack_embeddings(embs, DType::F32)?)?)
    }

    pub fn prototypes(&self) -> Result<Vec<Vec<f64>>> {
        rows(&self.prototype_tensor()?)
    }
}

/// Cross-entropy of `(B, M)` logits against integer labels, averaged.
fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, m) = logits.dims2()?;
    let mut onehot = vec![0f32; b * m];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * m + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (b, m), &Device::Cpu)?.to_dtype(logits.dtype())?;
    let picked = (logits * onehot)?.sum(1)?;
    Ok((logsumexp_keepdim(logits, 1)?.squeeze(1)? - picked)?.mean(0)?)
}

/// One training item for the evaluation embedder.
pub struct EmbedderItem<'a> {
    pub image: &'a ImageSample,
    pub audio: &'a AudioEmbedding,
    pub class_id: usize,
}

/// Trains a fresh embedder with class-aware contrastive losses between images
/// and audio plus prototype classification of both. Returns the frozen
/// embedder and the per-step losses.
pub fn train_eval_embedder(
    items: &[EmbedderItem<'_>],
    cfg: &EmbedderConfig,
    image_size: usize,
    vocab: usize,
    n_classes: usize,
) -> Result<(EvalEmbedder, Vec<f64>)> {
    if items.len() < 2 {
        return Err(arg_err!("embedder training needs at least two items"));
    }
    if let Some(bad) = items.iter().find(|i| i.class_id >= n_classes) {
        return Err(arg_err!("class {} outside [0, {n_classes})", bad.class_id));
    }
    let d_audio = items[0].audio.dim();
    let b = Builder::init(cfg.seed, DType::F32, true);
    let model = EvalEmbedder::new(&b, cfg, image_size, d_audio, vocab, n_classes)?;
    let mut opt = AdamW::new(
        model.params().vars(),
        AdamWParams {
            lr: cfg.lr,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    let inv_t = 1.0 / cfg.temperature;
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let bsz = cfg.batch.min(items.len());
        if cursor + bsz > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bsz];
        cursor += bsz;
        let imgs: Vec<ImageSample> = idx.iter().map(|&i| augment(items[i].image, &mut rng)).collect();
        let img_refs: Vec<&ImageSample> = imgs.iter().collect();
        let mut x = image_batch(&img_refs, DType::F32)?;
        if cfg.noise_std > 0.0 {
            x = (&x + (randn_tensor(x.dims(), &mut rng, DType::F32)? * cfg.noise_std)?)?;
        }
        let auds: Vec<&AudioEmbedding> = idx.iter().map(|&i| items[i].audio).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| items[i].class_id).collect();

        let ei = model.image_tensor(&x)?;
        let ea = model.audio_tensor(&stack_embeddings(&auds, DType::F32)?)?;
        let ep = model.prototype_tensor()?;
        let s_ia = (ei.matmul(&ea.t()?)? * inv_t)?;
        let loss = (masked_infonce(&s_ia, &labels)? + masked_infonce(&s_ia.t()?, &labels)?)?;
        let loss = (loss + cross_entropy(&(ei.matmul(&ep.t()?)? * inv_t)?, &labels)?)?;
        let loss = (loss + cross_entropy(&(ea.matmul(&ep.t()?)? * inv_t)?, &labels)?)?;
        let grads = loss.backward()?;
        opt.step(&grads)?;
        losses.push(scalar_value(&loss)?);
    }
    // Rebuild frozen so evaluation builds no gradient graph.
    let frozen = Builder::load(
        model.params().to_tensors()?.into_iter().collect(),
        DType::F32,
        false,
    );
    let model = EvalEmbedder::new(&frozen, cfg, image_size, d_audio, vocab, n_classes)?;
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_uniform_logits() {
        let l = Tensor::zeros((3, 4), DType::F64, &Device::Cpu).unwrap();
        let v = scalar_value(&cross_entropy(&l, &[0, 1, 3]).unwrap()).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn outputs_are_unit_norm() {
        let b = Builder::init(0, DType::F32, false);
        let e = EvalEmbedder::new(&b, &EmbedderConfig::default(), 8, 6, 7, 3).unwrap();
        let protos = e.prototypes().unwrap();
        assert_eq!(protos.len(), 3);
        for p in protos {
            let n: f64 = p.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}
