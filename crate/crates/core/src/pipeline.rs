//! Training stages, generation, evaluation and ablations wired end to end.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::data::{
    augment, generate_dataset_with, image_batch, images_from_tensor, vocab_size, AudioClip,
    DatasetSplit, ImageSample, LogMel, MelConfig,
};
use crate::diffusion::{
    init_adapters_from_text_attention, trainable_partition, AdapterNorm, AdapterState,
    FeatureHooks, InsertionSet, NoiseSchedule, PartitionReport, TextEmbedder, UNet,
};
use crate::editing::{ddim_invert, pnp_edit, DiffusionTrajectory, InjectionConfig};
use crate::error::{arg_err, Error, Result};
use crate::losses::{ddpm_loss, stage1_loss, Stage1Batch};
use crate::metrics::{evaluate_embedded, train_eval_embedder, EmbedderItem, EvalEmbedder, EvalInputs, MetricsReport};
use crate::nn::{randn_tensor, scalar_value, tensor_to_vec_f64, Builder, ParamStore};
use crate::optim::{grad_norm, AdamW};
use crate::projector::{stack_embeddings, AudioEmbedding, AudioFeaturizer, AudioProjector};
use crate::sampling::{
    ddim_sample_hooked, initial_noise, null_conditioning_dropout, Conditioning, Denoiser,
    GuidanceConfig,
};

/// A dataset split with its frozen audio embeddings.
pub struct Prepared {
    pub split: DatasetSplit,
    pub train_audio: Vec<AudioEmbedding>,
    pub val_audio: Vec<AudioEmbedding>,
}

pub fn featurize<'a>(
    clips: impl IntoIterator<Item = &'a AudioClip>,
    mel: &MelConfig,
    d_audio: usize,
) -> Result<Vec<AudioEmbedding>> {
    let mut out = Vec::new();
    let mut cache: Option<(u32, LogMel)> = None;
    let featurizer = AudioFeaturizer::new(d_audio, mel.n_mels);
    for clip in clips {
        if cache.as_ref().map(|(sr, _)| *sr) != Some(clip.sample_rate) {
            cache = Some((clip.sample_rate, LogMel::new(*mel, clip.sample_rate)?));
        }
        let lm = &cache.as_ref().expect("set above").1;
        out.push(featurizer.encode(&lm.compute(clip)?)?);
    }
    Ok(out)
}

impl Prepared {
    pub fn new(split: DatasetSplit, cfg: &RunConfig) -> Result<Self> {
        let d = cfg.model.projector.d_audio;
        let train_audio = featurize(split.train.iter().map(|e| &e.audio), &cfg.audio.mel, d)?;
        let val_audio = featurize(split.val.iter().map(|e| &e.audio), &cfg.audio.mel, d)?;
        Ok(Self {
            split,
            train_audio,
            val_audio,
        })
    }

    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        Self::new(generate_dataset_with(&cfg.data)?, cfg)
    }

    pub fn n_classes(&self) -> usize {
        self.split.class_names.len()
    }
}

/// Per-step training values; the first column is the step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LossLog {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Appends a row; non-finite values abort training.
    pub fn push(&mut self, step: usize, values: &[f64]) -> Result<()> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{} became {} at step {step}",
                self.columns[i], values[i]
            )));
        }
        let mut row = vec![step as f64];
        row.extend_from_slice(values);
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)? + 1;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(i, v)| if i == 0 { format!("{}", *v as usize) } else { format!("{v}") })
                .collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean of the first and last `n` values of a log column.
pub fn head_tail_means(values: &[f64], n: usize) -> (f64, f64) {
    let n = n.min(values.len());
    (mean(&values[..n]), mean(&values[values.len() - n..]))
}

/// Epoch-wise shuffled index stream.
struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next(&mut self, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn text_embedder(b: &Builder, cfg: &RunConfig) -> Result<TextEmbedder> {
    TextEmbedder::new(
        &b.pp("text"),
        vocab_size(cfg.data.n_classes),
        cfg.model.text_tokens,
        cfg.model.unet.context_dim,
    )
}

fn backbone_tensors(ck: &Checkpoint) -> Result<HashMap<String, Tensor>> {
    if !ck.has_group("backbone") || !ck.has_group("text") {
        return Err(Error::Config("checkpoint has no backbone parameters".into()));
    }
    let mut m = ck.group("backbone");
    m.extend(ck.group("text"));
    Ok(m)
}

/// Frozen backbone, caption embedder and their combined parameter store.
fn frozen_backbone(ck: &Checkpoint, cfg: &RunConfig) -> Result<(UNet, TextEmbedder, ParamStore)> {
    let b = Builder::load(backbone_tensors(ck)?, DType::F32, false);
    let schedule = NoiseSchedule::new(cfg.model.schedule)?;
    let unet = UNet::new(&b.pp("backbone"), &cfg.model.unet)?.with_noise_skip(schedule.alpha_bars());
    let text = text_embedder(&b, cfg)?;
    Ok((unet, text, b.store()))
}

fn augmented_batch(data: &Prepared, idx: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
    let imgs: Vec<ImageSample> = idx
        .iter()
        .map(|&i| augment(&data.split.train[i].image, &mut *rng))
        .collect();
    let refs: Vec<&ImageSample> = imgs.iter().collect();
    image_batch(&refs, DType::F32)
}

fn linear_warmup(step: usize, warmup: usize, lr: f64) -> f64 {
    if step < warmup {
        lr * (step + 1) as f64 / warmup as f64
    } else {
        lr
    }
}

/// Text-conditioned denoising pretraining of the backbone and caption embedder.
pub fn train_backbone(cfg: &RunConfig, data: &Prepared) -> Result<(Checkpoint, LossLog)> {
    cfg.validate()?;
    let c = &cfg.backbone;
    let b = Builder::init(c.seed, DType::F32, true);
    let schedule = NoiseSchedule::new(cfg.model.schedule)?;
    let unet = UNet::new(&b.pp("backbone"), &cfg.model.unet)?.with_noise_skip(schedule.alpha_bars());
    let text = text_embedder(&b, cfg)?;
    let store = b.store();
    let mut opt = AdamW::new(store.vars(), cfg.optim.with_lr(c.lr))?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut sampler = EpochSampler::new(data.split.train.len());
    let mut log = LossLog::new(&["loss"]);
    let warmup = (c.steps / 20).max(1);
    for step in 0..c.steps {
        opt.set_lr(linear_warmup(step, warmup, c.lr));
        let idx = sampler.next(c.batch, &mut rng);
        let x = augmented_batch(data, &idx, &mut rng)?;
        let captions: Vec<&[u32]> = idx
            .iter()
            .map(|&i| {
                if rng.random_bool(c.text_dropout) {
                    &[][..]
                } else {
                    data.split.train[i].caption_tokens.as_slice()
                }
            })
            .collect();
        let ctx = text.forward(&captions)?;
        let t: Vec<usize> = idx.iter().map(|_| rng.random_range(0..schedule.len())).collect();
        let noise = randn_tensor(x.dims(), &mut rng, DType::F32)?;
        let loss = ddpm_loss(
            |z, t| unet.forward(z, t, &ctx, None, None, None),
            &x,
            &t,
            &noise,
            &schedule,
        )?;
        log.push(step, &[scalar_value(&loss)?])?;
        opt.step(&loss.backward()?)?;
    }
    let mut ck = Checkpoint::new(Stage::Backbone, cfg.clone(), c.steps);
    ck.add_params(&store)?;
    ck.add_optimizer("backbone", opt.state()?);
    Ok((ck, log))
}

/// Projected tokens of every embedding, flattened to `K * C` per row.
pub fn projected_rows(projector: &AudioProjector, embs: &[AudioEmbedding]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(embs.len());
    for chunk in embs.chunks(128) {
        let refs: Vec<&AudioEmbedding> = chunk.iter().collect();
        let tokens = projector.forward(&stack_embeddings(&refs, DType::F32)?)?.detach();
        let n = chunk.len();
        let flat = tensor_to_vec_f64(&tokens)?;
        let d = flat.len() / n;
        out.extend((0..n).map(|i| flat[i * d..(i + 1) * d].to_vec()));
    }
    Ok(out)
}

/// Nearest-centroid classification of validation tokens against class means
/// of training tokens. Ties go to the lowest class index.
pub fn nearest_centroid_accuracy(
    train: &[Vec<f64>],
    train_labels: &[usize],
    val: &[Vec<f64>],
    val_labels: &[usize],
    n_classes: usize,
) -> Result<f64> {
    if train.is_empty() || val.is_empty() || train.len() != train_labels.len() || val.len() != val_labels.len() {
        return Err(arg_err!("centroid probe needs aligned, non-empty sets"));
    }
    let d = train[0].len();
    let mut sums = vec![vec![0.0; d]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (x, &l) in train.iter().zip(train_labels) {
        if l >= n_classes {
            return Err(arg_err!("label {l} outside [0, {n_classes})"));
        }
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(x) {
            *s += v;
        }
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    let mut correct = 0;
    for (x, &l) in val.iter().zip(val_labels) {
        let mut best = (f64::INFINITY, 0);
        for (k, c) in centroids.iter().enumerate() {
            if let Some(c) = c {
                let dist: f64 = x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, k);
                }
            }
        }
        correct += usize::from(best.1 == l);
    }
    Ok(correct as f64 / val.len() as f64)
}

pub fn centroid_accuracy(projector: &AudioProjector, data: &Prepared) -> Result<f64> {
    let train = projected_rows(projector, &data.train_audio)?;
    let val = projected_rows(projector, &data.val_audio)?;
    let tl: Vec<usize> = data.split.train.iter().map(|e| e.class_id).collect();
    let vl: Vec<usize> = data.split.val.iter().map(|e| e.class_id).collect();
    nearest_centroid_accuracy(&train, &tl, &val, &vl, data.n_classes())
}

#[derive(Debug, Clone)]
pub struct Stage1Report {
    /// Columns: total, contrastive, mse.
    pub log: LossLog,
    pub centroid_accuracy: f64,
}

fn class_index(data: &Prepared) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); data.n_classes()];
    for (i, e) in data.split.train.iter().enumerate() {
        by_class[e.class_id].push(i);
    }
    by_class
}

/// Contrastive + MSE alignment of the audio projector to the frozen caption tokens.
pub fn train_stage1(cfg: &RunConfig, data: &Prepared, backbone: &Checkpoint) -> Result<(Checkpoint, Stage1Report)> {
    cfg.validate()?;
    let s1 = &cfg.stage1;
    let fb = Builder::load(backbone_tensors(backbone)?, DType::F32, false);
    let text = text_embedder(&fb, cfg)?;
    let pb = Builder::init(s1.seed, DType::F32, true);
    let projector = AudioProjector::new(&pb.pp("projector"), cfg.model.projector)?;
    let pstore = pb.store();
    let mut opt = AdamW::new(pstore.vars(), cfg.optim.with_lr(s1.lr))?;
    let weights = s1.loss_weights();
    let by_class = class_index(data);
    let mut rng = ChaCha8Rng::seed_from_u64(s1.seed);
    let mut sampler = EpochSampler::new(data.split.train.len());
    let mut log = LossLog::new(&["total", "contrastive", "mse"]);
    let steps = if s1.enabled { s1.steps } else { 0 };
    let (k, ch) = (cfg.model.projector.tokens, cfg.model.projector.channels);
    for step in 0..steps {
        let anchors = sampler.next(s1.batch, &mut rng);
        let mut positives = Vec::with_capacity(anchors.len());
        let mut negatives = Vec::with_capacity(anchors.len() * s1.negatives);
        for &a in &anchors {
            let cls = data.split.train[a].class_id;
            let same: Vec<usize> = by_class[cls].iter().copied().filter(|&i| i != a).collect();
            positives.push(*same.choose(&mut rng).ok_or_else(|| arg_err!("class {cls} has a single example"))?);
            let others: Vec<usize> = by_class
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != cls)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            if others.len() < s1.negatives {
                return Err(arg_err!("only {} negatives available, {} requested", others.len(), s1.negatives));
            }
            negatives.extend(others.choose_multiple(&mut rng, s1.negatives).copied());
        }
        let all: Vec<&AudioEmbedding> = anchors
            .iter()
            .chain(&positives)
            .chain(&negatives)
            .map(|&i| &data.train_audio[i])
            .collect();
        let tokens = projector.forward(&stack_embeddings(&all, DType::F32)?)?;
        let bsz = anchors.len();
        let captions: Vec<&[u32]> = anchors
            .iter()
            .map(|&i| data.split.train[i].caption_tokens.as_slice())
            .collect();
        let batch = Stage1Batch {
            anchor: tokens.narrow(0, 0, bsz)?,
            positive: tokens.narrow(0, bsz, bsz)?,
            negatives: tokens
                .narrow(0, 2 * bsz, bsz * s1.negatives)?
                .reshape((bsz, s1.negatives, k, ch))?,
            text: text.forward(&captions)?,
        };
        let loss = stage1_loss(&batch, &weights)?;
        log.push(
            step,
            &[
                scalar_value(&loss.total)?,
                scalar_value(&loss.contrastive)?,
                scalar_value(&loss.mse)?,
            ],
        )?;
        opt.step(&loss.total.backward()?)?;
    }
    let centroid = centroid_accuracy(&projector, data)?;
    let mut ck = Checkpoint::new(Stage::Projector, cfg.clone(), steps);
    ck.tensors.extend(backbone_tensors(backbone)?);
    ck.add_params(&pstore)?;
    ck.add_optimizer("projector", opt.state()?);
    Ok((
        ck,
        Stage1Report {
            log,
            centroid_accuracy: centroid,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct Stage2Report {
    /// Columns: loss, dropped (fraction of nulled audio in the batch).
    pub log: LossLog,
    pub gammas: Vec<(usize, f64)>,
    pub backbone_fingerprint_before: u64,
    pub backbone_fingerprint_after: u64,
    /// Gradient norms at the final step.
    pub adapter_grad_norm: f64,
    pub projector_grad_norm: f64,
    pub partition: PartitionReport,
}

/// Denoising training of the gated adapters (and the projector at a lower
/// rate) on the frozen backbone with null captions and null-audio dropout.
pub fn train_stage2(cfg: &RunConfig, data: &Prepared, stage1: &Checkpoint) -> Result<(Checkpoint, Stage2Report)> {
    cfg.validate()?;
    let s2 = &cfg.stage2;
    if !stage1.has_group("projector") {
        return Err(Error::Config("stage-2 needs a checkpoint with projector parameters".into()));
    }
    let (unet, text, frozen) = frozen_backbone(stage1, cfg)?;
    let fp_before = frozen.fingerprint()?;
    let pb = Builder::load(stage1.group("projector"), DType::F32, s2.train_projector);
    let projector = AudioProjector::new(&pb.pp("projector"), cfg.model.projector)?;
    let pstore = pb.store();
    let ab = Builder::init(s2.seed, DType::F32, true);
    let adapters = init_adapters_from_text_attention(
        &unet,
        s2.insertion_set,
        cfg.model.projector.channels,
        cfg.model.adapter_ff_mult,
        &ab.pp("adapters"),
    )?;
    let avars = adapters.params().vars();
    let pvars = pstore.vars();
    let mut opt_a = AdamW::new(avars.clone(), cfg.optim.with_lr(s2.adapter_lr))?;
    let mut opt_p = if s2.train_projector {
        Some(AdamW::new(pvars.clone(), cfg.optim.with_lr(s2.projector_lr))?)
    } else {
        None
    };
    let schedule = NoiseSchedule::new(cfg.model.schedule)?;
    let null_text = text.null_tokens()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s2.seed);
    let mut sampler = EpochSampler::new(data.split.train.len());
    let mut log = LossLog::new(&["loss", "dropped"]);
    let (mut a_norm, mut p_norm) = (0.0, 0.0);
    for step in 0..s2.steps {
        let idx = sampler.next(s2.batch, &mut rng);
        let x = augmented_batch(data, &idx, &mut rng)?;
        let embs: Vec<AudioEmbedding> = idx.iter().map(|&i| data.train_audio[i].clone()).collect();
        let (embs, mask) = null_conditioning_dropout(&embs, s2.null_dropout, &mut rng)?;
        let refs: Vec<&AudioEmbedding> = embs.iter().collect();
        let audio = projector.forward(&stack_embeddings(&refs, DType::F32)?)?;
        let ctx = null_text.unsqueeze(0)?.repeat((idx.len(), 1, 1))?;
        let t: Vec<usize> = idx.iter().map(|_| rng.random_range(0..schedule.len())).collect();
        let noise = randn_tensor(x.dims(), &mut rng, DType::F32)?;
        let loss = ddpm_loss(
            |z, t| unet.forward(z, t, &ctx, Some(&audio), Some(&adapters), None),
            &x,
            &t,
            &noise,
            &schedule,
        )?;
        let dropped = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        log.push(step, &[scalar_value(&loss)?, dropped])?;
        let grads = loss.backward()?;
        if step + 1 == s2.steps {
            a_norm = grad_norm(&avars, &grads)?;
            p_norm = grad_norm(&pvars, &grads)?;
        }
        opt_a.step(&grads)?;
        if let Some(o) = opt_p.as_mut() {
            o.step(&grads)?;
        }
    }
    let fp_after = frozen.fingerprint()?;
    let partition = trainable_partition(&frozen, adapters.params(), &pstore);
    let mut ck = Checkpoint::new(Stage::Adapters, cfg.clone(), s2.steps);
    ck.add_params(&frozen)?;
    ck.add_params(&pstore)?;
    ck.add_params(adapters.params())?;
    ck.add_optimizer("adapters", opt_a.state()?);
    if let Some(o) = &opt_p {
        ck.add_optimizer("projector", o.state()?);
    }
    ck.insertion_set = Some(s2.insertion_set);
    ck.partition = Some(partition.clone());
    Ok((
        ck,
        Stage2Report {
            log,
            gammas: adapters.gammas()?,
            backbone_fingerprint_before: fp_before,
            backbone_fingerprint_after: fp_after,
            adapter_grad_norm: a_norm,
            projector_grad_norm: p_norm,
            partition,
        },
    ))
}

/// Frozen models for inference, rebuilt from a checkpoint of any stage.
pub struct Models {
    pub config: RunConfig,
    pub unet: UNet,
    pub text: TextEmbedder,
    pub projector: Option<AudioProjector>,
    pub adapters: Option<AdapterState>,
    pub schedule: NoiseSchedule,
}

impl Models {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.config.clone();
        let (unet, text, _) = frozen_backbone(ck, &cfg)?;
        let projector = if ck.has_group("projector") {
            let b = Builder::load(ck.group("projector"), DType::F32, false);
            Some(AudioProjector::new(&b.pp("projector"), cfg.model.projector)?)
        } else {
            None
        };
        let adapters = match (ck.has_group("adapters"), ck.insertion_set) {
            (true, Some(set)) => {
                let b = Builder::load(ck.group("adapters"), DType::F32, false);
                Some(init_adapters_from_text_attention(
                    &unet,
                    set,
                    cfg.model.projector.channels,
                    cfg.model.adapter_ff_mult,
                    &b.pp("adapters"),
                )?)
            }
            (true, None) => return Err(Error::Config("adapter checkpoint lacks an insertion set".into())),
            _ => None,
        };
        Ok(Self {
            schedule: NoiseSchedule::new(cfg.model.schedule)?,
            config: cfg,
            unet,
            text,
            projector,
            adapters,
        })
    }

    pub fn projector(&self) -> Result<&AudioProjector> {
        self.projector
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no audio projector".into()))
    }

    /// Adapters with the guidance config's audio strengths applied.
    pub fn adapters_for(&self, guidance: &GuidanceConfig) -> Option<AdapterState> {
        self.adapters.as_ref().map(|a| {
            let mut a = a.with_beta(guidance.beta);
            a.site_beta = guidance.site_beta.clone();
            a
        })
    }

    /// `(B, K, C)` audio tokens.
    pub fn audio_tokens(&self, embs: &[&AudioEmbedding]) -> Result<Tensor> {
        Ok(self.projector()?.forward(&stack_embeddings(embs, DType::F32)?)?.detach())
    }

    /// Conditioning for a batch. Missing captions use the null caption;
    /// audio is only attached when the checkpoint has adapters.
    pub fn conditioning(&self, audio: Option<&[&AudioEmbedding]>, captions: Option<&[&[u32]]>, batch: usize) -> Result<Conditioning> {
        let null_text = self.text.null_tokens()?;
        let text = match captions {
            Some(c) => {
                if c.len() != batch {
                    return Err(arg_err!("{} captions for a batch of {batch}", c.len()));
                }
                self.text.forward(c)?
            }
            None => null_text.unsqueeze(0)?.repeat((batch, 1, 1))?,
        };
        let (audio, null_audio) = match (audio, &self.adapters) {
            (Some(a), Some(_)) => {
                if a.len() != batch {
                    return Err(arg_err!("{} audio clips for a batch of {batch}", a.len()));
                }
                (Some(self.audio_tokens(a)?), Some(self.projector()?.null_tokens()?.0))
            }
            (Some(_), None) => return Err(Error::Config("audio conditioning needs a checkpoint with adapters".into())),
            (None, _) => (None, None),
        };
        Ok(Conditioning {
            text,
            audio,
            null_text,
            null_audio,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    /// `(B, 3, S, S)` in `[-1, 1]` before clamping.
    pub images: Tensor,
    pub adapter_norms: Vec<AdapterNorm>,
}

/// What to condition a generation batch on.
#[derive(Clone, Copy, Default)]
pub struct GenerationRequest<'a> {
    pub audio: Option<&'a [&'a AudioEmbedding]>,
    pub captions: Option<&'a [&'a [u32]]>,
    pub batch: usize,
    pub seed: u64,
    pub log_adapter_norms: bool,
}

/// DDIM sampling with guidance, in chunks of at most `chunk` items.
/// Starting noise depends only on the seed and the item index.
pub fn generate(models: &Models, req: &GenerationRequest<'_>, guidance: &GuidanceConfig, chunk: usize) -> Result<Generated> {
    guidance.validate()?;
    let n = req.batch;
    let size = models.config.model.unet.image_size;
    let z_all = initial_noise(req.seed, n, size, DType::F32)?;
    let adapters = models.adapters_for(guidance);
    let model = Denoiser {
        unet: &models.unet,
        adapters: adapters.as_ref(),
    };
    let mut outs = Vec::new();
    let mut norms = Vec::new();
    let chunk = chunk.max(1);
    for start in (0..n).step_by(chunk) {
        let len = chunk.min(n - start);
        let audio = req.audio.map(|a| &a[start..start + len]);
        let captions = req.captions.map(|c| &c[start..start + len]);
        let cond = models.conditioning(audio, captions, len)?;
        let log = req.log_adapter_norms;
        let out = ddim_sample_hooked(
            &model,
            &z_all.narrow(0, start, len)?,
            &cond,
            guidance,
            &models.schedule,
            req.seed.wrapping_add(start as u64),
            false,
            &mut |_, _| {
                log.then(|| FeatureHooks {
                    log_adapter_norms: true,
                    ..Default::default()
                })
            },
        )?;
        norms.extend(out.adapter_norms());
        outs.push(out.z0);
    }
    let images = Tensor::cat(&outs, 0)?;
    if images.flatten_all()?.to_vec1::<f32>()?.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("generated images contain non-finite values".into()));
    }
    Ok(Generated {
        images,
        adapter_norms: norms,
    })
}

/// Trains the evaluation embedder on a held-out split drawn with an offset seed.
pub fn train_embedder(cfg: &RunConfig) -> Result<(EvalEmbedder, Vec<f64>)> {
    let mut params = cfg.data;
    params.seed = params.seed.wrapping_add(cfg.eval.embedder_seed_offset);
    let held = generate_dataset_with(&params)?;
    let examples: Vec<_> = held.train.iter().chain(&held.val).collect();
    let audio = featurize(examples.iter().map(|e| &e.audio), &cfg.audio.mel, cfg.model.projector.d_audio)?;
    let items: Vec<EmbedderItem<'_>> = examples
        .iter()
        .zip(&audio)
        .map(|(e, a)| EmbedderItem {
            image: &e.image,
            audio: a,
            class_id: e.class_id,
        })
        .collect();
    train_eval_embedder(
        &items,
        &cfg.eval.embedder,
        cfg.data.image_size,
        vocab_size(cfg.data.n_classes),
        cfg.data.n_classes,
    )
}

/// Embedder parameters under the `embedder.` group.
pub fn embedder_checkpoint(cfg: &RunConfig, embedder: &EvalEmbedder) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(Stage::Embedder, cfg.clone(), cfg.eval.embedder.steps);
    for (name, t) in embedder.params().to_tensors()? {
        ck.tensors.insert(format!("embedder.{name}"), t);
    }
    Ok(ck)
}

pub fn load_embedder(ck: &Checkpoint) -> Result<EvalEmbedder> {
    if !ck.has_group("embedder") {
        return Err(Error::Config("checkpoint has no embedder parameters".into()));
    }
    let tensors = ck
        .group("embedder")
        .into_iter()
        .map(|(k, v)| (k["embedder.".len()..].to_string(), v))
        .collect();
    let cfg = &ck.config;
    EvalEmbedder::new(
        &Builder::load(tensors, DType::F32, false),
        &cfg.eval.embedder,
        cfg.data.image_size,
        cfg.model.projector.d_audio,
        vocab_size(cfg.data.n_classes),
        cfg.data.n_classes,
    )
}

/// Validation items used for generation: the first `per_class` of each class.
pub fn evaluation_indices(data: &Prepared, per_class: usize) -> Vec<usize> {
    let mut taken = vec![0usize; data.n_classes()];
    let mut out = Vec::new();
    for (i, e) in data.split.val.iter().enumerate() {
        if taken[e.class_id] < per_class {
            taken[e.class_id] += 1;
            out.push(i);
        }
    }
    out
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub ids: Vec<String>,
    pub images: Vec<ImageSample>,
    pub adapter_norms: Vec<AdapterNorm>,
}

/// Embeds generated images and their references and computes all metrics.
pub fn score_images(
    embedder: &EvalEmbedder,
    data: &Prepared,
    indices: &[usize],
    images: &[ImageSample],
    ids: &[String],
) -> Result<MetricsReport> {
    let labels: Vec<usize> = indices.iter().map(|&i| data.split.val[i].class_id).collect();
    let gen_refs: Vec<&ImageSample> = images.iter().collect();
    let gt_refs: Vec<&ImageSample> = indices.iter().map(|&i| &data.split.val[i].image).collect();
    let cond_refs: Vec<&AudioEmbedding> = indices.iter().map(|&i| &data.val_audio[i]).collect();
    let val_img: Vec<&ImageSample> = data.split.val.iter().map(|e| &e.image).collect();
    let val_aud: Vec<&AudioEmbedding> = data.val_audio.iter().collect();
    let generated = embedder.embed_images(&gen_refs)?;
    let cond_audio = embedder.embed_audio(&cond_refs)?;
    let ground_truth = embedder.embed_images(&gt_refs)?;
    let val_audio = embedder.embed_audio(&val_aud)?;
    let val_images = embedder.embed_images(&val_img)?;
    let prototypes = embedder.prototypes()?;
    evaluate_embedded(&EvalInputs {
        ids,
        generated: &generated,
        labels: &labels,
        cond_audio: &cond_audio,
        ground_truth: &ground_truth,
        val_audio: &val_audio,
        val_images: &val_images,
        prototypes: &prototypes,
    })
}

/// Audio-conditioned generation for validation clips, scored with `embedder`.
pub fn evaluate_generation(models: &Models, data: &Prepared, embedder: &EvalEmbedder) -> Result<Evaluation> {
    let cfg = &models.config;
    let indices = evaluation_indices(data, cfg.eval.per_class);
    let audio: Vec<&AudioEmbedding> = indices.iter().map(|&i| &data.val_audio[i]).collect();
    let out = generate(
        models,
        &GenerationRequest {
            audio: Some(&audio),
            captions: None,
            batch: indices.len(),
            seed: cfg.eval.seed,
            log_adapter_norms: true,
        },
        &cfg.sampler,
        64,
    )?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.split.val[i].class_id).collect();
    let images = images_from_tensor(&out.images, &labels)?;
    let ids: Vec<String> = indices.iter().map(|i| format!("val_{i:05}")).collect();
    let report = score_images(embedder, data, &indices, &images, &ids)?;
    Ok(Evaluation {
        report,
        ids,
        images,
        adapter_norms: out.adapter_norms,
    })
}

/// Inverts `images` under the null pair and regenerates them with plug-and-play
/// injection under `audio`. Returns the edited batch and the trajectory.
pub fn edit_images(
    models: &Models,
    images: &[&ImageSample],
    audio: &[&AudioEmbedding],
    inj: &InjectionConfig,
    guidance: &GuidanceConfig,
) -> Result<(Tensor, DiffusionTrajectory)> {
    let x = image_batch(images, DType::F32)?;
    let adapters = models.adapters_for(guidance);
    let model = Denoiser {
        unet: &models.unet,
        adapters: adapters.as_ref(),
    };
    let cond = models.conditioning(Some(audio), None, images.len())?;
    let traj = ddim_invert(&x, &model, &cond, guidance.steps, &models.schedule, inj)?;
    let edited = pnp_edit(&traj, &model, &cond, inj, guidance, &models.schedule)?;
    Ok((edited, traj))
}

/// Configuration variants compared by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    NoContrastive,
    NoMse,
    NoStage1,
    FrozenProjector,
    SingleToken,
    Sites(InsertionSet),
}

impl Ablation {
    /// Every variant that differs from the full configuration.
    pub const VARIANTS: [Ablation; 7] = [
        Ablation::NoContrastive,
        Ablation::NoMse,
        Ablation::NoStage1,
        Ablation::FrozenProjector,
        Ablation::SingleToken,
        Ablation::Sites(InsertionSet::Decoder6To11),
        Ablation::Sites(InsertionSet::All),
    ];

    pub fn name(&self) -> String {
        match self {
            Ablation::Full => "full".into(),
            Ablation::NoContrastive => "no-contrastive".into(),
            Ablation::NoMse => "no-mse".into(),
            Ablation::NoStage1 => "no-stage1".into(),
            Ablation::FrozenProjector => "frozen-projector".into(),
            Ablation::SingleToken => "single-token".into(),
            Ablation::Sites(s) => format!("sites-{s}"),
        }
    }

    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoContrastive => c.stage1.alpha_contrastive = 0.0,
            Ablation::NoMse => c.stage1.alpha_mse = 0.0,
            Ablation::NoStage1 => c.stage1.enabled = false,
            Ablation::FrozenProjector => c.stage2.train_projector = false,
            Ablation::SingleToken => c.model.projector.tokens = 1,
            Ablation::Sites(s) => c.stage2.insertion_set = *s,
        }
        c
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(Ablation::Full)
            .chain(Ablation::VARIANTS)
            .find(|a| a.name() == s)
            .ok_or_else(|| arg_err!("unknown ablation {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub centroid_accuracy: f64,
    pub stage1_final_loss: Option<f64>,
    pub stage2_final_loss: f64,
    pub mean_abs_gamma: f64,
    pub ais: f64,
    pub aic: f64,
    pub iis: f64,
    pub fid: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| variant | centroid acc | stage-1 loss | stage-2 loss | mean abs gamma | AIS | AIC | IIS | FID |\n|---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let s1 = r.stage1_final_loss.map_or("-".to_string(), |v| format!("{v:.4}"));
            s.push_str(&format!(
                "| {} | {:.3} | {} | {:.2} | {:.4} | {:.3} | {:.3} | {:.3} | {:.4} |\n",
                r.name, r.centroid_accuracy, s1, r.stage2_final_loss, r.mean_abs_gamma, r.ais, r.aic, r.iis, r.fid
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,centroid_accuracy,stage1_final_loss,stage2_final_loss,mean_abs_gamma,ais,aic,iis,fid,seconds\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.name,
                r.centroid_accuracy,
                r.stage1_final_loss.map_or(String::new(), |v| v.to_string()),
                r.stage2_final_loss,
                r.mean_abs_gamma,
                r.ais,
                r.aic,
                r.iis,
                r.fid,
                r.seconds
            ));
        }
        s
    }
}

/// Everything produced by stage 1, stage 2 and evaluation of one configuration.
pub struct AdapterRun {
    pub stage1: Checkpoint,
    pub stage1_report: Stage1Report,
    pub stage2: Checkpoint,
    pub stage2_report: Stage2Report,
    pub models: Models,
    pub evaluation: Evaluation,
    pub timings: BTreeMap<String, f64>,
}

/// Stage 1, stage 2 and evaluation on top of a trained backbone.
pub fn run_adapter_stages(cfg: &RunConfig, data: &Prepared, backbone: &Checkpoint, embedder: &EvalEmbedder) -> Result<AdapterRun> {
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let (stage1, stage1_report) = train_stage1(cfg, data, backbone)?;
    timings.insert("stage1".into(), t.elapsed().as_secs_f64());
    let t = Instant::now();
    let (stage2, stage2_report) = train_stage2(cfg, data, &stage1)?;
    timings.insert("stage2".into(), t.elapsed().as_secs_f64());
    let t = Instant::now();
    let models = Models::from_checkpoint(&stage2)?;
    let evaluation = evaluate_generation(&models, data, embedder)?;
    timings.insert("evaluate".into(), t.elapsed().as_secs_f64());
    Ok(AdapterRun {
        stage1,
        stage1_report,
        stage2,
        stage2_report,
        models,
        evaluation,
        timings,
    })
}

impl AdapterRun {
    pub fn row(&self, name: &str) -> AblationRow {
        let s1 = self.stage1_report.log.column("total").filter(|v| !v.is_empty());
        let s2 = self.stage2_report.log.column("loss").unwrap_or_default();
        let g = &self.stage2_report.gammas;
        let r = &self.evaluation.report;
        AblationRow {
            name: name.to_string(),
            centroid_accuracy: self.stage1_report.centroid_accuracy,
            stage1_final_loss: s1.map(|v| head_tail_means(&v, 20).1),
            stage2_final_loss: head_tail_means(&s2, 50).1,
            mean_abs_gamma: g.iter().map(|(_, v)| v.abs()).sum::<f64>() / g.len().max(1) as f64,
            ais: r.ais,
            aic: r.aic,
            iis: r.iis,
            fid: r.fid,
            seconds: self.timings.values().sum(),
        }
    }
}

/// Runs the full configuration followed by every requested variant.
pub fn run_ablations(
    cfg: &RunConfig,
    data: &Prepared,
    backbone: &Checkpoint,
    embedder: &EvalEmbedder,
    variants: &[Ablation],
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for v in variants {
        let run = run_adapter_stages(&v.apply(cfg), data, backbone, embedder)?;
        table.rows.push(run.row(&v.name()));
    }
    Ok(table)
}

/// The complete pipeline from a prepared dataset.
pub struct PipelineOutcome {
    pub backbone: Checkpoint,
    pub backbone_log: LossLog,
    pub embedder: EvalEmbedder,
    pub run: AdapterRun,
    pub timings: BTreeMap<String, f64>,
}

impl PipelineOutcome {
    pub fn total_seconds(&self) -> f64 {
        self.timings.values().sum()
    }
}

pub fn run_pipeline(cfg: &RunConfig, data: &Prepared) -> Result<PipelineOutcome> {
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let (backbone, backbone_log) = train_backbone(cfg, data)?;
    timings.insert("backbone".to_string(), t.elapsed().as_secs_f64());
    let t = Instant::now();
    let (embedder, _) = train_embedder(cfg)?;
    timings.insert("embedder".to_string(), t.elapsed().as_secs_f64());
    let run = run_adapter_stages(cfg, data, &backbone, &embedder)?;
    timings.extend(run.timings.clone());
    Ok(PipelineOutcome {
        backbone,
        backbone_log,
        embedder,
        run,
        timings,
    })
}
