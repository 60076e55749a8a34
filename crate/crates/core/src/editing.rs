//! Audio-guided editing by DDIM inversion and plug-and-play feature injection,
//! plus embedding interpolation and volume controls.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::AudioClip;
use crate::diffusion::{ddim_timesteps, FeatureHooks, NoiseSchedule, DECODER_BLOCKS};
use crate::error::{arg_err, Result};
use crate::projector::AudioEmbedding;
use crate::sampling::{ddim_sample_hooked, Conditioning, EpsModel, GuidanceConfig};

/// Which pass the injected features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RecordPass {
    /// A null-conditioned DDIM pass from the inverted `z_T` back to the image.
    #[default]
    Reconstruction,
    /// The inversion pass itself.
    Inversion,
}

/// Injection sites are decoder block indices (0..12).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionConfig {
    pub self_attention_sites: BTreeSet<usize>,
    pub residual_sites: BTreeSet<usize>,
    /// Fraction of sampling steps, from the start, with injection active.
    pub tau: f64,
    pub record_pass: RecordPass,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            self_attention_sites: (4..=11).collect(),
            residual_sites: [4].into(),
            tau: 0.8,
            record_pass: RecordPass::Reconstruction,
        }
    }
}

impl InjectionConfig {
    /// Residual injection widened to decoder blocks 4 to 6.
    pub fn rich() -> Self {
        Self {
            residual_sites: (4..=6).collect(),
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "rich" => Ok(Self::rich()),
            _ => Err(arg_err!("unknown injection preset {name:?} (default, rich)")),
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(arg_err!("injection fraction must lie in [0, 1], got {}", self.tau));
        }
        // Decoder blocks 0..=2 sit at the coarsest level and have no attention.
        if let Some(s) = self.self_attention_sites.iter().find(|&&s| !(3..DECODER_BLOCKS).contains(&s)) {
            return Err(arg_err!("decoder block {s} has no self-attention"));
        }
        if let Some(s) = self.residual_sites.iter().find(|&&s| s >= DECODER_BLOCKS) {
            return Err(arg_err!("decoder block {s} does not exist"));
        }
        Ok(())
    }

    /// Whether sampling step `step` of `steps` injects.
    pub fn active(&self, step: usize, steps: usize) -> bool {
        (step as f64) < self.tau * steps as f64
    }

    fn recording_hooks(&self) -> FeatureHooks {
        FeatureHooks {
            record_residual: self.residual_sites.clone(),
            record_attention: self.self_attention_sites.clone(),
            ..Default::default()
        }
    }
}

/// Inverted latents and the features recorded for injection.
#[derive(Debug, Clone)]
pub struct DiffusionTrajectory {
    /// `z_T, …, z_0` in sampling order; `z_0` is the source image.
    pub latents: Vec<Tensor>,
    /// Sampling-order timesteps (descending).
    pub timesteps: Vec<usize>,
    /// Per sampling step: decoder block -> residual branch output.
    pub residual: Vec<BTreeMap<usize, Tensor>>,
    /// Per sampling step: decoder block -> self-attention probabilities.
    pub attention: Vec<BTreeMap<usize, Tensor>>,
    /// Output of the null-conditioned pass from `z_T`, when it was run.
    pub reconstruction: Option<Tensor>,
}

impl DiffusionTrajectory {
    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn z_t(&self) -> &Tensor {
        &self.latents[0]
    }
}

/// Inverts `image` with deterministic DDIM under the null pair and unit guidance.
pub fn ddim_invert(
    image: &Tensor,
    model: &dyn EpsModel,
    cond: &Conditioning,
    steps: usize,
    schedule: &NoiseSchedule,
    inj: &InjectionConfig,
) -> Result<DiffusionTrajectory> {
    inj.validate()?;
    let b = image.dim(0)?;
    let null = cond.null(b)?;
    let sampling_order = ddim_timesteps(schedule.len(), steps)?;
    let mut ascending = sampling_order.clone();
    ascending.reverse();

    let mut z = image.detach();
    let mut latents = vec![z.clone()];
    let mut inv_hooks = Vec::new();
    for (i, &t) in ascending.iter().enumerate() {
        let t_from = if i == 0 { None } else { Some(ascending[i - 1]) };
        let mut hooks = (inj.record_pass == RecordPass::Inversion).then(|| inj.recording_hooks());
        let eps = model.predict(&z, &vec![t; b], &null.text, null.audio.as_ref(), hooks.as_mut())?;
        z = schedule.ddim_inverse_step(&z, &eps, t_from, t)?.detach();
        latents.push(z.clone());
        inv_hooks.extend(hooks);
    }
    latents.reverse();

    let (hooks, reconstruction) = match inj.record_pass {
        RecordPass::Reconstruction => {
            let cfg = GuidanceConfig::unguided(steps);
            let out = ddim_sample_hooked(
                model,
                &latents[0],
                &null,
                &cfg,
                schedule,
                0,
                false,
                &mut |_, _| Some(inj.recording_hooks()),
            )?;
            (out.hooks, Some(out.z0))
        }
        RecordPass::Inversion => {
            inv_hooks.reverse();
            (inv_hooks, None)
        }
    };
    let (residual, attention) = hooks.into_iter().map(|h| (h.residual, h.attention)).unzip();
    Ok(DiffusionTrajectory {
        latents,
        timesteps: sampling_order,
        residual,
        attention,
        reconstruction,
    })
}

/// Samples from the inverted `z_T` under `cond`, overwriting the configured
/// residual and self-attention features with recorded ones while injection is active.
pub fn pnp_edit(
    trajectory: &DiffusionTrajectory,
    model: &dyn EpsModel,
    cond: &Conditioning,
    inj: &InjectionConfig,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    inj.validate()?;
    let steps = trajectory.steps();
    if cfg.steps != steps || trajectory.residual.len() != steps || trajectory.attention.len() != steps {
        return Err(arg_err!(
            "trajectory has {steps} steps but the sampler is configured for {}",
            cfg.steps
        ));
    }
    let pick = |m: &BTreeMap<usize, Tensor>, sites: &BTreeSet<usize>| -> Result<BTreeMap<usize, Tensor>> {
        sites
            .iter()
            .map(|s| {
                m.get(s)
                    .map(|t| (*s, t.clone()))
                    .ok_or_else(|| arg_err!("trajectory has no recorded feature for decoder block {s}"))
            })
            .collect()
    };
    let mut err = None;
    let out = ddim_sample_hooked(model, trajectory.z_t(), cond, cfg, schedule, 0, false, &mut |i, _| {
        if !inj.active(i, steps) {
            return None;
        }
        let res = pick(&trajectory.residual[i], &inj.residual_sites);
        let att = pick(&trajectory.attention[i], &inj.self_attention_sites);
        match (res, att) {
            (Ok(r), Ok(a)) => Some(FeatureHooks {
                inject_residual: r,
                inject_attention: a,
                ..Default::default()
            }),
            (Err(e), _) | (_, Err(e)) => {
                err.get_or_insert(e);
                None
            }
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(out.z0),
    }
}

/// `(1 − λ) e₁ + λ e₂`.
pub fn interpolate_audio(e1: &AudioEmbedding, e2: &AudioEmbedding, lambda: f64) -> Result<AudioEmbedding> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(arg_err!("interpolation weight must lie in [0, 1], got {lambda}"));
    }
    if e1.dim() != e2.dim() {
        return Err(arg_err!("embedding dims differ: {} vs {}", e1.dim(), e2.dim()));
    }
    if lambda == 0.0 {
        return Ok(e1.clone());
    }
    let l = lambda as f32;
    Ok(AudioEmbedding(
        e1.0.iter().zip(&e2.0).map(|(a, b)| (1.0 - l) * a + l * b).collect(),
    ))
}

/// Multiplies the waveform by `gain` and clips to `[-1, 1]`.
pub fn scale_volume(clip: &AudioClip, gain: f64) -> Result<AudioClip> {
    if !(gain >= 0.0) || !gain.is_finite() {
        return Err(arg_err!("gain must be finite and non-negative, got {gain}"));
    }
    if gain == 1.0 {
        return Ok(clip.clone());
    }
    Ok(AudioClip {
        waveform: clip
            .waveform
            .iter()
            .map(|v| ((*v as f64) * gain).clamp(-1.0, 1.0) as f32)
            .collect(),
        ..clip.clone()
    })
}

/// Binary edge map of an HWC image: gradient magnitude of the channel mean above `threshold`.
pub fn edge_map(pixels: &[f32], size: usize, threshold: f32) -> Vec<bool> {
    let lum = |y: usize, x: usize| -> f32 {
        let i = (y * size + x) * 3;
        (pixels[i] + pixels[i + 1] + pixels[i + 2]) / 3.0
    };
    let mut out = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let gx = lum(y, (x + 1).min(size - 1)) - lum(y, x.saturating_sub(1));
            let gy = lum((y + 1).min(size - 1), x) - lum(y.saturating_sub(1), x);
            out[y * size + x] = (gx * gx + gy * gy).sqrt() > threshold;
        }
    }
    out
}

/// Intersection over union of two edge maps; two empty maps count as identical.
pub fn edge_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
