//! DDIM sampling with classifier-free guidance over joint (text, audio) conditioning.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    ddim_timesteps, AdapterNorm, AdapterState, FeatureHooks, NoiseSchedule, UNet,
};
use crate::error::{arg_err, Error, Result};
use crate::nn::randn_tensor;
use crate::projector::AudioEmbedding;

/// How the conditional and unconditional predictions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CfgFormulation {
    /// `ε_∅ + w (ε_c − ε_∅)`.
    #[default]
    Standard,
    /// `w ε_c − (1 − w) ε_∅`.
    Additive,
}

impl std::str::FromStr for CfgFormulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "additive" => Ok(Self::Additive),
            _ => Err(arg_err!("unknown guidance formulation {s:?} (standard, additive)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub formulation: CfgFormulation,
    /// Global audio strength applied at every adapter.
    pub beta: f64,
    /// Per-site overrides of `beta`.
    #[serde(default)]
    pub site_beta: BTreeMap<usize, f64>,
    pub steps: usize,
    pub eta: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 8.0,
            formulation: CfgFormulation::Standard,
            beta: 1.0,
            site_beta: BTreeMap::new(),
            steps: 50,
            eta: 0.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(arg_err!("sampler needs at least one step"));
        }
        if !self.scale.is_finite() || !self.beta.is_finite() {
            return Err(arg_err!("guidance scale and beta must be finite"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(arg_err!("eta must lie in [0, 1], got {}", self.eta));
        }
        Ok(())
    }

    /// No guidance: a single conditional branch.
    pub fn unguided(steps: usize) -> Self {
        Self {
            scale: 1.0,
            steps,
            ..Default::default()
        }
    }
}

/// Combines branch predictions. At `w = 1` both formulations return `cond` itself.
pub fn cfg_combine(
    cond: &Tensor,
    uncond: &Tensor,
    scale: f64,
    formulation: CfgFormulation,
) -> Result<Tensor> {
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    Ok(match formulation {
        CfgFormulation::Standard => (uncond + ((cond - uncond)? * scale)?)?,
        CfgFormulation::Additive => ((cond * scale)? - (uncond * (1.0 - scale))?)?,
    })
}

/// Anything that predicts noise from `(z_t, t, text, audio)`.
pub trait EpsModel {
    fn predict(
        &self,
        z: &Tensor,
        t: &[usize],
        text: &Tensor,
        audio: Option<&Tensor>,
        hooks: Option<&mut FeatureHooks>,
    ) -> Result<Tensor>;
}

/// Backbone plus optional adapters with inference-time β.
#[derive(Clone, Copy)]
pub struct Denoiser<'a> {
    pub unet: &'a UNet,
    pub adapters: Option<&'a AdapterState>,
}

impl EpsModel for Denoiser<'_> {
    fn predict(
        &self,
        z: &Tensor,
        t: &[usize],
        text: &Tensor,
        audio: Option<&Tensor>,
        hooks: Option<&mut FeatureHooks>,
    ) -> Result<Tensor> {
        let audio = if self.adapters.is_some() { audio } else { None };
        self.unet.forward(z, t, text, audio, self.adapters, hooks)
    }
}

/// Conditioning for one batch: per-item text/audio tokens `(B, K, C)` and the
/// shared null pair `(K, C)`.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub text: Tensor,
    pub audio: Option<Tensor>,
    pub null_text: Tensor,
    pub null_audio: Option<Tensor>,
}

impl Conditioning {
    /// Both branches set to the null pair.
    pub fn null(&self, batch: usize) -> Result<Conditioning> {
        let rep = |t: &Tensor| -> Result<Tensor> { Ok(t.unsqueeze(0)?.repeat((batch, 1, 1))?) };
        Ok(Conditioning {
            text: rep(&self.null_text)?,
            audio: self.null_audio.as_ref().map(rep).transpose()?,
            null_text: self.null_text.clone(),
            null_audio: self.null_audio.clone(),
        })
    }

    pub fn with_audio(&self, audio: Tensor) -> Conditioning {
        Conditioning {
            audio: Some(audio),
            ..self.clone()
        }
    }
}

fn repeat_null(null: &Tensor, b: usize) -> Result<Tensor> {
    Ok(null.unsqueeze(0)?.repeat((b, 1, 1))?)
}

/// Guided noise estimate. The conditional and `(t_∅, a_∅)` branches run as
/// one doubled batch; at `w = 1` only the conditional branch runs.
pub fn cfg_epsilon(
    model: &dyn EpsModel,
    z: &Tensor,
    t: usize,
    cond: &Conditioning,
    cfg: &GuidanceConfig,
    hooks: Option<&mut FeatureHooks>,
) -> Result<Tensor> {
    let b = z.dim(0)?;
    if cfg.scale == 1.0 {
        return model.predict(z, &vec![t; b], &cond.text, cond.audio.as_ref(), hooks);
    }
    let z2 = Tensor::cat(&[z, z], 0)?;
    let text2 = Tensor::cat(&[&cond.text, &repeat_null(&cond.null_text, b)?], 0)?;
    let audio2 = match (&cond.audio, &cond.null_audio) {
        (Some(a), Some(n)) => Some(Tensor::cat(&[a, &repeat_null(n, b)?], 0)?),
        (Some(_), None) => return Err(arg_err!("audio conditioning needs null audio tokens")),
        (None, _) => None,
    };
    let eps = model.predict(&z2, &vec![t; 2 * b], &text2, audio2.as_ref(), hooks)?;
    cfg_combine(&eps.narrow(0, 0, b)?, &eps.narrow(0, b, b)?, cfg.scale, cfg.formulation)
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub z0: Tensor,
    /// `z_T` followed by every intermediate latent, when requested.
    pub intermediates: Vec<Tensor>,
    /// Hook state of every step, in sampling order.
    pub hooks: Vec<FeatureHooks>,
}

impl SampleOutput {
    pub fn adapter_norms(&self) -> Vec<AdapterNorm> {
        self.hooks.iter().flat_map(|h| h.adapter_norms.iter().copied()).collect()
    }
}

/// DDIM sampling from `z_t`; `hooks_for(step, t)` supplies the hooks of each step.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample_hooked(
    model: &dyn EpsModel,
    z_t: &Tensor,
    cond: &Conditioning,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    noise_seed: u64,
    keep_intermediates: bool,
    hooks_for: &mut dyn FnMut(usize, usize) -> Option<FeatureHooks>,
) -> Result<SampleOutput> {
    cfg.validate()?;
    let timesteps = ddim_timesteps(schedule.len(), cfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut z = z_t.clone();
    let mut intermediates = Vec::new();
    if keep_intermediates {
        intermediates.push(z.clone());
    }
    let mut all_hooks = Vec::new();
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied();
        let mut hooks = hooks_for(i, t);
        let eps = cfg_epsilon(model, &z, t, cond, cfg, hooks.as_mut())?;
        let noise = if cfg.eta > 0.0 {
            Some(randn_tensor(z.dims(), &mut rng, z.dtype())?)
        } else {
            None
        };
        z = schedule.ddim_step_eta(&z, &eps, t, t_prev, cfg.eta, noise.as_ref())?.detach();
        if keep_intermediates {
            intermediates.push(z.clone());
        }
        all_hooks.extend(hooks);
    }
    Ok(SampleOutput {
        z0: z,
        intermediates,
        hooks: all_hooks,
    })
}

pub fn ddim_sample(
    model: &dyn EpsModel,
    z_t: &Tensor,
    cond: &Conditioning,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    keep_intermediates: bool,
) -> Result<SampleOutput> {
    ddim_sample_hooked(model, z_t, cond, cfg, schedule, 0, keep_intermediates, &mut |_, _| None)
}

/// Seeded standard-normal starting latents `(B, 3, S, S)`.
pub fn initial_noise(seed: u64, batch: usize, image_size: usize, dtype: DType) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randn_tensor(&[batch, 3, image_size, image_size], &mut rng, dtype)
}

/// Replaces each embedding by the zero embedding with probability `p`.
/// Returns the new batch and the per-item drop mask.
pub fn null_conditioning_dropout(
    batch: &[AudioEmbedding],
    p: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<AudioEmbedding>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(arg_err!("dropout probability must lie in [0, 1], got {p}"));
    }
    let mask: Vec<bool> = batch.iter().map(|_| rng.random_bool(p)).collect();
    let out = batch
        .iter()
        .zip(&mask)
        .map(|(e, &drop)| if drop { AudioEmbedding::zeros(e.dim()) } else { e.clone() })
        .collect();
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor_to_vec_f64;
    use candle_core::Device;

    #[test]
    fn unit_scale_returns_conditional_branch() {
        let c = Tensor::new(&[0.1f64, -3.0, 7.25], &Device::Cpu).unwrap();
        let u = Tensor::new(&[5.0f64, 1e-3, -2.0], &Device::Cpu).unwrap();
        for f in [CfgFormulation::Standard, CfgFormulation::Additive] {
            let e = cfg_combine(&c, &u, 1.0, f).unwrap();
            assert_eq!(tensor_to_vec_f64(&e).unwrap(), tensor_to_vec_f64(&c).unwrap());
        }
    }

    #[test]
    fn zero_scale_standard_is_unconditional() {
        let c = Tensor::new(&[1.0f64, 2.0], &Device::Cpu).unwrap();
        let u = Tensor::new(&[-1.0f64, 0.5], &Device::Cpu).unwrap();
        let e = cfg_combine(&c, &u, 0.0, CfgFormulation::Standard).unwrap();
        assert_eq!(tensor_to_vec_f64(&e).unwrap(), vec![-1.0, 0.5]);
        let e = cfg_combine(&c, &u, 0.0, CfgFormulation::Additive).unwrap();
        assert_eq!(tensor_to_vec_f64(&e).unwrap(), vec![1.0, -0.5]);
    }

    #[test]
    fn dropout_extremes() {
        let batch = vec![AudioEmbedding(vec![1.0, 0.0]); 5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (same, mask) = null_conditioning_dropout(&batch, 0.0, &mut rng).unwrap();
        assert_eq!(same, batch);
        assert!(mask.iter().all(|m| !m));
        let (all, _) = null_conditioning_dropout(&batch, 1.0, &mut rng).unwrap();
        assert!(all.iter().all(|e| e.0.iter().all(|v| *v == 0.0)));
        assert!(null_conditioning_dropout(&batch, 1.5, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig::default().validate().is_ok());
        let mut c = GuidanceConfig::default();
        c.steps = 0;
        assert!(c.validate().is_err());
        c = GuidanceConfig::default();
        c.scale = f64::NAN;
        assert!(c.validate().is_err());
    }
}
