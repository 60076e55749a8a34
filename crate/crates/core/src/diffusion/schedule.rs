use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Linear-β DDPM schedule with cumulative products `ᾱ_t = Π_{s≤t} (1 − β_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        } = cfg;
        if steps < 2 {
            return Err(arg_err!("schedule needs at least two steps"));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta_start) || !in_unit(beta_end) {
            return Err(arg_err!("betas must lie in (0, 1)"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn linear(steps: usize) -> Result<Self> {
        Self::new(ScheduleConfig {
            steps,
            ..Default::default()
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| arg_err!("timestep {t} outside [0, {})", self.len()))
    }

    /// `ᾱ` at an optional timestep; `None` stands for the clean end of the chain (ᾱ = 1).
    pub fn alpha_bar_or_one(&self, t: Option<usize>) -> Result<f64> {
        t.map_or(Ok(1.0), |t| self.alpha_bar(t))
    }

    /// `z_t = √ᾱ_t z₀ + √(1 − ᾱ_t) ε`, one timestep per batch row.
    pub fn add_noise(&self, z0: &Tensor, t: &[usize], noise: &Tensor) -> Result<Tensor> {
        if z0.dims() != noise.dims() {
            return Err(arg_err!("latent {:?} vs noise {:?}", z0.dims(), noise.dims()));
        }
        let bsz = z0.dim(0)?;
        if t.len() != bsz {
            return Err(arg_err!("{} timesteps for a batch of {bsz}", t.len()));
        }
        let ab = t
            .iter()
            .map(|&t| self.alpha_bar(t))
            .collect::<Result<Vec<_>>>()?;
        let a = per_row(ab.iter().map(|a| a.sqrt()), z0)?;
        let s = per_row(ab.iter().map(|a| (1.0 - a).sqrt()), z0)?;
        Ok((z0.broadcast_mul(&a)? + noise.broadcast_mul(&s)?)?)
    }

    /// Clean-sample estimate `x̂₀ = (z_t − √(1−ᾱ_t) ε) / √ᾱ_t`.
    pub fn predict_x0(&self, z_t: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        Ok(((z_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
    }

    /// Deterministic DDIM update from `t` to `t_prev` (`None` = final clean step).
    pub fn ddim_step(
        &self,
        z_t: &Tensor,
        eps: &Tensor,
        t: usize,
        t_prev: Option<usize>,
    ) -> Result<Tensor> {
        self.ddim_step_eta(z_t, eps, t, t_prev, 0.0, None)
    }

    /// DDIM update with stochasticity `eta`; `noise` is required when `eta > 0`.
    pub fn ddim_step_eta(
        &self,
        z_t: &Tensor,
        eps: &Tensor,
        t: usize,
        t_prev: Option<usize>,
        eta: f64,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar_or_one(t_prev)?;
        let x0 = self.predict_x0(z_t, eps, t)?;
        let sigma = if eta > 0.0 {
            eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
        } else {
            0.0
        };
        let dir = (eps * (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt())?;
        let mut out = ((x0 * ab_prev.sqrt())? + dir)?;
        if sigma > 0.0 {
            let noise = noise.ok_or_else(|| arg_err!("eta > 0 needs a noise sample"))?;
            out = (out + (noise * sigma)?)?;
        }
        Ok(out)
    }

    /// Reverse DDIM update that carries `z` from `t_from` (`None` = clean) up to `t_to`.
    pub fn ddim_inverse_step(
        &self,
        z: &Tensor,
        eps: &Tensor,
        t_from: Option<usize>,
        t_to: usize,
    ) -> Result<Tensor> {
        let ab_from = self.alpha_bar_or_one(t_from)?;
        let ab_to = self.alpha_bar(t_to)?;
        let x0 = ((z - (eps * (1.0 - ab_from).sqrt())?)? / ab_from.sqrt())?;
        Ok(((x0 * ab_to.sqrt())? + (eps * (1.0 - ab_to).sqrt())?)?)
    }
}

fn per_row(values: impl Iterator<Item = f64>, like: &Tensor) -> Result<Tensor> {
    let v: Vec<f64> = values.collect();
    let mut shape = vec![v.len()];
    shape.extend(std::iter::repeat(1).take(like.rank() - 1));
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(like.dtype())?)
}

/// Uniform-stride DDIM timesteps `i · T / S`, returned in sampling (descending) order.
pub fn ddim_timesteps(train_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > train_steps {
        return Err(arg_err!("DDIM steps must be in [1, {train_steps}], got {steps}"));
    }
    let stride = train_steps / steps;
    Ok((0..steps).rev().map(|i| i * stride).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor_to_vec_f64;
    use candle_core::DType;

    #[test]
    fn alpha_bar_decreasing_and_bounded() {
        let s = NoiseSchedule::linear(1000).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!((s.alpha_bar(0).unwrap() - 1.0).abs() < 1e-3);
        assert!(s.betas().iter().all(|b| *b > 0.0 && *b < 1.0));
        assert!(s.alpha_bar(1000).is_err());
    }

    #[test]
    fn zero_noise_scales_latent() {
        let s = NoiseSchedule::linear(100).unwrap();
        let z0 = Tensor::new(&[[1.0f64, -2.0]], &Device::Cpu).unwrap();
        let zt = s
            .add_noise(&z0, &[40], &z0.zeros_like().unwrap())
            .unwrap();
        let a = s.alpha_bar(40).unwrap().sqrt();
        assert_eq!(tensor_to_vec_f64(&zt).unwrap(), vec![a, -2.0 * a]);
    }

    #[test]
    fn add_noise_rejects_bad_timestep() {
        let s = NoiseSchedule::linear(10).unwrap();
        let z = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(s.add_noise(&z, &[10], &z).is_err());
        assert!(s.add_noise(&z, &[1, 2], &z).is_err());
    }

    #[test]
    fn timesteps_uniform_descending() {
        assert_eq!(ddim_timesteps(1000, 4).unwrap(), vec![750, 500, 250, 0]);
        assert_eq!(ddim_timesteps(5, 5).unwrap(), vec![4, 3, 2, 1, 0]);
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn inverse_step_undoes_forward_step_for_fixed_eps() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let z = Tensor::new(&[0.3f64, -0.7, 1.1], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[0.5f64, 0.1, -0.2], &Device::Cpu).unwrap();
        let down = s.ddim_step(&z, &eps, 500, Some(480)).unwrap();
        let up = s.ddim_inverse_step(&down, &eps, Some(480), 500).unwrap();
        for (a, b) in tensor_to_vec_f64(&up).unwrap().iter().zip(tensor_to_vec_f64(&z).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
