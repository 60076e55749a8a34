use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::AudioClip;
use crate::error::{arg_err, Result};

/// Additive floor inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    /// Hop between frames, in samples.
    pub hop: usize,
    /// Analysis window (and FFT) length, in samples.
    pub window: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper band edge; `None` means Nyquist.
    pub f_max: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            hop: 320,
            window: 1024,
            n_mels: 64,
            f_min: 0.0,
            f_max: None,
        }
    }
}

/// Log-mel energies stored band-major: `values[m * frames + f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f64>,
    pub n_mels: usize,
    pub frames: usize,
    pub hop: usize,
    pub window: usize,
}

impl MelSpectrogram {
    pub fn at(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.frames + frame]
    }

    pub fn band(&self, mel: usize) -> &[f64] {
        &self.values[mel * self.frames..(mel + 1) * self.frames]
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Reusable STFT + triangular mel filterbank.
pub struct LogMel {
    cfg: MelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// `n_mels x (window / 2 + 1)` filter weights.
    filters: Vec<Vec<f64>>,
}

impl LogMel {
    pub fn new(cfg: MelConfig, sample_rate: u32) -> Result<Self> {
        if cfg.window < 2 || cfg.hop == 0 || cfg.n_mels == 0 {
            return Err(arg_err!("mel config needs window >= 2, hop >= 1, n_mels >= 1"));
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.window);
        let window = (0..cfg.window)
            .map(|i| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.window as f64).cos()
            })
            .collect();
        let n_bins = cfg.window / 2 + 1;
        let f_max = cfg.f_max.unwrap_or(sample_rate as f64 / 2.0);
        let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * sample_rate as f64 / cfg.window as f64;
                        let up = (f - lo) / (center - lo);
                        let down = (hi - f) / (hi - center);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg,
            fft,
            window,
            filters,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Center frequency of mel band `m`.
    pub fn center_hz(&self, m: usize, sample_rate: u32) -> f64 {
        let f_max = self.cfg.f_max.unwrap_or(sample_rate as f64 / 2.0);
        let (lo, hi) = (hz_to_mel(self.cfg.f_min), hz_to_mel(f_max));
        mel_to_hz(lo + (hi - lo) * (m + 1) as f64 / (self.cfg.n_mels + 1) as f64)
    }

    pub fn frames_for(&self, len: usize) -> usize {
        (len - self.cfg.window) / self.cfg.hop + 1
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        let len = clip.waveform.len();
        if len < self.cfg.window {
            return Err(arg_err!(
                "clip of {len} samples is shorter than the {}-sample window",
                self.cfg.window
            ));
        }
        let frames = self.frames_for(len);
        let n_mels = self.cfg.n_mels;
        let mut values = vec![0.0; n_mels * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.window];
        let mut power = vec![0.0; self.cfg.window / 2 + 1];
        for f in 0..frames {
            let start = f * self.cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(clip.waveform[start + i] as f64 * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (k, p) in power.iter_mut().enumerate() {
                *p = buf[k].norm_sqr();
            }
            for (m, filt) in self.filters.iter().enumerate() {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                values[m * frames + f] = (e + LOG_FLOOR).ln();
            }
        }
        Ok(MelSpectrogram {
            values,
            n_mels,
            frames,
            hop: self.cfg.hop,
            window: self.cfg.window,
        })
    }
}

pub fn compute_logmel(
    clip: &AudioClip,
    hop: usize,
    window: usize,
    n_mels: usize,
) -> Result<MelSpectrogram> {
    LogMel::new(
        MelConfig {
            hop,
            window,
            n_mels,
            ..Default::default()
        },
        clip.sample_rate,
    )?
    .compute(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(waveform: Vec<f32>) -> AudioClip {
        AudioClip {
            waveform,
            sample_rate: 16_000,
            class_id: 0,
        }
    }

    #[test]
    fn silence_hits_the_floor() {
        let m = compute_logmel(&clip(vec![0.0; 4000]), 320, 1024, 64).unwrap();
        assert!(m.values.iter().all(|v| *v == LOG_FLOOR.ln()));
    }

    #[test]
    fn frame_count_formula() {
        for len in [1024usize, 1025, 1344, 5000, 32000] {
            let m = compute_logmel(&clip(vec![0.1; len]), 320, 1024, 64).unwrap();
            assert_eq!(m.frames, (len - 1024) / 320 + 1);
            assert_eq!(m.n_mels, 64);
        }
    }

    #[test]
    fn short_clip_is_rejected() {
        assert!(compute_logmel(&clip(vec![0.0; 1000]), 320, 1024, 64).is_err());
    }

    #[test]
    fn mel_scale_round_trip() {
        for f in [0.0, 100.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
    }
}
