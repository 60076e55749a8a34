//! Independent reference implementations checked against the library.

use audiogate_core::data::{hz_to_mel, mel_to_hz, AudioClip, LogMel, MelConfig, LOG_FLOOR};
use audiogate_core::diffusion::{NoiseSchedule, ScheduleConfig};
use audiogate_core::losses::{infonce_loss, mse_token_loss, ContrastiveReduction, Similarity, Stage1Batch, TokenWeighting};
use audiogate_core::metrics::{aic, ais, fid, iis};
use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn naive_logmel(wave: &[f32], sr: f64, window: usize, hop: usize, n_mels: usize) -> Vec<Vec<f64>> {
    let pi = std::f64::consts::PI;
    let hann: Vec<f64> = (0..window).map(|i| 0.5 - 0.5 * (2.0 * pi * i as f64 / window as f64).cos()).collect();
    let bins = window / 2 + 1;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(sr / 2.0));
    let edge = |i: usize| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64);
    let frames = (wave.len() - window) / hop + 1;
    let mut out = vec![vec![0.0; frames]; n_mels];
    for f in 0..frames {
        let power: Vec<f64> = (0..bins)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..window {
                    let x = wave[f * hop + n] as f64 * hann[n];
                    let ang = -2.0 * pi * (k * n) as f64 / window as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect();
        for (m, row) in out.iter_mut().enumerate() {
            let (a, c, b) = (edge(m), edge(m + 1), edge(m + 2));
            let mut e = 0.0;
            for (k, p) in power.iter().enumerate() {
                let hz = k as f64 * sr / window as f64;
                let w = if hz <= a || hz >= b {
                    0.0
                } else if hz <= c {
                    (hz - a) / (c - a)
                } else {
                    (b - hz) / (b - c)
                };
                e += w * p;
            }
            row[f] = (e + LOG_FLOOR).ln();
        }
    }
    out
}

#[test]
fn logmel_matches_naive_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let wave: Vec<f32> = (0..700).map(|_| rng.random_range(-0.9..0.9)).collect();
    let clip = AudioClip { waveform: wave.clone(), sample_rate: 8000, class_id: 0 };
    let cfg = MelConfig { hop: 100, window: 128, n_mels: 10, f_min: 0.0, f_max: None };
    let got = LogMel::new(cfg, 8000).unwrap().compute(&clip).unwrap();
    let want = naive_logmel(&wave, 8000.0, 128, 100, 10);
    assert_eq!(got.frames, want[0].len());
    for (m, row) in want.iter().enumerate() {
        for (f, v) in row.iter().enumerate() {
            assert!((got.at(m, f) - v).abs() < 1e-8, "band {m} frame {f}: {} vs {v}", got.at(m, f));
        }
    }
}

#[test]
fn pure_tone_peaks_in_its_band() {
    let sr = 16_000u32;
    let cfg = MelConfig::default();
    let lm = LogMel::new(cfg, sr).unwrap();
    for hz in [300.0, 1200.0, 4000.0] {
        let wave: Vec<f32> = (0..8000)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / sr as f64).sin()) as f32)
            .collect();
        let m = lm.compute(&AudioClip { waveform: wave, sample_rate: sr, class_id: 0 }).unwrap();
        let mean: Vec<f64> = (0..m.n_mels).map(|b| m.band(b).iter().sum::<f64>()).collect();
        let peak = (0..m.n_mels).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        let nearest = (0..m.n_mels)
            .min_by(|&a, &b| (lm.center_hz(a, sr) - hz).abs().total_cmp(&(lm.center_hz(b, sr) - hz).abs()))
            .unwrap();
        assert!(peak.abs_diff(nearest) <= 1, "{hz} Hz peaked in band {peak}, nearest center {nearest}");
    }
}

#[test]
fn alpha_bar_is_running_product() {
    let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
    let mut prod = 1.0;
    for (t, b) in s.betas().iter().enumerate() {
        prod *= 1.0 - b;
        assert!((s.alpha_bar(t).unwrap() - prod).abs() < 1e-12);
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<f64>, Tensor) {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t = Tensor::from_vec(v.clone(), shape, &Device::Cpu).unwrap();
    (v, t)
}

#[test]
fn infonce_and_mse_match_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, n, k, c) = (3, 4, 5, 6);
    let (a, at) = rand_tensor(&mut rng, &[b, k, c]);
    let (p, pt) = rand_tensor(&mut rng, &[b, k, c]);
    let (ng, nt) = rand_tensor(&mut rng, &[b, n, k, c]);
    let (tx, tt) = rand_tensor(&mut rng, &[b, k, c]);
    let w: Vec<f64> = (1..=k).map(|i| 5.0 / (5.0 + (i as f64 / 5.0).exp())).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
    let row = |v: &[f64], bi: usize, i: usize| v[(bi * k + i) * c..(bi * k + i + 1) * c].to_vec();
    let nrow = |bi: usize, j: usize, i: usize| ng[((bi * n + j) * k + i) * c..((bi * n + j) * k + i + 1) * c].to_vec();
    let (mut want_nce, mut want_mse) = (0.0, 0.0);
    for bi in 0..b {
        for i in 0..k {
            let anchor = row(&a, bi, i);
            let pos = dot(&anchor, &row(&p, bi, i));
            let sims: Vec<f64> = (0..n).map(|j| dot(&anchor, &nrow(bi, j, i))).collect();
            let denom = pos.exp() + sims.iter().map(|s| s.exp()).sum::<f64>();
            want_nce += w[i] * -(pos.exp() / denom).ln();
            let d: f64 = anchor.iter().zip(row(&tx, bi, i)).map(|(x, y)| (x - y).powi(2)).sum();
            want_mse += w[i] * d;
        }
    }
    want_nce /= b as f64;
    want_mse /= b as f64;
    let batch = Stage1Batch { anchor: at.clone(), positive: pt, negatives: nt, text: tt.clone() };
    let weighting = TokenWeighting::ReverseSigmoid { temperature: 5.0 };
    let got = infonce_loss(&batch, weighting, Similarity::Dot, ContrastiveReduction::PerToken)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    assert!((got - want_nce).abs() < 1e-10, "{got} vs {want_nce}");
    let got = mse_token_loss(&at, &tt, weighting).unwrap().to_scalar::<f64>().unwrap();
    assert!((got - want_mse).abs() < 1e-10, "{got} vs {want_mse}");
}

#[test]
fn fid_matches_diagonal_gaussian_closed_form() {
    // Independent coordinates: FID = Σ (μ₁−μ₂)² + (σ₁ − σ₂)².
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 20_000;
    let a_std = [1.0, 2.0, 0.5];
    let b_std = [1.5, 1.0, 0.5];
    let shift = [0.0, 1.0, -2.0];
    let draw = |rng: &mut ChaCha8Rng, std: &[f64; 3], mu: &[f64; 3]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..3).map(|d| Normal::new(mu[d], std[d]).unwrap().sample(rng)).collect())
            .collect()
    };
    let a = draw(&mut rng, &a_std, &[0.0; 3]);
    let b = draw(&mut rng, &b_std, &shift);
    let want: f64 = (0..3).map(|d| shift[d] * shift[d] + (a_std[d] - b_std[d]).powi(2)).sum();
    let got = fid(&a, &b).unwrap();
    assert!((got - want).abs() / want < 0.05, "{got} vs {want}");
}

#[test]
fn rank_metrics_match_pairwise_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..4).map(|_| rng.random_range(-2..=2) as f64).collect()).collect()
    };
    let gen = rows(&mut rng, 10);
    let cond = rows(&mut rng, 10);
    let val = rows(&mut rng, 15);
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
    let mut want = 0.0;
    for (g, c) in gen.iter().zip(&cond) {
        let t = dot(g, c);
        want += val.iter().filter(|v| dot(g, v) < t).count() as f64 / val.len() as f64;
    }
    want /= gen.len() as f64;
    assert_eq!(ais(&gen, &cond, &val).unwrap().0, want);
    assert_eq!(iis(&gen, &cond, &val).unwrap().0, want);
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let protos = rows(&mut rng, 3);
    let (score, preds) = aic(&gen, &labels, &protos).unwrap();
    for (g, p) in gen.iter().zip(&preds) {
        let best = protos.iter().map(|q| dot(g, q)).fold(f64::NEG_INFINITY, f64::max);
        let first = protos.iter().position(|q| dot(g, q) == best).unwrap();
        assert_eq!(*p, first);
    }
    let hits = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    assert_eq!(score, hits as f64 / 10.0);
}
