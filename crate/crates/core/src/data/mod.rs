//! Synthetic paired audio / image / caption data with known class semantics.
//!
//! Class `k` of `M` sounds like a harmonic tone with fundamental
//! `200 · 16^(k/M)` Hz and a class-specific spectral roll-off; its image is a
//! shape with a class-specific hue, outline and stripe texture. Every example
//! is generated from its own seeded RNG so the dataset is a pure function of
//! `(seed, parameters)`.

mod augment;
pub mod io;
mod mel;

pub use augment::{augment, augment_with_record, crop_resize, flip_horizontal, AugmentRecord};
pub use mel::{compute_logmel, mel_to_hz, hz_to_mel, LogMel, MelConfig, MelSpectrogram, LOG_FLOOR};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::nn::Fnv;

pub const SAMPLE_RATE: u32 = 16_000;

/// Token ids of the caption vocabulary.
pub const PAD_TOKEN: u32 = 0;
const TEMPLATE: [&str; 3] = ["a", "photo", "of"];

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub waveform: Vec<f32>,
    pub sample_rate: u32,
    pub class_id: usize,
}

impl AudioClip {
    pub fn duration(&self) -> f64 {
        self.waveform.len() as f64 / self.sample_rate as f64
    }
}

/// Image pixels in HWC order with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Vec<f32>,
    pub size: usize,
    pub class_id: usize,
}

impl ImageSample {
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.size + x) * 3 + c]
    }

    /// Pixels in CHW order.
    pub fn to_chw(&self) -> Vec<f32> {
        let s = self.size;
        let mut out = vec![0.0; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                for c in 0..3 {
                    out[c * s * s + y * s + x] = self.at(y, x, c);
                }
            }
        }
        out
    }

    pub fn from_chw(chw: &[f32], size: usize, class_id: usize) -> Self {
        let mut pixels = vec![0.0; 3 * size * size];
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    pixels[(y * size + x) * 3 + c] = chw[c * size * size + y * size + x];
                }
            }
        }
        Self {
            pixels,
            size,
            class_id,
        }
    }
}

/// Stacks images into a `(B, 3, S, S)` tensor.
pub fn image_batch(images: &[&ImageSample], dtype: candle_core::DType) -> Result<candle_core::Tensor> {
    let size = images.first().map_or(0, |i| i.size);
    if images.iter().any(|i| i.size != size) {
        return Err(arg_err!("images in a batch must share one size"));
    }
    let data: Vec<f32> = images.iter().flat_map(|i| i.to_chw()).collect();
    let t = candle_core::Tensor::from_vec(data, (images.len(), 3, size, size), &candle_core::Device::Cpu)?;
    Ok(t.to_dtype(dtype)?)
}

/// Splits a `(B, 3, S, S)` tensor into images, clamping to `[-1, 1]`.
pub fn images_from_tensor(t: &candle_core::Tensor, class_ids: &[usize]) -> Result<Vec<ImageSample>> {
    let (b, _, s, _) = t.dims4()?;
    if class_ids.len() != b {
        return Err(arg_err!("{} class ids for {b} images", class_ids.len()));
    }
    let v = crate::nn::tensor_to_vec_f32(&t.clamp(-1.0, 1.0)?)?;
    Ok((0..b)
        .map(|i| ImageSample::from_chw(&v[i * 3 * s * s..(i + 1) * 3 * s * s], s, class_ids[i]))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub audio: AudioClip,
    pub image: ImageSample,
    pub caption_tokens: Vec<u32>,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PairedExample>,
    pub val: Vec<PairedExample>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    pub seed: u64,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub val_fraction: f64,
    pub image_size: usize,
    pub duration_secs: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 8,
            n_per_class: 64,
            val_fraction: 0.25,
            image_size: 32,
            duration_secs: 2.0,
        }
    }
}

const HUE_NAMES: [&str; 8] = [
    "red", "orange", "lime", "green", "cyan", "azure", "violet", "magenta",
];
const SHAPE_NAMES: [&str; 8] = [
    "circle", "square", "triangle", "diamond", "cross", "ring", "slab", "pillar",
];

pub fn class_names(n_classes: usize) -> Vec<String> {
    (0..n_classes)
        .map(|k| {
            let base = format!("{} {}", HUE_NAMES[k % 8], SHAPE_NAMES[k % 8]);
            if k < 8 {
                base
            } else {
                format!("{base} {}", k / 8)
            }
        })
        .collect()
}

/// Vocabulary: padding, the caption template words, then one word per class.
pub fn vocabulary(n_classes: usize) -> Vec<String> {
    let mut v = vec!["<pad>".to_string()];
    v.extend(TEMPLATE.iter().map(|s| s.to_string()));
    v.extend(class_names(n_classes));
    v
}

pub fn vocab_size(n_classes: usize) -> usize {
    1 + TEMPLATE.len() + n_classes
}

/// Tokens of "a photo of <class>".
pub fn caption_tokens(class_id: usize) -> Vec<u32> {
    vec![1, 2, 3, 4 + class_id as u32]
}

pub fn caption_text(class_id: usize, names: &[String]) -> String {
    format!("a photo of {}", names[class_id])
}

pub fn class_frequency(class_id: usize, n_classes: usize) -> f64 {
    200.0 * 16f64.powf(class_id as f64 / n_classes as f64)
}

pub fn class_hue(class_id: usize, n_classes: usize) -> f64 {
    360.0 * class_id as f64 / n_classes as f64
}

fn example_rng(seed: u64, class_id: usize, index: usize, stream: u64) -> ChaCha8Rng {
    let mut h = Fnv::default();
    h.write(&seed.to_le_bytes());
    h.write(&(class_id as u64).to_le_bytes());
    h.write(&(index as u64).to_le_bytes());
    h.write(&stream.to_le_bytes());
    ChaCha8Rng::seed_from_u64(h.finish())
}

/// Band-limited harmonic tone for `class_id` with seeded jitter.
pub fn synth_audio(
    class_id: usize,
    n_classes: usize,
    duration_secs: f64,
    rng: &mut impl Rng,
) -> AudioClip {
    let sr = SAMPLE_RATE as f64;
    let n = (duration_secs * sr).round() as usize;
    let f0 = class_frequency(class_id, n_classes) * (1.0 + rng.random_range(-0.02..0.02));
    let rolloff = 0.3 + 0.55 * (((class_id * 3) % n_classes) as f64 / n_classes as f64);
    let mut partials = Vec::new();
    let mut harmonic = 1;
    while harmonic as f64 * f0 < 7000.0 && harmonic <= 12 {
        let amp = rolloff.powi(harmonic - 1) * (1.0 + rng.random_range(-0.15..0.15));
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        partials.push((harmonic as f64 * f0, amp, phase));
        harmonic += 1;
    }
    let attack = rng.random_range(0.02..0.1);
    let decay = rng.random_range(0.1..0.5);
    let noise = Normal::new(0.0, 1e-3).unwrap();
    let mut wave: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = (t / attack).min(1.0) * (-decay * t).exp();
            let s: f64 = partials
                .iter()
                .map(|(f, a, p)| a * (std::f64::consts::TAU * f * t + p).sin())
                .sum();
            env * s + noise.sample(rng)
        })
        .collect();
    let peak = wave.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let target = rng.random_range(0.5..0.9);
    for v in &mut wave {
        *v = (*v * target / peak).clamp(-1.0, 1.0);
    }
    AudioClip {
        waveform: wave.into_iter().map(|v| v as f32).collect(),
        sample_rate: SAMPLE_RATE,
        class_id,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn inside_shape(shape: usize, dx: f64, dy: f64) -> bool {
    match shape % 8 {
        0 => dx * dx + dy * dy <= 1.0,
        1 => dx.abs().max(dy.abs()) <= 0.8,
        2 => dy <= 0.8 && dy >= -0.9 && dx.abs() <= 0.55 * (dy + 0.9),
        3 => dx.abs() + dy.abs() <= 1.0,
        4 => (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0),
        5 => {
            let r2 = dx * dx + dy * dy;
            (0.3..=1.0).contains(&r2)
        }
        6 => dy.abs() <= 0.4 && dx.abs() <= 1.0,
        _ => dx.abs() <= 0.4 && dy.abs() <= 1.0,
    }
}

/// Shape image for `class_id`: class hue, class outline and oriented stripes.
pub fn synth_image(class_id: usize, n_classes: usize, size: usize, rng: &mut impl Rng) -> ImageSample {
    let s = size as f64;
    let hue = class_hue(class_id, n_classes) + rng.random_range(-6.0..6.0);
    let sat = rng.random_range(0.75..1.0);
    let val = rng.random_range(0.8..1.0);
    let fg = hsv_to_rgb(hue, sat, val);
    let bg_level = rng.random_range(0.1..0.25);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    let cx = s / 2.0 + rng.random_range(-s / 10.0..s / 10.0);
    let cy = s / 2.0 + rng.random_range(-s / 10.0..s / 10.0);
    let radius = s * rng.random_range(0.26..0.33);
    let angle = std::f64::consts::PI * class_id as f64 / n_classes as f64;
    let (sa, ca) = angle.sin_cos();
    let freq = 2.0 * std::f64::consts::PI / (s / 5.0);
    let mut pixels = vec![0.0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / radius;
            let dy = (y as f64 + 0.5 - cy) / radius;
            let rgb = if inside_shape(class_id, dx, dy) {
                let stripe = 1.0 + 0.12 * (freq * (x as f64 * ca + y as f64 * sa)).sin();
                [fg[0] * stripe, fg[1] * stripe, fg[2] * stripe]
            } else {
                [bg_level + tint[0], bg_level + tint[1], bg_level + tint[2]]
            };
            for c in 0..3 {
                pixels[(y * size + x) * 3 + c] = (rgb[c] * 2.0 - 1.0).clamp(-1.0, 1.0) as f32;
            }
        }
    }
    ImageSample {
        pixels,
        size,
        class_id,
    }
}

pub fn generate_example(params: &DatasetParams, class_id: usize, index: usize) -> PairedExample {
    let mut arng = example_rng(params.seed, class_id, index, 0);
    let mut irng = example_rng(params.seed, class_id, index, 1);
    let audio = synth_audio(class_id, params.n_classes, params.duration_secs, &mut arng);
    let image = synth_image(class_id, params.n_classes, params.image_size, &mut irng);
    PairedExample {
        audio,
        image,
        caption_tokens: caption_tokens(class_id),
        class_id,
    }
}

/// Number of validation examples per class.
pub fn val_per_class(n_per_class: usize, val_fraction: f64) -> usize {
    let n = (n_per_class as f64 * val_fraction).round() as usize;
    n.clamp(1, n_per_class - 1)
}

pub fn generate_dataset_with(params: &DatasetParams) -> Result<DatasetSplit> {
    if params.n_classes < 2 {
        return Err(arg_err!("need at least 2 classes, got {}", params.n_classes));
    }
    if params.n_per_class < 4 {
        return Err(arg_err!("need at least 4 examples per class, got {}", params.n_per_class));
    }
    if !(params.val_fraction > 0.0 && params.val_fraction < 1.0) {
        return Err(arg_err!("val_fraction must lie in (0, 1), got {}", params.val_fraction));
    }
    if params.image_size < 8 || params.duration_secs <= 0.0 {
        return Err(arg_err!("image size must be >= 8 and duration positive"));
    }
    let n_val = val_per_class(params.n_per_class, params.val_fraction);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class_id in 0..params.n_classes {
        for index in 0..params.n_per_class {
            let ex = generate_example(params, class_id, index);
            if index < n_val {
                val.push(ex);
            } else {
                train.push(ex);
            }
        }
    }
    Ok(DatasetSplit {
        train,
        val,
        class_names: class_names(params.n_classes),
    })
}

pub fn generate_dataset(
    seed: u64,
    n_classes: usize,
    n_per_class: usize,
    val_fraction: f64,
) -> Result<DatasetSplit> {
    generate_dataset_with(&DatasetParams {
        seed,
        n_classes,
        n_per_class,
        val_fraction,
        ..Default::default()
    })
}

impl DatasetSplit {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// FNV-1a over every waveform sample, pixel and caption token.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for ex in self.train.iter().chain(&self.val) {
            h.write(&(ex.class_id as u64).to_le_bytes());
            for s in &ex.audio.waveform {
                h.write(&s.to_bits().to_le_bytes());
            }
            for p in &ex.image.pixels {
                h.write(&p.to_bits().to_le_bytes());
            }
            for t in &ex.caption_tokens {
                h.write(&t.to_le_bytes());
            }
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetParams {
        DatasetParams {
            seed: 3,
            n_classes: 3,
            n_per_class: 4,
            val_fraction: 0.25,
            image_size: 16,
            duration_secs: 0.25,
        }
    }

    #[test]
    fn rejects_bad_counts() {
        let mut p = small();
        p.n_classes = 1;
        assert!(generate_dataset_with(&p).is_err());
        let mut p = small();
        p.n_per_class = 3;
        assert!(generate_dataset_with(&p).is_err());
    }

    #[test]
    fn pairing_and_ranges_hold() {
        let d = generate_dataset_with(&small()).unwrap();
        for ex in d.train.iter().chain(&d.val) {
            assert_eq!(ex.audio.class_id, ex.class_id);
            assert_eq!(ex.image.class_id, ex.class_id);
            assert_eq!(ex.caption_tokens, caption_tokens(ex.class_id));
            assert!(ex.audio.waveform.iter().all(|v| v.abs() <= 1.0));
            assert!(ex.image.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(ex.audio.waveform.len(), (0.25 * 16000.0) as usize);
        }
    }

    #[test]
    fn splits_cover_every_class() {
        let d = generate_dataset_with(&small()).unwrap();
        for k in 0..3 {
            assert!(d.train.iter().any(|e| e.class_id == k));
            assert!(d.val.iter().any(|e| e.class_id == k));
        }
    }

    #[test]
    fn chw_round_trip() {
        let img = synth_image(2, 8, 8, &mut ChaCha8Rng::seed_from_u64(0));
        let back = ImageSample::from_chw(&img.to_chw(), 8, 2);
        assert_eq!(img, back);
    }

    #[test]
    fn vocabulary_matches_caption_ids() {
        let v = vocabulary(8);
        assert_eq!(v.len(), vocab_size(8));
        let names = class_names(8);
        let toks = caption_tokens(5);
        let words: Vec<&str> = toks.iter().map(|t| v[*t as usize].as_str()).collect();
        assert_eq!(words.join(" "), caption_text(5, &names));
    }
}
