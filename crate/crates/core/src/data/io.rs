//! On-disk dataset layout: `audio/*.wav` (16-bit PCM mono), `images/*.png`
//! (8-bit RGB), `metadata.jsonl` with one record per example and a
//! `manifest.json` describing the split.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{caption_text, DatasetParams, DatasetSplit, ImageSample, PairedExample, AudioClip};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExampleRecord {
    pub id: String,
    pub split: String,
    pub class_id: usize,
    pub caption: String,
    pub caption_tokens: Vec<u32>,
    pub audio: String,
    pub image: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    pub params: DatasetParams,
    pub class_names: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    /// Checksum of the in-memory dataset at generation time.
    pub checksum: String,
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let data_len = (clip.waveform.len() * 2) as u32;
    let mut w = BufWriter::new(File::create(path).map_err(Error::io(path))?);
    let mut header = Vec::with_capacity(44);
    header.extend(b"RIFF");
    header.extend((36 + data_len).to_le_bytes());
    header.extend(b"WAVEfmt ");
    header.extend(16u32.to_le_bytes());
    header.extend(1u16.to_le_bytes());
    header.extend(1u16.to_le_bytes());
    header.extend(clip.sample_rate.to_le_bytes());
    header.extend((clip.sample_rate * 2).to_le_bytes());
    header.extend(2u16.to_le_bytes());
    header.extend(16u16.to_le_bytes());
    header.extend(b"data");
    header.extend(data_len.to_le_bytes());
    w.write_all(&header).map_err(Error::io(path))?;
    for s in &clip.waveform {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_all(&q.to_le_bytes()).map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Reads a mono 16-bit PCM WAV file.
pub fn read_wav(path: &Path, class_id: usize) -> Result<AudioClip> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(Error::io(path))?
        .read_to_end(&mut bytes)
        .map_err(Error::io(path))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format(path, "not a RIFF/WAVE file"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let mut pos = 12;
    let mut sample_rate = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(pos + 4) as usize;
        let body = pos + 8;
        if body + len > bytes.len() {
            return Err(Error::format(path, "truncated chunk"));
        }
        if id == b"fmt " {
            if u16_at(body) != 1 || u16_at(body + 2) != 1 || u16_at(body + 14) != 16 {
                return Err(Error::format(path, "only mono 16-bit PCM is supported"));
            }
            sample_rate = Some(u32_at(body + 4));
        } else if id == b"data" {
            let sample_rate = sample_rate.ok_or_else(|| Error::format(path, "data before fmt"))?;
            let waveform = bytes[body..body + len]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32767.0)
                .collect();
            return Ok(AudioClip {
                waveform,
                sample_rate,
                class_id,
            });
        }
        pos = body + len + (len & 1);
    }
    Err(Error::format(path, "no data chunk"))
}

pub fn write_png(path: &Path, image: &ImageSample) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.size as u32, image.size as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = image
        .pixels
        .iter()
        .map(|v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8)
        .collect();
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(())
}

pub fn read_png(path: &Path, class_id: usize) -> Result<ImageSample> {
    let file = File::open(path).map_err(Error::io(path))?;
    let dec = png::Decoder::new(BufReader::new(file));
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit RGB"));
    }
    if info.width != info.height {
        return Err(Error::format(path, "expected a square image"));
    }
    let pixels = buf[..info.buffer_size()]
        .iter()
        .map(|b| *b as f32 / 127.5 - 1.0)
        .collect();
    Ok(ImageSample {
        pixels,
        size: info.width as usize,
        class_id,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(Error::io(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes the dataset under `dir`.
pub fn save_dataset(dir: &Path, data: &DatasetSplit, params: &DatasetParams) -> Result<()> {
    fs::create_dir_all(dir.join("audio")).map_err(Error::io(dir))?;
    fs::create_dir_all(dir.join("images")).map_err(Error::io(dir))?;
    let meta_path = dir.join("metadata.jsonl");
    let mut meta = BufWriter::new(File::create(&meta_path).map_err(Error::io(&meta_path))?);
    let mut manifest = SplitManifest {
        params: *params,
        class_names: data.class_names.clone(),
        train: Vec::new(),
        val: Vec::new(),
        checksum: format!("{:016x}", data.checksum()),
    };
    for (split, items) in [("train", &data.train), ("val", &data.val)] {
        for (i, ex) in items.iter().enumerate() {
            let id = format!("{split}_{i:05}");
            let audio = format!("audio/{id}.wav");
            let image = format!("images/{id}.png");
            write_wav(&dir.join(&audio), &ex.audio)?;
            write_png(&dir.join(&image), &ex.image)?;
            let rec = ExampleRecord {
                id: id.clone(),
                split: split.to_string(),
                class_id: ex.class_id,
                caption: caption_text(ex.class_id, &data.class_names),
                caption_tokens: ex.caption_tokens.clone(),
                audio,
                image,
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::format(&meta_path, e.to_string()))?;
            writeln!(meta, "{line}").map_err(Error::io(&meta_path))?;
            if split == "train" {
                manifest.train.push(id);
            } else {
                manifest.val.push(id);
            }
        }
    }
    meta.flush().map_err(Error::io(&meta_path))?;
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_metadata(dir: &Path) -> Result<Vec<ExampleRecord>> {
    let path = dir.join("metadata.jsonl");
    let file = File::open(&path).map_err(Error::io(&path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(Error::io(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(&path, e.to_string()))?);
    }
    Ok(out)
}

/// Loads a dataset written by [`save_dataset`]. Audio and pixels come back
/// quantized to 16 and 8 bits respectively.
pub fn load_dataset(dir: &Path) -> Result<(DatasetSplit, SplitManifest)> {
    let manifest: SplitManifest = read_json(&dir.join("manifest.json"))?;
    let records = read_metadata(dir)?;
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        class_names: manifest.class_names.clone(),
    };
    for rec in records {
        let ex = PairedExample {
            audio: read_wav(&dir.join(&rec.audio), rec.class_id)?,
            image: read_png(&dir.join(&rec.image), rec.class_id)?,
            caption_tokens: rec.caption_tokens.clone(),
            class_id: rec.class_id,
        };
        match rec.split.as_str() {
            "train" => split.train.push(ex),
            "val" => split.val.push(ex),
            other => {
                return Err(Error::format(
                    dir.join("metadata.jsonl"),
                    format!("unknown split {other:?}"),
                ))
            }
        }
    }
    Ok((split, manifest))
}

pub fn dataset_exists(dir: &Path) -> bool {
    dir.join("manifest.json").is_file() && dir.join("metadata.jsonl").is_file()
}

pub fn relative_to(base: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset_with;

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let clip = AudioClip {
            waveform: (0..500).map(|i| ((i as f32) * 0.05).sin() * 0.9).collect(),
            sample_rate: 16_000,
            class_id: 2,
        };
        let p = dir.path().join("a.wav");
        write_wav(&p, &clip).unwrap();
        let back = read_wav(&p, 2).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.waveform.len(), 500);
        for (a, b) in clip.waveform.iter().zip(&back.waveform) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = DatasetParams {
            seed: 1,
            n_classes: 2,
            n_per_class: 4,
            val_fraction: 0.25,
            image_size: 8,
            duration_secs: 0.1,
        };
        let data = generate_dataset_with(&params).unwrap();
        save_dataset(dir.path(), &data, &params).unwrap();
        let (back, manifest) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.params, params);
        assert_eq!(back.train.len(), data.train.len());
        assert_eq!(back.val.len(), data.val.len());
        for (a, b) in data.train.iter().zip(&back.train) {
            assert_eq!(a.class_id, b.class_id);
            assert_eq!(a.caption_tokens, b.caption_tokens);
            for (p, q) in a.image.pixels.iter().zip(&b.image.pixels) {
                assert!((p - q).abs() <= 1.0 / 127.0);
            }
        }
        let records = read_metadata(dir.path()).unwrap();
        assert_eq!(records[0].caption, "a photo of red circle");
    }

    #[test]
    fn rejects_non_wav() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        fs::write(&p, b"hello world, not audio").unwrap();
        assert!(read_wav(&p, 0).is_err());
    }
}
