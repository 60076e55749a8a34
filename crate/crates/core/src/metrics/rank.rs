use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rank counts of one generated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCount {
    /// References strictly less similar than the target.
    pub below: usize,
    pub total: usize,
}

impl RankCount {
    pub fn score(&self) -> f64 {
        self.below as f64 / self.total as f64
    }
}

/// Counts entries of `sorted_refs` (ascending) strictly below `target`.
pub fn count_below(target: f64, sorted_refs: &[f64]) -> usize {
    sorted_refs.partition_point(|&r| r < target)
}

/// Generic rank metric: sample `i` scores the fraction of reference similarities
/// `ref_sims[i][j]` strictly below its target similarity `target_sims[i]`.
pub fn rank_metric(target_sims: &[f64], ref_sims: &[Vec<f64>]) -> Result<(f64, Vec<RankCount>)> {
    if target_sims.is_empty() {
        return Err(arg_err!("rank metric needs at least one generated sample"));
    }
    if target_sims.len() != ref_sims.len() {
        return Err(arg_err!(
            "{} targets but {} reference rows",
            target_sims.len(),
            ref_sims.len()
        ));
    }
    let mut counts = Vec::with_capacity(target_sims.len());
    for (&t, refs) in target_sims.iter().zip(ref_sims) {
        if refs.is_empty() {
            return Err(arg_err!("rank metric needs at least one reference"));
        }
        let mut sorted = refs.clone();
        sorted.sort_by(f64::total_cmp);
        counts.push(RankCount {
            below: count_below(t, &sorted),
            total: refs.len(),
        });
    }
    let mean = counts.iter().map(RankCount::score).sum::<f64>() / counts.len() as f64;
    Ok((mean, counts))
}

fn check_dims(sets: &[&[Vec<f64>]]) -> Result<()> {
    let dim = sets.iter().flat_map(|s| s.iter()).map(Vec::len).next();
    if let Some(d) = dim {
        if sets.iter().flat_map(|s| s.iter()).any(|v| v.len() != d) {
            return Err(arg_err!("embeddings have inconsistent dimensions"));
        }
    }
    Ok(())
}

/// Audio-image similarity rank over validation audios, using dot products of embeddings.
pub fn ais(
    images: &[Vec<f64>],
    cond_audio: &[Vec<f64>],
    val_audio: &[Vec<f64>],
) -> Result<(f64, Vec<RankCount>)> {
    if images.len() != cond_audio.len() {
        return Err(arg_err!("{} images but {} conditioning audios", images.len(), cond_audio.len()));
    }
    if val_audio.is_empty() {
        return Err(arg_err!("AIS needs at least one validation audio"));
    }
    check_dims(&[images, cond_audio, val_audio])?;
    let targets: Vec<f64> = images.iter().zip(cond_audio).map(|(i, a)| dot(i, a)).collect();
    let refs: Vec<Vec<f64>> = images
        .iter()
        .map(|i| val_audio.iter().map(|v| dot(i, v)).collect())
        .collect();
    rank_metric(&targets, &refs)
}

/// Image-image similarity rank: target is the ground-truth image, references the validation images.
pub fn iis(
    generated: &[Vec<f64>],
    ground_truth: &[Vec<f64>],
    val_images: &[Vec<f64>],
) -> Result<(f64, Vec<RankCount>)> {
    if generated.len() != ground_truth.len() {
        return Err(arg_err!(
            "{} generated images but {} ground-truth images",
            generated.len(),
            ground_truth.len()
        ));
    }
    if val_images.is_empty() {
        return Err(arg_err!("IIS needs at least one validation image"));
    }
    check_dims(&[generated, ground_truth, val_images])?;
    let targets: Vec<f64> = generated.iter().zip(ground_truth).map(|(g, t)| dot(g, t)).collect();
    let refs: Vec<Vec<f64>> = generated
        .iter()
        .map(|g| val_images.iter().map(|v| dot(g, v)).collect())
        .collect();
    rank_metric(&targets, &refs)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Zero-shot class agreement against class prototypes.
pub fn aic(
    images: &[Vec<f64>],
    labels: &[usize],
    prototypes: &[Vec<f64>],
) -> Result<(f64, Vec<usize>)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(arg_err!("AIC needs one label per image and at least one image"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= prototypes.len()) {
        return Err(arg_err!("class {bad} has no prototype ({} classes)", prototypes.len()));
    }
    check_dims(&[images, prototypes])?;
    let preds: Vec<usize> = images
        .iter()
        .map(|img| argmax_first(&prototypes.iter().map(|p| dot(img, p)).collect::<Vec<_>>()))
        .collect();
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok((hits as f64 / labels.len() as f64, preds))
}
