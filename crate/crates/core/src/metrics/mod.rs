//! Reference-based generation metrics and the embedding space they are computed in.

mod embedder;
mod fid;
mod rank;

pub use embedder::{train_eval_embedder, EmbedderConfig, EmbedderItem, EvalEmbedder};
pub use fid::{fid, FID_EPS};
pub use rank::{aic, ais, argmax_first, count_below, dot, iis, rank_metric, RankCount};

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub class_id: usize,
    pub predicted: usize,
    pub ais: RankCount,
    pub iis: RankCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ais: f64,
    pub aic: f64,
    pub iis: f64,
    pub fid: f64,
    pub per_sample: Vec<SampleRecord>,
}

/// Embedded inputs of a full evaluation; every row is one sample.
pub struct EvalInputs<'a> {
    pub ids: &'a [String],
    pub generated: &'a [Vec<f64>],
    pub labels: &'a [usize],
    pub cond_audio: &'a [Vec<f64>],
    pub ground_truth: &'a [Vec<f64>],
    pub val_audio: &'a [Vec<f64>],
    pub val_images: &'a [Vec<f64>],
    pub prototypes: &'a [Vec<f64>],
}

pub fn evaluate_embedded(inp: &EvalInputs<'_>) -> Result<MetricsReport> {
    if inp.ids.len() != inp.generated.len() {
        return Err(arg_err!("{} ids for {} samples", inp.ids.len(), inp.generated.len()));
    }
    let (ais_v, ais_c) = ais(inp.generated, inp.cond_audio, inp.val_audio)?;
    let (iis_v, iis_c) = iis(inp.generated, inp.ground_truth, inp.val_images)?;
    let (aic_v, preds) = aic(inp.generated, inp.labels, inp.prototypes)?;
    let fid_v = fid(inp.ground_truth, inp.generated)?;
    let per_sample = (0..inp.generated.len())
        .map(|i| SampleRecord {
            id: inp.ids[i].clone(),
            class_id: inp.labels[i],
            predicted: preds[i],
            ais: ais_c[i],
            iis: iis_c[i],
        })
        .collect();
    Ok(MetricsReport {
        ais: ais_v,
        aic: aic_v,
        iis: iis_v,
        fid: fid_v,
        per_sample,
    })
}

impl MetricsReport {
    /// Per-sample records as CSV.
    pub fn per_sample_csv(&self) -> String {
        let mut s = String::from("id,class_id,predicted,ais_below,ais_total,iis_below,iis_total\n");
        for r in &self.per_sample {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.id, r.class_id, r.predicted, r.ais.below, r.ais.total, r.iis.below, r.iis.total
            ));
        }
        s
    }
}
