//! Denoising backbone, noise schedule and gated audio adapters.

mod adapters;
mod schedule;
mod text;
mod unet;

pub use adapters::{init_adapters_from_text_attention, AdapterState, GatedAdapter, InsertionSet};
pub use schedule::{ddim_timesteps, NoiseSchedule, ScheduleConfig};
pub use text::TextEmbedder;
pub use unet::{
    patchify, timestep_embedding, unpatchify, AdapterNorm, FeatureHooks, SiteTransformer, UNet,
    UNetConfig, DECODER_BLOCKS, MIDDLE_SITE, NUM_SITES,
};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::ParamStore;

/// Maps images to the space the denoiser operates in and back.
pub trait LatentCodec {
    fn encode(&self, images: &Tensor) -> Result<Tensor>;
    fn decode(&self, latents: &Tensor) -> Result<Tensor>;
}

/// Pixel-space diffusion: latents are the images themselves.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        Ok(images.clone())
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(latents.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCount {
    pub name: String,
    pub params: usize,
    pub trainable: bool,
}

/// Parameter counts of the frozen backbone and the trainable adapter/projector groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub groups: Vec<GroupCount>,
    pub trainable: usize,
    pub frozen: usize,
}

impl PartitionReport {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total().max(1) as f64
    }
}

/// Backbone (including the caption embedder) is frozen; adapters and projector train.
pub fn trainable_partition(
    backbone: &ParamStore,
    adapters: &ParamStore,
    projector: &ParamStore,
) -> PartitionReport {
    let groups = vec![
        GroupCount {
            name: "backbone".into(),
            params: backbone.num_elements(),
            trainable: false,
        },
        GroupCount {
            name: "adapters".into(),
            params: adapters.num_elements(),
            trainable: true,
        },
        GroupCount {
            name: "projector".into(),
            params: projector.num_elements(),
            trainable: true,
        },
    ];
    let trainable = groups.iter().filter(|g| g.trainable).map(|g| g.params).sum();
    let frozen = groups.iter().filter(|g| !g.trainable).map(|g| g.params).sum();
    PartitionReport {
        groups,
        trainable,
        frozen,
    }
}
