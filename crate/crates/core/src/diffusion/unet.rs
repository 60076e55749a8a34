//! Toy denoising UNet laid out like the Stable Diffusion UNet: 12 input blocks,
//! a middle block and 12 output blocks over four resolution levels, with 16
//! transformer sites (6 encoder, 1 middle, 9 decoder) that carry text
//! cross-attention and optional gated audio adapters.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::adapters::AdapterState;
use crate::error::{arg_err, Error, Result};
use crate::nn::{
    Attention, Builder, Conv2d, FeedForward, GroupNorm, LayerNorm, Linear,
};

pub const NUM_SITES: usize = 16;
/// Global index of the middle-block site; decoder block `d` hosts site `d + 4`.
pub const MIDDLE_SITE: usize = 6;
pub const DECODER_BLOCKS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub image_size: usize,
    pub patch: usize,
    pub widths: Vec<usize>,
    pub groups: usize,
    pub context_dim: usize,
    pub time_dim: usize,
    pub ff_mult: usize,
    /// Pixel standard deviation assumed by the linear noise skip; 0 disables it.
    pub sigma_data: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            widths: vec![32, 64, 64, 64],
            groups: 8,
            context_dim: 64,
            time_dim: 128,
            ff_mult: 4,
            sigma_data: 0.5,
        }
    }
}

impl UNetConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.widths.len() != 4 {
            return cfg_err(format!("UNet needs 4 widths, got {}", self.widths.len()));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return cfg_err(format!("patch {} does not tile image size {}", self.patch, self.image_size));
        }
        if self.grid() % 8 != 0 {
            return cfg_err(format!("latent grid {} must be divisible by 8", self.grid()));
        }
        if self.groups == 0 || self.widths.iter().any(|w| w % self.groups != 0) {
            return cfg_err(format!("widths {:?} not divisible by {} groups", self.widths, self.groups));
        }
        if !(self.sigma_data >= 0.0 && self.sigma_data.is_finite()) {
            return cfg_err(format!("sigma_data must be finite and >= 0, got {}", self.sigma_data));
        }
        if self.context_dim == 0 || self.time_dim == 0 || self.ff_mult == 0 {
            return cfg_err("context_dim, time_dim and ff_mult must be positive".into());
        }
        Ok(())
    }
}

/// Pixel-space latent codec: images `(B, 3, H, W)` <-> patch grids `(B, 3p², H/p, W/p)`.
pub fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (gh, gw) = (h / patch, w / patch);
    Ok(x.reshape((b, c, gh, patch, gw, patch))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((b, c * patch * patch, gh, gw))?)
}

pub fn unpatchify(z: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, cp, gh, gw) = z.dims4()?;
    let c = cp / (patch * patch);
    Ok(z.reshape((b, c, patch, patch, gh, gw))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, c, gh * patch, gw * patch))?)
}

/// Sinusoidal timestep features, `(B, dim)`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| step as f64 * f).collect();
        v.extend(args.iter().map(|a| a.cos()));
        v.extend(args.iter().map(|a| a.sin()));
        v.extend(std::iter::repeat(0.0).take(dim - 2 * half));
    }
    Ok(Tensor::from_vec(v, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Recording and injection points used by editing and analysis.
///
/// Keys of the residual and attention maps are decoder block indices (0..12).
#[derive(Debug, Default, Clone)]
pub struct FeatureHooks {
    pub record_residual: BTreeSet<usize>,
    pub record_attention: BTreeSet<usize>,
    pub residual: BTreeMap<usize, Tensor>,
    pub attention: BTreeMap<usize, Tensor>,
    pub inject_residual: BTreeMap<usize, Tensor>,
    pub inject_attention: BTreeMap<usize, Tensor>,
    pub log_adapter_norms: bool,
    pub adapter_norms: Vec<AdapterNorm>,
}

/// Frobenius norm of one adapter's gated output, divided by the batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterNorm {
    pub site: usize,
    pub timestep: usize,
    pub norm: f64,
}

fn match_batch(t: &Tensor, b: usize) -> Result<Tensor> {
    let tb = t.dim(0)?;
    if tb == b {
        Ok(t.clone())
    } else if tb > 0 && b % tb == 0 {
        Ok(Tensor::cat(&vec![t.clone(); b / tb], 0)?)
    } else {
        Err(arg_err!("injected feature batch {tb} does not divide batch {b}"))
    }
}

/// Broadcast `(K, C)` context to `(B, K, C)`; `(B, K, C)` passes through.
fn batched_context(ctx: &Tensor, b: usize) -> Result<Tensor> {
    match ctx.rank() {
        2 => Ok(ctx.unsqueeze(0)?.repeat((b, 1, 1))?),
        3 => match_batch(ctx, b),
        r => Err(arg_err!("context must be rank 2 or 3, got rank {r}")),
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(b: &Builder, in_c: usize, out_c: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&b.pp("norm1"), in_c, cfg.groups)?,
            conv1: Conv2d::new(&b.pp("conv1"), in_c, out_c, 3, 1, 1)?,
            temb: Linear::new(&b.pp("temb"), cfg.time_dim, out_c, true)?,
            norm2: GroupNorm::new(&b.pp("norm2"), out_c, cfg.groups)?,
            conv2: Conv2d::zeroed(&b.pp("conv2"), out_c, out_c, 3, 1)?,
            skip: if in_c != out_c {
                Some(Conv2d::new(&b.pp("skip"), in_c, out_c, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    /// The residual branch, before the shortcut is added.
    fn branch(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        self.conv2.forward(&self.norm2.forward(&h)?.silu()?)
    }

    fn shortcut(&self, x: &Tensor) -> Result<Tensor> {
        match &self.skip {
            Some(c) => c.forward(x),
            None => Ok(x.clone()),
        }
    }

    fn forward(
        &self,
        x: &Tensor,
        temb: &Tensor,
        decoder_block: Option<usize>,
        hooks: Option<&mut FeatureHooks>,
    ) -> Result<Tensor> {
        let mut h = self.branch(x, temb)?;
        if let (Some(d), Some(hooks)) = (decoder_block, hooks) {
            if hooks.record_residual.contains(&d) {
                hooks.residual.insert(d, h.detach());
            }
            if let Some(inj) = hooks.inject_residual.get(&d) {
                h = match_batch(inj, h.dim(0)?)?;
            }
        }
        Ok((self.shortcut(x)? + h)?)
    }
}

/// One transformer site: self-attention, text cross-attention, optional audio
/// adapter and feed-forward, wrapped in a GroupNorm/projection residual.
#[derive(Clone, Debug)]
pub struct SiteTransformer {
    pub site: usize,
    norm: GroupNorm,
    proj_in: Linear,
    norm1: LayerNorm,
    attn1: Attention,
    pub norm2: LayerNorm,
    pub attn2: Attention,
    norm3: LayerNorm,
    ff: FeedForward,
    proj_out: Linear,
}

impl SiteTransformer {
    fn new(b: &Builder, site: usize, c: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self {
            site,
            norm: GroupNorm::new(&b.pp("norm"), c, cfg.groups)?,
            proj_in: Linear::new(&b.pp("proj_in"), c, c, true)?,
            norm1: LayerNorm::new(&b.pp("norm1"), c)?,
            attn1: Attention::new(&b.pp("attn1"), c, c, c)?,
            norm2: LayerNorm::new(&b.pp("norm2"), c)?,
            attn2: Attention::new(&b.pp("attn2"), c, cfg.context_dim, c)?,
            norm3: LayerNorm::new(&b.pp("norm3"), c)?,
            ff: FeedForward::new(&b.pp("ff"), c, cfg.ff_mult)?,
            proj_out: Linear::zeroed(&b.pp("proj_out"), c, c)?,
        })
    }

    pub fn width(&self) -> usize {
        self.attn1.dim
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        x: &Tensor,
        t: &[usize],
        text: &Tensor,
        audio: Option<(&Tensor, &AdapterState)>,
        decoder_block: Option<usize>,
        mut hooks: Option<&mut FeatureHooks>,
    ) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?;
        let mut v = self.proj_in.forward(&tokens)?;

        let n1 = self.norm1.forward(&v)?;
        let mut probs = self.attn1.probs(&n1, &n1)?;
        if let (Some(d), Some(hooks)) = (decoder_block, hooks.as_deref_mut()) {
            if hooks.record_attention.contains(&d) {
                hooks.attention.insert(d, probs.detach());
            }
            if let Some(inj) = hooks.inject_attention.get(&d) {
                probs = match_batch(inj, b)?;
            }
        }
        v = (v + self.attn1.apply_probs(&probs, &n1)?)?;

        v = (&v + self.attn2.forward(&self.norm2.forward(&v)?, text)?)?;

        if let Some((tokens, state)) = audio {
            if let Some(adapter) = state.adapter(self.site) {
                let gated = adapter.gated_output(&v, tokens, state.beta_for(self.site))?;
                if let Some(hooks) = hooks.as_deref_mut() {
                    if hooks.log_adapter_norms {
                        let norm = gated.sqr()?.sum_all()?.sqrt()?.to_dtype(DType::F64)?;
                        hooks.adapter_norms.push(AdapterNorm {
                            site: self.site,
                            timestep: t.first().copied().unwrap_or(0),
                            norm: norm.to_scalar::<f64>()? / b as f64,
                        });
                    }
                }
                v = (v + gated)?;
            }
        }

        v = (&v + self.ff.forward(&self.norm3.forward(&v)?)?)?;
        let out = self.proj_out.forward(&v)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

#[derive(Clone, Debug)]
enum InputBlock {
    Res(ResBlock, Option<SiteTransformer>),
    Down(Conv2d),
}

#[derive(Clone, Debug)]
struct OutputBlock {
    res: ResBlock,
    attn: Option<SiteTransformer>,
    up: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    cfg: UNetConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    input_blocks: Vec<InputBlock>,
    mid_res1: ResBlock,
    mid_attn: SiteTransformer,
    mid_res2: ResBlock,
    output_blocks: Vec<OutputBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    /// Per-timestep coefficient `k_t` of the noise skip `ε̂ = k_t z + f(z, t)`.
    skip: Option<Vec<f64>>,
}

impl UNet {
    pub fn new(b: &Builder, cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.widths;
        let lc = cfg.latent_channels();
        let time1 = Linear::new(&b.pp("time.fc1"), w[0], cfg.time_dim, true)?;
        let time2 = Linear::new(&b.pp("time.fc2"), cfg.time_dim, cfg.time_dim, true)?;
        let conv_in = Conv2d::new(&b.pp("conv_in"), lc, w[0], 3, 1, 1)?;

        let mut input_blocks = Vec::new();
        let mut skip_channels = vec![w[0]];
        let mut ch = w[0];
        let mut site = 0;
        for level in 0..4 {
            for _ in 0..2 {
                let bp = b.pp(format!("input_blocks.{}", input_blocks.len() + 1));
                let res = ResBlock::new(&bp.pp("res"), ch, w[level], cfg)?;
                ch = w[level];
                let attn = if level < 3 {
                    site += 1;
                    Some(SiteTransformer::new(&bp.pp("attn"), site - 1, ch, cfg)?)
                } else {
                    None
                };
                input_blocks.push(InputBlock::Res(res, attn));
                skip_channels.push(ch);
            }
            if level < 3 {
                let bp = b.pp(format!("input_blocks.{}", input_blocks.len() + 1));
                input_blocks.push(InputBlock::Down(Conv2d::new(&bp.pp("down"), ch, ch, 3, 2, 1)?));
                skip_channels.push(ch);
            }
        }

        let mid_res1 = ResBlock::new(&b.pp("middle.res1"), ch, ch, cfg)?;
        let mid_attn = SiteTransformer::new(&b.pp("middle.attn"), MIDDLE_SITE, ch, cfg)?;
        let mid_res2 = ResBlock::new(&b.pp("middle.res2"), ch, ch, cfg)?;

        let mut output_blocks = Vec::new();
        for level in (0..4).rev() {
            for i in 0..3 {
                let d = output_blocks.len();
                let bp = b.pp(format!("output_blocks.{d}"));
                let skip = skip_channels.pop().expect("skip count matches decoder");
                let res = ResBlock::new(&bp.pp("res"), ch + skip, w[level], cfg)?;
                ch = w[level];
                let attn = if level < 3 {
                    Some(SiteTransformer::new(&bp.pp("attn"), d + 4, ch, cfg)?)
                } else {
                    None
                };
                let up = if level > 0 && i == 2 {
                    Some(Conv2d::new(&bp.pp("up"), ch, ch, 3, 1, 1)?)
                } else {
                    None
                };
                output_blocks.push(OutputBlock { res, attn, up });
            }
        }
        let norm_out = GroupNorm::new(&b.pp("norm_out"), ch, cfg.groups)?;
        let conv_out = Conv2d::zeroed(&b.pp("conv_out"), ch, lc, 3, 1)?;
        Ok(Self {
            cfg: cfg.clone(),
            time1,
            time2,
            conv_in,
            input_blocks,
            mid_res1,
            mid_attn,
            mid_res2,
            output_blocks,
            norm_out,
            conv_out,
            skip: None,
        })
    }

    /// Adds the linear minimum-variance noise estimate
    /// `k_t = sqrt(1 - ᾱ_t) / (ᾱ_t σ² + 1 - ᾱ_t)` to the network output, so the
    /// network only learns the residual. No-op when `sigma_data` is 0.
    pub fn with_noise_skip(mut self, alpha_bars: &[f64]) -> Self {
        let s2 = self.cfg.sigma_data * self.cfg.sigma_data;
        self.skip = (s2 > 0.0).then(|| {
            alpha_bars
                .iter()
                .map(|ab| (1.0 - ab).sqrt() / (ab * s2 + 1.0 - ab))
                .collect()
        });
        self
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// All transformer sites in global index order.
    pub fn sites(&self) -> Vec<&SiteTransformer> {
        let mut out: Vec<&SiteTransformer> = self
            .input_blocks
            .iter()
            .filter_map(|b| match b {
                InputBlock::Res(_, a) => a.as_ref(),
                InputBlock::Down(_) => None,
            })
            .collect();
        out.push(&self.mid_attn);
        out.extend(self.output_blocks.iter().filter_map(|b| b.attn.as_ref()));
        out
    }

    pub fn site(&self, index: usize) -> Option<&SiteTransformer> {
        self.sites().into_iter().find(|s| s.site == index)
    }

    /// Decoder block indices that carry a transformer site.
    pub fn attention_decoder_blocks(&self) -> Vec<usize> {
        (0..self.output_blocks.len())
            .filter(|&d| self.output_blocks[d].attn.is_some())
            .collect()
    }

    /// Predicts the noise in `x` (images in pixel space, `(B, 3, H, W)`).
    ///
    /// `text` is `(B, K, C)` or a shared `(K, C)`. Supplying adapters without
    /// audio tokens is an error; audio tokens without adapters are ignored.
    pub fn forward(
        &self,
        x: &Tensor,
        t: &[usize],
        text: &Tensor,
        audio: Option<&Tensor>,
        adapters: Option<&AdapterState>,
        mut hooks: Option<&mut FeatureHooks>,
    ) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != 3 || h != self.cfg.image_size || w != self.cfg.image_size {
            return Err(arg_err!(
                "expected (B, 3, {s}, {s}) input, got {:?}",
                x.dims(),
                s = self.cfg.image_size
            ));
        }
        if t.len() != b {
            return Err(arg_err!("{} timesteps for a batch of {b}", t.len()));
        }
        let text = batched_context(text, b)?;
        let audio = match (adapters, audio) {
            (Some(_), None) => return Err(arg_err!("adapters supplied without audio tokens")),
            (Some(state), Some(a)) => Some((batched_context(a, b)?, state)),
            (None, _) => None,
        };
        let audio_ref = audio.as_ref().map(|(a, s)| (a, *s));

        let dtype = x.dtype();
        let temb = timestep_embedding(t, self.cfg.widths[0], dtype)?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;

        let mut hcur = self.conv_in.forward(&patchify(x, self.cfg.patch)?)?;
        let mut skips = vec![hcur.clone()];
        for block in &self.input_blocks {
            hcur = match block {
                InputBlock::Res(res, attn) => {
                    let y = res.forward(&hcur, &temb, None, None)?;
                    match attn {
                        Some(a) => a.forward(&y, t, &text, audio_ref, None, hooks.as_deref_mut())?,
                        None => y,
                    }
                }
                InputBlock::Down(conv) => conv.forward(&hcur)?,
            };
            skips.push(hcur.clone());
        }

        hcur = self.mid_res1.forward(&hcur, &temb, None, None)?;
        hcur = self
            .mid_attn
            .forward(&hcur, t, &text, audio_ref, None, hooks.as_deref_mut())?;
        hcur = self.mid_res2.forward(&hcur, &temb, None, None)?;

        for (d, block) in self.output_blocks.iter().enumerate() {
            let skip = skips.pop().expect("skip count matches decoder");
            let cat = Tensor::cat(&[&hcur, &skip], 1)?;
            hcur = block.res.forward(&cat, &temb, Some(d), hooks.as_deref_mut())?;
            if let Some(a) = &block.attn {
                hcur = a.forward(&hcur, t, &text, audio_ref, Some(d), hooks.as_deref_mut())?;
            }
            if let Some(up) = &block.up {
                let (_, _, gh, gw) = hcur.dims4()?;
                hcur = up.forward(&hcur.upsample_nearest2d(2 * gh, 2 * gw)?)?;
            }
        }
        let out = self.conv_out.forward(&self.norm_out.forward(&hcur)?.silu()?)?;
        let out = unpatchify(&out, self.cfg.patch)?;
        match &self.skip {
            None => Ok(out),
            Some(k) => {
                let coef = t
                    .iter()
                    .map(|&ti| {
                        k.get(ti)
                            .copied()
                            .ok_or_else(|| arg_err!("timestep {ti} outside the noise skip table"))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let coef = Tensor::from_vec(coef, (b, 1, 1, 1), x.device())?.to_dtype(dtype)?;
                Ok((out + x.broadcast_mul(&coef)?)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn_tensor, tensor_to_vec_f32};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> UNetConfig {
        UNetConfig {
            image_size: 16,
            patch: 2,
            widths: vec![8, 16, 16, 16],
            groups: 4,
            context_dim: 8,
            time_dim: 16,
            ff_mult: 2,
            sigma_data: 0.0,
        }
    }

    #[test]
    fn patchify_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn_tensor(&[2, 3, 8, 8], &mut rng, DType::F32).unwrap();
        let z = patchify(&x, 4).unwrap();
        assert_eq!(z.dims(), &[2, 48, 2, 2]);
        let back = unpatchify(&z, 4).unwrap();
        assert_eq!(tensor_to_vec_f32(&back).unwrap(), tensor_to_vec_f32(&x).unwrap());
    }

    #[test]
    fn sixteen_sites_in_order() {
        let b = Builder::init(0, DType::F32, false);
        let net = UNet::new(&b, &small_cfg()).unwrap();
        let sites: Vec<usize> = net.sites().iter().map(|s| s.site).collect();
        assert_eq!(sites, (0..NUM_SITES).collect::<Vec<_>>());
        assert_eq!(net.attention_decoder_blocks(), (3..12).collect::<Vec<_>>());
    }

    #[test]
    fn forward_shape() {
        let cfg = small_cfg();
        let b = Builder::init(1, DType::F32, false);
        let net = UNet::new(&b, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn_tensor(&[2, 3, 16, 16], &mut rng, DType::F32).unwrap();
        let text = randn_tensor(&[4, 8], &mut rng, DType::F32).unwrap();
        let y = net.forward(&x, &[3, 500], &text, None, None, None).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert!(net.forward(&x, &[3], &text, None, None, None).is_err());
    }

    #[test]
    fn bad_config_rejected() {
        let b = Builder::init(0, DType::F32, false);
        let mut cfg = small_cfg();
        cfg.widths = vec![8, 16];
        assert!(UNet::new(&b, &cfg).is_err());
        let mut cfg = small_cfg();
        cfg.groups = 3;
        assert!(UNet::new(&b, &cfg).is_err());
    }
}
