use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::unet::{UNet, MIDDLE_SITE, NUM_SITES};
use crate::error::{arg_err, Error, Result};
use crate::nn::{scalar_value, Attention, Builder, FeedForward, Init, LayerNorm, ParamStore};

/// Which transformer sites receive an audio adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InsertionSet {
    /// Middle block plus all nine decoder sites (global 6..=15).
    #[default]
    MiddleDecoder,
    /// Decoder layers 6 to 11 (global 10..=15).
    Decoder6To11,
    All,
}

impl InsertionSet {
    pub const ALL: [InsertionSet; 3] = [
        InsertionSet::MiddleDecoder,
        InsertionSet::Decoder6To11,
        InsertionSet::All,
    ];

    pub fn sites(&self) -> Vec<usize> {
        match self {
            InsertionSet::MiddleDecoder => (MIDDLE_SITE..NUM_SITES).collect(),
            InsertionSet::Decoder6To11 => (10..NUM_SITES).collect(),
            InsertionSet::All => (0..NUM_SITES).collect(),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            InsertionSet::MiddleDecoder => "middle-decoder",
            InsertionSet::Decoder6To11 => "decoder-6-11",
            InsertionSet::All => "all",
        }
    }
}

impl fmt::Display for InsertionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InsertionSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InsertionSet::ALL
            .into_iter()
            .find(|set| set.as_str() == s)
            .ok_or_else(|| arg_err!("unknown insertion set {s:?} (middle-decoder, decoder-6-11, all)"))
    }
}

/// Gated audio cross-attention: `v + β·tanh(γ)·h`, with
/// `h = CrossAttn(LN(v), audio)` followed by `h += FF(LN(h))`.
#[derive(Clone, Debug)]
pub struct GatedAdapter {
    pub norm: LayerNorm,
    pub attn: Attention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
    pub gamma: Tensor,
}

impl GatedAdapter {
    pub fn branch(&self, v: &Tensor, audio: &Tensor) -> Result<Tensor> {
        let h = self.attn.forward(&self.norm.forward(v)?, audio)?;
        Ok((&h + self.ff.forward(&self.ff_norm.forward(&h)?)?)?)
    }

    /// `β·tanh(γ)·branch(v)`; the caller adds it to `v`.
    pub fn gated_output(&self, v: &Tensor, audio: &Tensor, beta: f64) -> Result<Tensor> {
        let gate = (self.gamma.tanh()? * beta)?;
        Ok(self.branch(v, audio)?.broadcast_mul(&gate)?)
    }

    pub fn gamma_value(&self) -> Result<f64> {
        scalar_value(&self.gamma)
    }
}

#[derive(Clone)]
pub struct AdapterState {
    pub insertion_set: InsertionSet,
    adapters: BTreeMap<usize, GatedAdapter>,
    /// Global audio strength.
    pub beta: f64,
    /// Per-site overrides of `beta`.
    pub site_beta: BTreeMap<usize, f64>,
    params: ParamStore,
}

impl AdapterState {
    pub fn adapter(&self, site: usize) -> Option<&GatedAdapter> {
        self.adapters.get(&site)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn sites(&self) -> Vec<usize> {
        self.adapters.keys().copied().collect()
    }

    pub fn beta_for(&self, site: usize) -> f64 {
        self.site_beta.get(&site).copied().unwrap_or(self.beta)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn gammas(&self) -> Result<Vec<(usize, f64)>> {
        self.adapters
            .iter()
            .map(|(s, a)| Ok((*s, a.gamma_value()?)))
            .collect()
    }

    /// Copy with every gate set to the constant `gamma` (detached from training).
    pub fn with_gamma(&self, gamma: f64) -> Result<AdapterState> {
        let mut out = self.clone();
        for a in out.adapters.values_mut() {
            a.gamma = (a.gamma.detach().zeros_like()? + gamma)?;
        }
        Ok(out)
    }

    pub fn with_beta(&self, beta: f64) -> AdapterState {
        let mut out = self.clone();
        out.beta = beta;
        out
    }
}

/// Builds one adapter per site of `insertion_set`, copying attention and
/// normalization weights from the site's text cross-attention; the gate starts
/// at zero and the feed-forward is freshly initialized. Names already present
/// in a loading builder take precedence over the copies.
pub fn init_adapters_from_text_attention(
    backbone: &UNet,
    insertion_set: InsertionSet,
    audio_channels: usize,
    ff_mult: usize,
    b: &Builder,
) -> Result<AdapterState> {
    let ctx = backbone.config().context_dim;
    if audio_channels != ctx {
        return Err(Error::Config(format!(
            "audio tokens have {audio_channels} channels but text tokens have {ctx}"
        )));
    }
    let mut adapters = BTreeMap::new();
    for site in insertion_set.sites() {
        let src = backbone
            .site(site)
            .ok_or_else(|| Error::Config(format!("backbone has no site {site}")))?;
        let sb = b.pp(format!("site{site:02}"));
        let width = src.width();
        adapters.insert(
            site,
            GatedAdapter {
                norm: LayerNorm::copy_of(&sb.pp("norm"), &src.norm2)?,
                attn: Attention::copy_of(&sb.pp("attn"), &src.attn2)?,
                ff_norm: LayerNorm::new(&sb.pp("ff_norm"), width)?,
                ff: FeedForward::new(&sb.pp("ff"), width, ff_mult)?,
                gamma: sb.get(&[1], "gamma", Init::Zeros)?,
            },
        );
    }
    let params = b.store();
    Ok(AdapterState {
        insertion_set,
        adapters,
        beta: 1.0,
        site_beta: BTreeMap::new(),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::UNetConfig;
    use crate::nn::tensor_to_vec_f32;
    use candle_core::DType;

    fn tiny() -> UNet {
        let cfg = UNetConfig {
            image_size: 16,
            patch: 2,
            widths: vec![8, 16, 16, 16],
            groups: 4,
            context_dim: 8,
            time_dim: 16,
            ff_mult: 2,
            sigma_data: 0.0,
        };
        UNet::new(&Builder::init(0, DType::F32, false), &cfg).unwrap()
    }

    #[test]
    fn site_counts() {
        let net = tiny();
        let counts: Vec<usize> = InsertionSet::ALL
            .iter()
            .map(|s| {
                let b = Builder::init(1, DType::F32, true);
                init_adapters_from_text_attention(&net, *s, 8, 2, &b).unwrap().len()
            })
            .collect();
        assert_eq!(counts, vec![10, 6, 16]);
    }

    #[test]
    fn weights_copied_and_gate_zero() {
        let net = tiny();
        let b = Builder::init(1, DType::F32, true);
        let st = init_adapters_from_text_attention(&net, InsertionSet::All, 8, 2, &b).unwrap();
        for site in 0..NUM_SITES {
            let a = st.adapter(site).unwrap();
            let src = net.site(site).unwrap();
            for (x, y) in [
                (&a.attn.to_q.weight, &src.attn2.to_q.weight),
                (&a.attn.to_k.weight, &src.attn2.to_k.weight),
                (&a.attn.to_v.weight, &src.attn2.to_v.weight),
            ] {
                assert_eq!(tensor_to_vec_f32(x).unwrap(), tensor_to_vec_f32(y).unwrap());
            }
            assert_eq!(a.gamma_value().unwrap(), 0.0);
        }
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let net = tiny();
        let b = Builder::init(1, DType::F32, true);
        let err = init_adapters_from_text_attention(&net, InsertionSet::All, 9, 2, &b);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn parse_round_trip() {
        for s in InsertionSet::ALL {
            assert_eq!(s.as_str().parse::<InsertionSet>().unwrap(), s);
        }
        assert!("decoder".parse::<InsertionSet>().is_err());
    }
}
