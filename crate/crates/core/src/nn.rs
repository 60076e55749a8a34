//! Small neural-network toolkit on top of `candle-core`.
//!
//! Parameters are created through a [`Builder`], which either initializes them
//! from a seeded RNG or loads them from a named tensor map. Every parameter is
//! registered in a [`ParamStore`] under its dotted path; trainable parameters are
//! backed by a [`Var`] so gradients reach them, frozen ones are plain tensors.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg_err, Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Randn(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub var: Option<Var>,
}

/// Ordered collection of named parameters.
#[derive(Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, param: Param) {
        self.params.insert(name, param);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter_map(|(n, p)| p.var.clone().map(|v| (n.clone(), v)))
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.tensor.elem_count()).sum()
    }

    /// Detached copies of every parameter, keyed by name.
    pub fn to_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, p) in &self.params {
            out.insert(name.clone(), p.tensor.detach().copy()?);
        }
        Ok(out)
    }

    pub fn merge(&mut self, other: &ParamStore) {
        for (n, p) in &other.params {
            self.params.insert(n.clone(), p.clone());
        }
    }

    /// Byte-level fingerprint of all parameter values (FNV-1a over f32 bits).
    pub fn fingerprint(&self) -> Result<u64> {
        let mut hash = Fnv::default();
        for (name, p) in &self.params {
            hash.write(name.as_bytes());
            let values = p.tensor.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in values {
                hash.write(&v.to_le_bytes());
            }
        }
        Ok(hash.finish())
    }
}

/// 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

struct BuilderState {
    store: RefCell<ParamStore>,
    rng: RefCell<Option<ChaCha8Rng>>,
    loaded: Option<HashMap<String, Tensor>>,
    trainable: bool,
    dtype: DType,
    device: Device,
}

/// Hands out parameters under a dotted prefix.
pub struct Builder {
    state: std::rc::Rc<BuilderState>,
    prefix: String,
}

impl Builder {
    /// Fresh parameters drawn from a seeded RNG.
    pub fn init(seed: u64, dtype: DType, trainable: bool) -> Self {
        Self::new(BuilderState {
            store: RefCell::new(ParamStore::new()),
            rng: RefCell::new(Some(ChaCha8Rng::seed_from_u64(seed))),
            loaded: None,
            trainable,
            dtype,
            device: Device::Cpu,
        })
    }

    /// Parameters taken from `tensors`; names missing from the map are an error.
    pub fn load(tensors: HashMap<String, Tensor>, dtype: DType, trainable: bool) -> Self {
        Self::new(BuilderState {
            store: RefCell::new(ParamStore::new()),
            rng: RefCell::new(None),
            loaded: Some(tensors),
            trainable,
            dtype,
            device: Device::Cpu,
        })
    }

    /// Loads known names and initializes the rest from `seed`.
    pub fn load_or_init(
        tensors: HashMap<String, Tensor>,
        seed: u64,
        dtype: DType,
        trainable: bool,
    ) -> Self {
        Self::new(BuilderState {
            store: RefCell::new(ParamStore::new()),
            rng: RefCell::new(Some(ChaCha8Rng::seed_from_u64(seed))),
            loaded: Some(tensors),
            trainable,
            dtype,
            device: Device::Cpu,
        })
    }

    fn new(state: BuilderState) -> Self {
        Self {
            state: std::rc::Rc::new(state),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Builder {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder {
            state: self.state.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.state.dtype
    }

    pub fn device(&self) -> &Device {
        &self.state.device
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let st = &self.state;
        let base = match st.loaded.as_ref().and_then(|m| m.get(&full)) {
            Some(t) => {
                if t.dims() != shape {
                    return Err(Error::Config(format!(
                        "parameter {full}: stored shape {:?} != expected {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(st.dtype)?
            }
            None => {
                let mut rng = st.rng.borrow_mut();
                let rng = rng
                    .as_mut()
                    .ok_or_else(|| Error::Config(format!("missing parameter {full}")))?;
                let n: usize = shape.iter().product();
                let values: Vec<f64> = match init {
                    Init::Randn(std) => (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(rng);
                            z * std
                        })
                        .collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Const(c) => vec![c; n],
                };
                Tensor::from_vec(values, shape, &st.device)?.to_dtype(st.dtype)?
            }
        };
        let param = if st.trainable {
            let var = Var::from_tensor(&base)?;
            Param {
                tensor: var.as_tensor().clone(),
                var: Some(var),
            }
        } else {
            Param {
                tensor: base.detach(),
                var: None,
            }
        };
        let tensor = param.tensor.clone();
        st.store.borrow_mut().insert(full, param);
        Ok(tensor)
    }

    /// Registers an existing tensor under this builder (used for copied weights).
    pub fn adopt(&self, name: &str, value: &Tensor) -> Result<Tensor> {
        let full = self.full_name(name);
        let st = &self.state;
        let value = match st.loaded.as_ref().and_then(|m| m.get(&full)) {
            Some(t) => t.to_dtype(st.dtype)?,
            None => value.detach().copy()?.to_dtype(st.dtype)?,
        };
        let param = if st.trainable {
            let var = Var::from_tensor(&value)?;
            Param {
                tensor: var.as_tensor().clone(),
                var: Some(var),
            }
        } else {
            Param {
                tensor: value,
                var: None,
            }
        };
        let tensor = param.tensor.clone();
        st.store.borrow_mut().insert(full, param);
        Ok(tensor)
    }

    /// Everything registered so far across all prefixes.
    pub fn store(&self) -> ParamStore {
        self.state.store.borrow().clone()
    }
}

pub fn scalar_tensor(v: f64, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::new(v, &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &Builder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = b.get(
            &[out_dim, in_dim],
            "weight",
            Init::Randn(1.0 / (in_dim as f64).sqrt()),
        )?;
        let bias = if bias {
            Some(b.get(&[out_dim], "bias", Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn zeroed(b: &Builder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = b.get(&[out_dim, in_dim], "weight", Init::Zeros)?;
        let bias = Some(b.get(&[out_dim], "bias", Init::Zeros)?);
        Ok(Self { weight, bias })
    }

    /// Registers copies of `other`'s weights under `b`.
    pub fn copy_of(b: &Builder, other: &Linear) -> Result<Self> {
        let weight = b.adopt("weight", &other.weight)?;
        let bias = match &other.bias {
            Some(bias) => Some(b.adopt("bias", bias)?),
            None => None,
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| arg_err!("linear on a scalar"))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let x2 = x.reshape((rows, in_dim))?;
        let mut y = x2.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &Builder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (in_c * kernel * kernel) as f64;
        let weight = b.get(
            &[out_c, in_c, kernel, kernel],
            "weight",
            Init::Randn(1.0 / fan_in.sqrt()),
        )?;
        let bias = b.get(&[out_c], "bias", Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Zero-initialized weights, for output layers that should start as a no-op.
    pub fn zeroed(
        b: &Builder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: b.get(&[out_c, in_c, kernel, kernel], "weight", Init::Zeros)?,
            bias: b.get(&[out_c], "bias", Init::Zeros)?,
            stride: 1,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// 1-D convolution over `(batch, channels, length)`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(b: &Builder, in_c: usize, out_c: usize, kernel: usize) -> Result<Self> {
        let fan_in = (in_c * kernel) as f64;
        let weight = b.get(
            &[out_c, in_c, kernel],
            "weight",
            Init::Randn(1.0 / fan_in.sqrt()),
        )?;
        let bias = b.get(&[out_c], "bias", Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv1d(&self.weight, self.padding, 1, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Transposed 1-D convolution with kernel 2 and stride 2: every input position
/// emits two output positions through its own linear map.
#[derive(Clone, Debug)]
pub struct Deconv1d {
    proj: Linear,
    out_c: usize,
}

impl Deconv1d {
    pub fn new(b: &Builder, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(b, in_c, 2 * out_c, true)?,
            out_c,
        })
    }

    /// `(batch, in_c, len)` -> `(batch, out_c, 2 * len)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, _, len) = x.dims3()?;
        let y = self.proj.forward(&x.transpose(1, 2)?)?;
        let y = y.reshape((bsz, 2 * len, self.out_c))?;
        Ok(y.transpose(1, 2)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.get(&[dim], "weight", Init::Ones)?,
            beta: b.get(&[dim], "bias", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn copy_of(b: &Builder, other: &LayerNorm) -> Result<Self> {
        Ok(Self {
            gamma: b.adopt("weight", &other.gamma)?,
            beta: b.adopt("bias", &other.beta)?,
            eps: other.eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(b: &Builder, channels: usize, groups: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::Config(format!(
                "group norm: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            gamma: b.get(&[channels], "weight", Init::Ones)?,
            beta: b.get(&[channels], "bias", Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, c, h, w) = x.dims4()?;
        let xg = x.reshape((bsz, self.groups, (c / self.groups) * h * w))?;
        let mean = xg.mean_keepdim(D::Minus1)?;
        let xc = xg.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let xn = xn.reshape((bsz, c, h, w))?;
        Ok(xn
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new(b: &Builder, vocab: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: b.get(&[vocab, dim], "weight", Init::Randn(1.0))?,
        })
    }

    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let shape = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let rows = self.table.index_select(&flat, 0)?;
        let mut out = shape;
        out.push(self.table.dim(1)?);
        Ok(rows.reshape(out)?)
    }
}

/// Numerically stable softmax over the last dimension, built from differentiable ops.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// `log Σ exp(x)` over `dim`, keeping that dimension.
pub fn logsumexp_keepdim(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let s = x.broadcast_sub(&max)?.exp()?.sum_keepdim(dim)?;
    Ok(s.log()?.broadcast_add(&max)?)
}

/// Single-head scaled dot-product attention projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub dim: usize,
}

impl Attention {
    pub fn new(b: &Builder, query_dim: usize, context_dim: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            to_q: Linear::new(&b.pp("to_q"), query_dim, dim, false)?,
            to_k: Linear::new(&b.pp("to_k"), context_dim, dim, false)?,
            to_v: Linear::new(&b.pp("to_v"), context_dim, dim, false)?,
            to_out: Linear::new(&b.pp("to_out"), dim, query_dim, true)?,
            dim,
        })
    }

    pub fn copy_of(b: &Builder, other: &Attention) -> Result<Self> {
        Ok(Self {
            to_q: Linear::copy_of(&b.pp("to_q"), &other.to_q)?,
            to_k: Linear::copy_of(&b.pp("to_k"), &other.to_k)?,
            to_v: Linear::copy_of(&b.pp("to_v"), &other.to_v)?,
            to_out: Linear::copy_of(&b.pp("to_out"), &other.to_out)?,
            dim: other.dim,
        })
    }

    /// Attention probabilities `(batch, queries, keys)`; rows sum to one.
    pub fn probs(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let q = self.to_q.forward(x)?;
        let k = self.to_k.forward(context)?;
        let scores = (q.matmul(&k.transpose(1, 2)?)? / (self.dim as f64).sqrt())?;
        softmax_last(&scores)
    }

    pub fn apply_probs(&self, probs: &Tensor, context: &Tensor) -> Result<Tensor> {
        let v = self.to_v.forward(context)?;
        self.to_out.forward(&probs.matmul(&v)?)
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let probs = self.probs(x, context)?;
        self.apply_probs(&probs, context)
    }
}

/// Two-layer SiLU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(b: &Builder, dim: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&b.pp("fc1"), dim, dim * mult, true)?,
            fc2: Linear::new(&b.pp("fc2"), dim * mult, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.silu()?)
    }
}

/// Pre-norm transformer encoder block used by the projector and text pathway.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ff: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new(b: &Builder, dim: usize, ff_mult: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&b.pp("norm1"), dim)?,
            attn: Attention::new(&b.pp("attn"), dim, dim, dim)?,
            norm2: LayerNorm::new(&b.pp("norm2"), dim)?,
            ff: FeedForward::new(&b.pp("ff"), dim, ff_mult)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// Tensor of standard-normal draws from a seeded generator.
pub fn randn_tensor(
    shape: &[usize],
    rng: &mut impl rand::Rng,
    dtype: DType,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn tensor_to_vec_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

/// Scalar value of a single-element tensor.
pub fn scalar_value(t: &Tensor) -> Result<f64> {
    let v = tensor_to_vec_f64(t)?;
    if v.len() != 1 {
        return Err(arg_err!("expected one element, got {}", v.len()));
    }
    Ok(v[0])
}
