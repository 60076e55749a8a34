//! Checkpoints as safetensors archives with a metadata header.
//!
//! Parameter names carry their group as the first path segment
//! (`backbone.`, `text.`, `projector.`, `adapters.`, `embedder.`); optimizer
//! moments are stored under `optim.<group>.`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::config::RunConfig;
use crate::diffusion::{InsertionSet, PartitionReport};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_VERSION: &str = "audiogate-ckpt-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Backbone,
    Projector,
    Adapters,
    Embedder,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::Projector => "projector",
            Stage::Adapters => "adapters",
            Stage::Embedder => "embedder",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "backbone" => Some(Stage::Backbone),
            "projector" => Some(Stage::Projector),
            "adapters" => Some(Stage::Adapters),
            "embedder" => Some(Stage::Embedder),
            _ => None,
        }
    }
}

#[derive(Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: RunConfig,
    pub step: usize,
    pub insertion_set: Option<InsertionSet>,
    pub partition: Option<PartitionReport>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(stage: Stage, config: RunConfig, step: usize) -> Self {
        Self {
            stage,
            config,
            step,
            insertion_set: None,
            partition: None,
            tensors: BTreeMap::new(),
        }
    }

    pub fn add_params(&mut self, store: &ParamStore) -> Result<()> {
        self.tensors.extend(store.to_tensors()?);
        Ok(())
    }

    pub fn add_optimizer(&mut self, group: &str, state: BTreeMap<String, Tensor>) {
        for (k, v) in state {
            self.tensors.insert(format!("optim.{group}.{k}"), v);
        }
    }

    /// Tensors whose names start with `<group>.`, keys unchanged.
    pub fn group(&self, group: &str) -> HashMap<String, Tensor> {
        let prefix = format!("{group}.");
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn has_group(&self, group: &str) -> bool {
        let prefix = format!("{group}.");
        self.tensors.keys().any(|k| k.starts_with(&prefix))
    }

    /// Optimizer moments for `group`, keyed as [`crate::optim::AdamW::load_state`] expects.
    pub fn optimizer(&self, group: &str) -> BTreeMap<String, Tensor> {
        let prefix = format!("optim.{group}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut data = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            data.push((name.clone(), t.dims().to_vec(), bytes));
        }
        let views = data
            .iter()
            .map(|(n, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::format(path, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
        meta.insert("stage".to_string(), self.stage.as_str().to_string());
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("config".to_string(), self.config.to_toml()?);
        if let Some(set) = self.insertion_set {
            meta.insert("insertion_set".to_string(), set.as_str().to_string());
        }
        if let Some(p) = &self.partition {
            let json = serde_json::to_string(p).map_err(|e| Error::format(path, e.to_string()))?;
            meta.insert("partition".to_string(), json);
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
            }
        }
        safetensors::serialize_to_file(views, Some(meta), path)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        let (_, header) =
            SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::format(path, "missing metadata header"))?;
        let get = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::format(path, format!("missing metadata key {k}")))
        };
        let version = get("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let stage = Stage::parse(&get("stage")?)
            .ok_or_else(|| Error::format(path, "unknown stage"))?;
        let step = get("step")?
            .parse()
            .map_err(|_| Error::format(path, "bad step"))?;
        let config = RunConfig::from_toml(&get("config")?)?;
        let insertion_set = match meta.get("insertion_set") {
            Some(s) => Some(s.parse().map_err(|e: Error| Error::format(path, e.to_string()))?),
            None => None,
        };
        let partition = match meta.get("partition") {
            Some(s) => Some(serde_json::from_str(s).map_err(|e| Error::format(path, e.to_string()))?),
            None => None,
        };
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::format(path, format!("{name}: expected F32")));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::from_vec(values, view.shape(), &Device::Cpu)?);
        }
        Ok(Self {
            stage,
            config,
            step,
            insertion_set,
            partition,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Builder, Init};

    #[test]
    fn round_trip_preserves_everything() {
        let b = Builder::init(3, DType::F32, true);
        b.pp("projector").get(&[2, 3], "w", Init::Randn(1.0)).unwrap();
        b.pp("adapters").get(&[1], "gamma", Init::Const(0.25)).unwrap();
        let mut ck = Checkpoint::new(Stage::Adapters, RunConfig::default(), 17);
        ck.add_params(&b.store()).unwrap();
        ck.insertion_set = Some(InsertionSet::All);
        ck.partition = Some(PartitionReport {
            groups: vec![],
            trainable: 7,
            frozen: 3,
        });
        let mut state = BTreeMap::new();
        state.insert("m.projector.w".into(), Tensor::ones((2, 3), DType::F32, &Device::Cpu).unwrap());
        ck.add_optimizer("stage2", state);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.stage, Stage::Adapters);
        assert_eq!(back.step, 17);
        assert_eq!(back.insertion_set, Some(InsertionSet::All));
        assert_eq!(back.partition, ck.partition);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.tensors.len(), 3);
        for (k, v) in &ck.tensors {
            let a = v.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = back.tensors[k].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(back.group("projector").len(), 1);
        assert!(back.optimizer("stage2").contains_key("m.projector.w"));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = Checkpoint::load(Path::new("/nonexistent/ck.safetensors")).err().unwrap();
        assert!(matches!(err, Error::Io { .. }));
    }
}
