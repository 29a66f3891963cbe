//! Checkpoints are safetensors files. Tensor names are `param.<name>` for model
//! parameters and `opt.<name>` for optimizer state; the header metadata carries the
//! format id, the model config as JSON, the epoch counter and free-form entries
//! (training config echo, RNG state).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{ModelConfig, MosModel};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "mos-checkpoint/1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
    pub epoch: usize,
    pub metadata: BTreeMap<String, String>,
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

fn from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    };
    Ok(t)
}

impl Checkpoint {
    pub fn from_model(model: &MosModel, epoch: usize) -> Result<Self> {
        Ok(Self {
            model_config: model.config().clone(),
            params: model.params().snapshot()?,
            optimizer: BTreeMap::new(),
            epoch,
            metadata: BTreeMap::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut owned: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
        for (prefix, map) in [("param", &self.params), ("opt", &self.optimizer)] {
            for (name, t) in map {
                let (dtype, bytes) = to_bytes(t)?;
                owned.push((format!("{prefix}.{name}"), dtype, t.dims().to_vec(), bytes));
            }
        }
        let views = owned
            .iter()
            .map(|(n, dt, shape, bytes)| {
                TensorView::new(*dt, shape.clone(), bytes)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta: HashMap<String, String> = self
            .metadata
            .iter()
            .map(|(k, v)| (format!("x.{k}"), v.clone()))
            .collect();
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("model_config".into(), serde_json::to_string(&self.model_config)?);
        meta.insert("epoch".into(), self.epoch.to_string());
        let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint("missing metadata".into()))?;
        match meta.get("format") {
            Some(f) if f == CHECKPOINT_FORMAT => {}
            other => return Err(Error::Checkpoint(format!("unsupported format {other:?}"))),
        }
        let model_config: ModelConfig = serde_json::from_str(
            meta.get("model_config")
                .ok_or_else(|| Error::Checkpoint("missing model_config".into()))?,
        )?;
        let epoch = meta
            .get("epoch")
            .and_then(|e| e.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing epoch".into()))?;
        let metadata = meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("x.").map(|k| (k.to_string(), v.clone())))
            .collect();

        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = from_view(&view)?;
            if let Some(n) = name.strip_prefix("param.") {
                params.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("opt.") {
                optimizer.insert(n.to_string(), t);
            }
        }
        Ok(Self {
            model_config,
            params,
            optimizer,
            epoch,
            metadata,
        })
    }

    /// Rebuild the model described by this checkpoint with its stored parameters.
    pub fn build_model(&self, dtype: DType) -> Result<MosModel> {
        let model = MosModel::new(self.model_config.clone(), dtype)?;
        model.params().load(&self.params)?;
        Ok(model)
    }
}
