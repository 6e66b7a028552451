use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams, PARAM_NAMES};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "ldf-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Serialized model plus the metadata needed to resume or evaluate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    /// Training configuration, kept opaque here.
    #[serde(default)]
    pub train: Option<serde_json::Value>,
    #[serde(default)]
    pub best_dev_auc: Option<f64>,
    #[serde(default)]
    pub best_epoch: Option<usize>,
    params: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (name, t) in model.params.named() {
            if let Some(bad) = t.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "parameter {name} holds {bad}; refusing to write checkpoint"
                )));
            }
            params.insert(
                name.to_string(),
                StoredTensor {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            );
        }
        Ok(Self {
            format: FORMAT.into(),
            version: VERSION,
            seed,
            model: model.config.clone(),
            train: None,
            best_dev_auc: None,
            best_epoch: None,
            params,
        })
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut params = self.params;
        let mut take = |name: &str, shape: Vec<usize>| -> Result<Tensor> {
            let s = params
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if s.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    s.shape
                )));
            }
            Ok(Tensor::new(s.shape, s.data)?.with_requires_grad(true))
        };
        let c = &self.model;
        let (d, h) = (c.dim, c.hidden);
        let conv_w = take(PARAM_NAMES[0], vec![c.window, d, h])?;
        let conv_b = take(PARAM_NAMES[1], vec![h])?;
        let att_w = take(PARAM_NAMES[2], vec![h, h])?;
        let att_v = take(PARAM_NAMES[3], vec![h])?;
        let gate_w = take(PARAM_NAMES[4], vec![1, 2])?;
        let gate_b = take(PARAM_NAMES[5], vec![1])?;
        let unk = take(PARAM_NAMES[6], vec![d])?;
        let embeddings = match params.remove(PARAM_NAMES[7]) {
            Some(s) if s.shape.len() == 2 && s.shape[1] == d => {
                Some(Tensor::new(s.shape, s.data)?.with_requires_grad(true))
            }
            Some(s) => {
                return Err(Error::Checkpoint(format!(
                    "embeddings have shape {:?}, expected [_, {d}]",
                    s.shape
                )))
            }
            None => None,
        };
        if c.train_embeddings != embeddings.is_some() {
            return Err(Error::Checkpoint(
                "embedding parameters disagree with train_embeddings".into(),
            ));
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::Checkpoint(format!("unknown parameter {extra}")));
        }
        let params = ModelParams {
            conv_w,
            conv_b,
            att_w,
            att_v,
            gate_w,
            gate_b,
            unk,
            embeddings,
        };
        if !params.all_finite() {
            return Err(Error::Numeric("checkpoint holds non-finite values".into()));
        }
        Ok(Model {
            config: self.model,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
