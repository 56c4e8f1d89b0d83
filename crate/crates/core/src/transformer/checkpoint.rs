use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, TrainReport};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// On-disk model: config plus flat named parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
    /// Present when the parameters came out of a training run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_report: Option<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            config: model.config.clone(),
            params: model
                .params
                .named()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            train_report: None,
        }
    }

    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(self.config)?;
        let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, config expects {}",
                self.params.len(),
                names.len()
            )));
        }
        for ((slot, name), saved) in model.params.refs_mut().into_iter().zip(&names).zip(self.params) {
            if *name != saved.name || slot.shape() != saved.shape.as_slice() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} {:?} does not match {} {:?}",
                    saved.name,
                    saved.shape,
                    name,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(saved.shape, saved.data)?;
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, train_report: Option<&TrainReport>, path: &Path) -> Result<()> {
    let mut ckpt = Checkpoint::from_model(model);
    ckpt.train_report = train_report.cloned();
    std::fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(())
}

/// The model and, if it was saved after training, the training report.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<TrainReport>)> {
    let text = std::fs::read_to_string(path)?;
    let mut ckpt: Checkpoint = serde_json::from_str(&text)?;
    let report = ckpt.train_report.take();
    Ok((ckpt.into_model()?, report))
}
