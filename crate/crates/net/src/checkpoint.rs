//! Versioned JSON checkpoints of named parameter arrays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError, Param};
use crate::train::Adam;

pub const FORMAT: &str = "maskdet-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("field `format`: expected \"{FORMAT}\", found \"{0}\"")]
    Format(String),
    #[error("field `version`: expected {VERSION}, found {0}")]
    Version(u32),
    #[error("field `{field}`: checkpoint has {found}, expected {expected}")]
    Mismatch { field: String, expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub params: Vec<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn new(model: &Model, optimizer: Option<&Adam>) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            model: model.config.clone(),
            params: model.params.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        // Check the tags before the body so a foreign file gets a useful error.
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header = serde_json::from_str(text)?;
        if header.format != FORMAT {
            return Err(CheckpointError::Format(header.format));
        }
        if header.version != VERSION {
            return Err(CheckpointError::Version(header.version));
        }
        let ck: Checkpoint = serde_json::from_str(text)?;
        ck.model_ref().validate()?;
        if let Some(adam) = &ck.optimizer {
            for (name, state) in [("optimizer.m", &adam.m), ("optimizer.v", &adam.v)] {
                let found: Vec<usize> = state.iter().map(Vec::len).collect();
                let expected: Vec<usize> = ck.params.iter().map(|p| p.data.len()).collect();
                if found != expected {
                    return Err(CheckpointError::Mismatch { field: name.into(), expected: format!("{expected:?}"), found: format!("{found:?}") });
                }
            }
        }
        Ok(ck)
    }

    fn model_ref(&self) -> Model {
        Model { config: self.model.clone(), params: self.params.clone() }
    }

    pub fn into_model(self) -> Model {
        Model { config: self.model, params: self.params }
    }

    /// Reject a checkpoint whose architecture differs from `expected`,
    /// naming the first differing field.
    pub fn expect_config(&self, expected: &ModelConfig) -> Result<(), CheckpointError> {
        let (a, b) = (&self.model, expected);
        let fields: [(&str, String, String); 8] = [
            ("model.in_channels", a.in_channels.to_string(), b.in_channels.to_string()),
            ("model.num_classes", a.num_classes.to_string(), b.num_classes.to_string()),
            ("model.channels", format!("{:?}", a.channels), format!("{:?}", b.channels)),
            ("model.strides", format!("{:?}", a.strides), format!("{:?}", b.strides)),
            ("model.embed_dim", a.embed_dim.to_string(), b.embed_dim.to_string()),
            ("model.reduction", a.reduction.to_string(), b.reduction.to_string()),
            ("model.spatial_kernel", a.spatial_kernel.to_string(), b.spatial_kernel.to_string()),
            ("model.cbam", format!("{:?}", a.cbam), format!("{:?}", b.cbam)),
        ];
        match fields.into_iter().find(|(_, found, expected)| found != expected) {
            Some((field, found, expected)) => Err(CheckpointError::Mismatch { field: field.into(), expected, found }),
            None => Ok(()),
        }
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, optimizer: Option<&Adam>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, Checkpoint::new(model, optimizer).to_json()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    Checkpoint::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_are_checked_first() {
        let model = Model::init(ModelConfig::micro(), 0).unwrap();
        let mut ck = Checkpoint::new(&model, None);
        ck.version = 9;
        let err = Checkpoint::from_json(&ck.to_json()).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        ck.version = VERSION;
        ck.format = "other".into();
        assert!(Checkpoint::from_json(&ck.to_json()).unwrap_err().to_string().contains("format"));
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let model = Model::init(ModelConfig::micro(), 0).unwrap();
        let mut ck = Checkpoint::new(&model, None);
        ck.params[1].shape = [5, 1, 1];
        let err = Checkpoint::from_json(&ck.to_json()).unwrap_err();
        assert!(err.to_string().contains("block0.conv.bias"), "{err}");
    }
}
