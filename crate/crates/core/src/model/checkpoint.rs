//! JSON checkpoint container.
//!
//! Every tensor is written as `{"rows", "cols", "data"}` alongside the full
//! model config. Floats are emitted in shortest round-trip form and parsed
//! with correct rounding, so save → load is bit-exact.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{
    Backbone, BottleneckAdapter, ClientModel, LmHead, LoraSet, ModelConfig, RewardHead,
};

pub const MODEL_FORMAT: &str = "fedpdpo.model.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vocabulary>,
    pub backbone: Backbone,
    pub lora: LoraSet,
    pub bottleneck: Option<BottleneckAdapter>,
    pub lm_head: LmHead,
    pub reward_head: RewardHead,
}

/// Client-private modules, the per-round checkpoint payload for each client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizedModules {
    pub bottleneck: Option<BottleneckAdapter>,
    pub lm_head: LmHead,
    pub reward_head: RewardHead,
}

impl PersonalizedModules {
    pub fn of(model: &ClientModel) -> Self {
        Self {
            bottleneck: model.bottleneck.clone(),
            lm_head: model.lm_head.clone(),
            reward_head: model.reward_head.clone(),
        }
    }
}

impl ModelCheckpoint {
    pub fn capture(model: &ClientModel, vocabulary: Option<&Vocabulary>) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            config: model.config.clone(),
            vocabulary: vocabulary.cloned(),
            backbone: model.backbone().clone(),
            lora: model.lora.clone(),
            bottleneck: model.bottleneck.clone(),
            lm_head: model.lm_head.clone(),
            reward_head: model.reward_head.clone(),
        }
    }

    pub fn into_model(self) -> Result<(ClientModel, Option<Vocabulary>)> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Schema(format!("unknown checkpoint format {:?}", self.format)));
        }
        self.config.validate()?;
        if self.backbone.config != self.config.backbone {
            return Err(Error::Schema("backbone config disagrees with model config".into()));
        }
        let model = ClientModel::from_parts(
            self.config,
            Arc::new(self.backbone),
            self.lora,
            self.bottleneck,
            self.lm_head,
            self.reward_head,
        );
        Ok((model, self.vocabulary))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub fn save_model(model: &ClientModel, vocabulary: Option<&Vocabulary>, path: &Path) -> Result<()> {
    ModelCheckpoint::capture(model, vocabulary).save(path)
}

pub fn load_model(path: &Path) -> Result<(ClientModel, Option<Vocabulary>)> {
    ModelCheckpoint::load(path)?.into_model()
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let text = serde_json::to_string(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
