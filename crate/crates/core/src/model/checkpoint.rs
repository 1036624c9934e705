use super::{Model, ModelError};
use crate::selection::Standardization;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const FORMAT: &str = "mogkan-checkpoint";
const VERSION: u32 = 1;

/// A trained model with what is needed to score new samples: class names and
/// the feature standardization fitted on its training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub classes: Vec<String>,
    pub standardization: Option<Standardization>,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, classes: Vec<String>, standardization: Option<Standardization>) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            classes,
            standardization,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != FORMAT || ckpt.version != VERSION {
            return Err(ModelError::InvalidConfig(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        if !ckpt.classes.is_empty() && ckpt.classes.len() != ckpt.model.config().num_classes {
            return Err(ModelError::InvalidConfig(format!(
                "{} class names for {} classes",
                ckpt.classes.len(),
                ckpt.model.config().num_classes
            )));
        }
        if let Some(s) = &ckpt.standardization {
            let d = ckpt.model.config().num_features;
            if s.mean.len() != d || s.std.len() != d {
                return Err(ModelError::InvalidConfig(
                    "standardization width differs from feature count".into(),
                ));
            }
        }
        Ok(ckpt)
    }
}

/// Writes the checkpoint through a temporary file in the target directory,
/// renamed into place once complete.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(checkpoint.to_json()?.as_bytes())?;
    tmp.write_all(b"\n")?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    Checkpoint::from_json(&std::fs::read_to_string(path)?)
}
