use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FlowModel;
use crate::data::PreprocessSpec;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "hqcnf-checkpoint";

/// Image geometry and pixel mapping the model was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub height: usize,
    pub width: usize,
    pub preprocess: PreprocessSpec,
}

/// Versioned JSON container for a model and its image metadata.
///
/// Floats are written in shortest round-trip form and parsed with exact
/// rounding, so save → load reproduces every parameter bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: FlowModel,
    #[serde(default)]
    pub image: Option<ImageMeta>,
}

impl Checkpoint {
    pub fn new(model: FlowModel, image: Option<ImageMeta>) -> Self {
        Self {
            format: FORMAT_TAG.to_string(),
            version: CHECKPOINT_VERSION,
            model,
            image,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let parse_err = |e: serde_json::Error| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        };
        let raw: serde_json::Value = serde_json::from_str(text).map_err(parse_err)?;
        if raw.get("format").and_then(|f| f.as_str()) != Some(FORMAT_TAG) {
            return Err(Error::Parse {
                line: 1,
                message: format!("not a {FORMAT_TAG} file"),
            });
        }
        let found = raw
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: "missing version".into(),
            })? as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        serde_json::from_value(raw).map_err(parse_err)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
