//! Run configuration: JSON file plus command-line overrides, and the
//! canonical hash embedded in every artifact.

use std::path::Path;

use epigeo_core::alignment::LossConfig;
use epigeo_core::dataset::PairFilter;
use epigeo_core::scoring::ScoringConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::formats::sha256_hex;
use crate::io::IoError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct RunConfig {
    /// Features, RANSAC and aggregation settings.
    pub scoring: ScoringConfig,
    /// Frames are downscaled so that no edge exceeds this; `None` keeps
    /// full resolution.
    pub max_dim: Option<usize>,
    pub pairs: PairFilter,
    pub alignment: LossConfig,
}


impl RunConfig {
    /// Defaults overlaid with a (possibly partial) JSON object. Unknown keys
    /// are rejected.
    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let overlay: Value = serde_json::from_str(text).map_err(|e| IoError::Input(format!("config: {e}")))?;
        let mut base = serde_json::to_value(Self::default()).unwrap();
        merge(&mut base, overlay, "")?;
        let cfg: Self = serde_json::from_value(base).map_err(|e| IoError::Input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, IoError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::from_json(&std::fs::read_to_string(p).map_err(|e| IoError::file(p, e))?),
        }
    }

    pub fn validate(&self) -> Result<(), IoError> {
        self.scoring.validate()?;
        self.pairs.validate()?;
        if self.max_dim.is_some_and(|m| m < epigeo_core::image::MIN_FRAME_DIM) {
            return Err(IoError::Input(format!(
                "max_dim must be at least {}",
                epigeo_core::image::MIN_FRAME_DIM
            )));
        }
        Ok(())
    }

    /// Serialized form with sorted keys.
    pub fn canonical(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        canonical_hash(&self.canonical())
    }
}

/// SHA-256 of the compact JSON form. Object keys are kept sorted by
/// `serde_json`'s map, and floats use its shortest round-trip formatting.
pub fn canonical_hash(v: &Value) -> String {
    sha256_hex(serde_json::to_string(v).unwrap().as_bytes())
}

fn merge(base: &mut Value, overlay: Value, path: &str) -> Result<(), IoError> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    // Tagged enums and optional values are replaced whole.
                    Some(slot) if slot.is_object() && v.is_object() && slot.get("mode").is_none() => merge(slot, v, &here)?,
                    Some(slot) => *slot = v,
                    None => return Err(IoError::Input(format!("config: unknown key {here}"))),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}
