//! Checkpoint container: a single JSON document holding the model and
//! feature configuration, the segment order, the normalizer and every named
//! parameter tensor (shape plus row-major data).
//!
//! ```json
//! { "format": "gcn-rwz-checkpoint", "version": 1,
//!   "model_config": {...}, "feature_options": {...},
//!   "segment_ids": [...], "slots_per_week": 672,
//!   "normalizer": {"vmin": .., "vmax": ..},
//!   "params": [{"name": "lift.weight", "shape": [32, 1], "data": [...]}, ...] }
//! ```
//!
//! Floats are written with shortest round-trip formatting, so a saved and
//! reloaded checkpoint reproduces predictions bit for bit.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::features::{FeatureOptions, Normalizer};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const FORMAT: &str = "gcn-rwz-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    model_config: ModelConfig,
    feature_options: FeatureOptions,
    segment_ids: Vec<String>,
    slots_per_week: usize,
    normalizer: Normalizer,
    params: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub feature_options: FeatureOptions,
    pub segment_ids: Vec<String>,
    pub normalizer: Normalizer,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let doc = Document {
            format: FORMAT.into(),
            version: VERSION,
            model_config: self.model.config.clone(),
            feature_options: self.feature_options,
            segment_ids: self.segment_ids.clone(),
            slots_per_week: self.model.slots_per_week,
            normalizer: self.normalizer,
            params: self
                .params
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text)?;
        if doc.format != FORMAT {
            return Err(Error::Schema(format!("not a checkpoint (format `{}`)", doc.format)));
        }
        if doc.version != VERSION {
            return Err(Error::Schema(format!(
                "checkpoint version {} is not supported (expected {VERSION})",
                doc.version
            )));
        }
        let model = Model::new(doc.model_config, doc.segment_ids.len(), doc.slots_per_week)?;
        let mut tensors = BTreeMap::new();
        for p in doc.params {
            let t = Tensor::new(&p.shape, p.data).map_err(|e| Error::Schema(format!("parameter `{}`: {e}", p.name)))?;
            if tensors.insert(p.name.clone(), t).is_some() {
                return Err(Error::Schema(format!("parameter `{}` appears twice", p.name)));
            }
        }
        let params = ModelParams::new(tensors);
        model.check_params(&params)?;
        Ok(Self {
            model,
            feature_options: doc.feature_options,
            segment_ids: doc.segment_ids,
            normalizer: doc.normalizer,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Short content fingerprint for status reporting.
    pub fn id(&self) -> String {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.segment_ids.hash(&mut h);
        for (name, t) in self.params.iter() {
            name.hash(&mut h);
            t.data().iter().for_each(|v| v.to_bits().hash(&mut h));
        }
        format!("{:016x}", h.finish())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let config = ModelConfig {
            channels: 4,
            heads: 1,
            head_dim: 2,
            rnn_hidden: 2,
            time_dim: 2,
            history: 4,
            horizon: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(config, 3, 672).unwrap();
        let params = model.init_params(3);
        Checkpoint {
            model,
            feature_options: FeatureOptions::default(),
            segment_ids: vec!["a".into(), "b".into(), "c".into()],
            normalizer: Normalizer::new(3.5, 71.25).unwrap(),
            params,
        }
    }

    #[test]
    fn reload_is_exact() {
        let c = sample_checkpoint();
        let back = Checkpoint::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.id(), c.id());
    }

    #[test]
    fn rejects_wrong_version_and_shapes() {
        let c = sample_checkpoint();
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        v["version"] = 7.into();
        assert!(matches!(Checkpoint::from_json(&v.to_string()), Err(Error::Schema(_))));

        let mut v: serde_json::Value = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        v["params"][0]["shape"] = serde_json::json!([1, 1]);
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
    }
}
