//! Versioned JSON checkpoints of parameter sets and optimizer state.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use super::params::ParamStore;
use crate::data::write_atomic;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl NamedArray {
    pub fn from_array(name: &str, a: &Array2<f64>) -> Self {
        Self {
            name: name.to_string(),
            shape: a.shape().to_vec(),
            values: a.outer_iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        let bad = || Error::Shape(format!("array {} does not match its shape {:?}", self.name, self.shape));
        let [rows, cols] = self.shape[..] else { return Err(bad()) };
        if self.values.len() != rows || self.values.iter().any(|r| r.len() != cols) {
            return Err(bad());
        }
        Array2::from_shape_vec((rows, cols), self.values.concat()).map_err(|_| bad())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<NamedArray>,
    pub v: Vec<NamedArray>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// `"rnn_ae"` or `"flow"`.
    pub component: String,
    pub config_hash: String,
    pub seed: u64,
    pub params_hash: String,
    pub params: Vec<NamedArray>,
    pub optimizer: Option<OptimizerState>,
    /// Component-specific payload (model config, training state, ...).
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn capture(
        component: &str,
        params: &ParamStore,
        optimizer: Option<&Adam>,
        config_hash: &str,
        seed: u64,
        metadata: serde_json::Value,
    ) -> Self {
        let names: Vec<&str> = params.iter().map(|t| t.name.as_str()).collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            component: component.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            params_hash: params.content_hash(),
            params: params.iter().map(|t| NamedArray::from_array(&t.name, &t.values)).collect(),
            optimizer: optimizer.map(|adam| OptimizerState {
                config: adam.config,
                step: adam.step,
                m: adam.m.iter().zip(&names).map(|(a, n)| NamedArray::from_array(n, a)).collect(),
                v: adam.v.iter().zip(&names).map(|(a, n)| NamedArray::from_array(n, a)).collect(),
            }),
            metadata,
        }
    }

    /// Copies stored values into `params`, matching tensors by name and shape.
    pub fn restore_into(&self, params: &mut ParamStore) -> Result<()> {
        if self.params.len() != params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for stored in &self.params {
            let id = params
                .find(&stored.name)
                .ok_or_else(|| Error::Shape(format!("model has no parameter {}", stored.name)))?;
            let values = stored.to_array()?;
            let t = params.get_mut(id);
            if t.values.shape() != values.shape() {
                return Err(Error::Shape(format!("parameter {} shape mismatch", stored.name)));
            }
            t.values = values;
        }
        if params.content_hash() != self.params_hash {
            return Err(Error::Parse {
                line: 0,
                column: 0,
                message: "checkpoint parameter hash does not match its contents".into(),
            });
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, params: &ParamStore) -> Result<Option<Adam>> {
        let Some(state) = &self.optimizer else { return Ok(None) };
        let mut adam = Adam::new(state.config, params);
        adam.step = state.step;
        adam.m = state.m.iter().map(NamedArray::to_array).collect::<Result<_>>()?;
        adam.v = state.v.iter().map(NamedArray::to_array).collect::<Result<_>>()?;
        Ok(Some(adam))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).map_err(|e| Error::Numerical(format!("checkpoint not serializable: {e}")))?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != u64::from(CHECKPOINT_FORMAT_VERSION) {
            return Err(Error::Version {
                found: version as u32,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        serde_json::from_value(raw).map_err(|e| Error::Parse {
            line: 0,
            column: 0,
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn save_load_restores_everything() {
        let mut params = ParamStore::new();
        let mut rng = substream(3, "ckpt");
        params.add_uniform("a", 3, 2, 2, &mut rng);
        params.add_uniform("b", 1, 5, 5, &mut rng);
        for t in params.iter_mut() {
            t.grad.fill(0.1);
        }
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params).unwrap();

        let ck = Checkpoint::capture("flow", &params, Some(&adam), "cfg", 3, serde_json::json!({"epoch": 4}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);

        let mut fresh = params.clone();
        for t in fresh.iter_mut() {
            t.values.fill(0.0);
        }
        back.restore_into(&mut fresh).unwrap();
        assert_eq!(fresh.content_hash(), params.content_hash());
        assert_eq!(back.restore_optimizer(&fresh).unwrap().unwrap(), adam);
    }

    #[test]
    fn tampered_values_fail_hash() {
        let mut params = ParamStore::new();
        params.add("a", ndarray::array![[1.0, 2.0]]);
        let mut ck = Checkpoint::capture("rnn_ae", &params, None, "cfg", 0, serde_json::Value::Null);
        ck.params[0].values[0][1] = 2.5;
        assert!(ck.restore_into(&mut params.clone()).is_err());
    }

    #[test]
    fn wrong_version_rejected() {
        let params = ParamStore::new();
        let mut ck = Checkpoint::capture("flow", &params, None, "cfg", 0, serde_json::Value::Null);
        ck.format_version = 9;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        ck.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Version { found: 9, .. })));
    }
}
