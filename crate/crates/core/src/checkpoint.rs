//! Single-file checkpoints: named parameter and optimizer-moment arrays in a
//! safetensors archive, with the resolved config and its architecture hash
//! stored as metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::config::RunConfig;
use crate::model::NmrfModel;
use crate::train::{AdamW, Trainer};
use crate::{Error, Result};

pub const CHECKPOINT_SCHEMA: &str = "nmrf-checkpoint/1";

const PARAM: &str = "param/";
const MOMENT1: &str = "adam_m/";
const MOMENT2: &str = "adam_v/";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model_hash: String,
    pub step: usize,
    pub adam_step: u64,
    pub params: BTreeMap<String, Tensor>,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

fn ck_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn save(path: &Path, config: &RunConfig, model: &NmrfModel, optimizer: Option<&AdamW>, step: usize) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, var) in model.store.vars() {
        tensors.push((format!("{PARAM}{name}"), var.as_tensor().clone()));
    }
    if let Some(opt) = optimizer {
        for (name, (m, v)) in &opt.moments {
            tensors.push((format!("{MOMENT1}{name}"), m.clone()));
            tensors.push((format!("{MOMENT2}{name}"), v.clone()));
        }
    }
    let mut meta = HashMap::new();
    meta.insert("schema".to_string(), CHECKPOINT_SCHEMA.to_string());
    meta.insert("model_hash".to_string(), config.model_hash());
    meta.insert("config".to_string(), serde_json::to_string(config)?);
    meta.insert("step".to_string(), step.to_string());
    meta.insert("adam_step".to_string(), optimizer.map_or(0, |o| o.step).to_string());
    // Write to a sibling then rename so an interrupted save never leaves a
    // truncated checkpoint behind.
    let tmp = path.with_extension("partial");
    safetensors::serialize_to_file(tensors, Some(meta), &tmp).map_err(|e| ck_err(path, e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ck_err(path, e.to_string()))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| ck_err(path, "no metadata block"))?;
    let get = |k: &str| meta.get(k).cloned().ok_or_else(|| ck_err(path, format!("metadata lacks {k}")));
    let schema = get("schema")?;
    if schema != CHECKPOINT_SCHEMA {
        return Err(ck_err(path, format!("unsupported checkpoint schema {schema}")));
    }
    let config: RunConfig = serde_json::from_str(&get("config")?)?;
    let model_hash = get("model_hash")?;
    if model_hash != config.model_hash() {
        return Err(ck_err(path, "stored config does not match its recorded hash"));
    }
    let step = get("step")?.parse().map_err(|_| ck_err(path, "bad step"))?;
    let adam_step = get("adam_step")?.parse().map_err(|_| ck_err(path, "bad adam_step"))?;
    let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let mut params = BTreeMap::new();
    let mut m1 = BTreeMap::new();
    let mut m2 = BTreeMap::new();
    for (name, t) in all {
        if let Some(n) = name.strip_prefix(PARAM) {
            params.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(MOMENT1) {
            m1.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(MOMENT2) {
            m2.insert(n.to_string(), t);
        }
    }
    let mut moments = BTreeMap::new();
    for (n, m) in m1 {
        let v = m2.remove(&n).ok_or_else(|| ck_err(path, format!("second moment of {n} missing")))?;
        moments.insert(n, (m, v));
    }
    Ok(Checkpoint {
        config,
        model_hash,
        step,
        adam_step,
        params,
        moments,
    })
}

impl Checkpoint {
    /// Fails with [`Error::ConfigMismatch`] unless the checkpoint was written
    /// for the same architecture as `expected`.
    pub fn check_compatible(&self, expected: &RunConfig) -> Result<()> {
        let want = expected.model_hash();
        if want != self.model_hash {
            return Err(Error::ConfigMismatch {
                expected: want,
                found: self.model_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn model(&self) -> Result<NmrfModel> {
        let mut model = NmrfModel::new(&self.config.model, candle_core::DType::F32, self.config.train.seed)?;
        model.store.load(&self.params)?;
        Ok(model)
    }

    /// Rebuilds a trainer positioned after the saved step.
    pub fn trainer(&self, config: RunConfig) -> Result<Trainer> {
        let ck = RunConfig {
            train: self.config.train.clone(),
            ..config.clone()
        };
        self.check_compatible(&ck)?;
        let mut t = Trainer::new(config)?;
        t.model.store.load(&self.params)?;
        t.optimizer.step = self.adam_step;
        t.optimizer.moments = self.moments.clone();
        t.step = self.step;
        Ok(t)
    }
}
