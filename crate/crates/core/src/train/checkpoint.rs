//! MAC1 checkpoint files.
//!
//! ```text
//! magic "MAC1" | version u16 | count u32 | count × entry      parameters
//! count u32 | count × entry                                  optimizer state
//! epoch u32 | config_len u32 | config_len × u8               TOML run config
//! entry = name_len u16 | name (UTF-8) | rank u8 | rank × u32 dims | f32 values
//! ```
//! Little-endian throughout. Adam state is stored as `adam.step` (rank 0)
//! followed by `adam.m/<param>` and `adam.v/<param>` entries.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::dataset::Reader;
use crate::error::{Error, FormatError, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::optim::OptimizerState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MAC1";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub optimizer: OptimizerState<f32>,
    /// Number of completed epochs.
    pub epoch: u32,
    pub config: RunConfig,
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_entry(r: &mut Reader<'_>) -> Result<(String, Tensor<f32>), FormatError> {
    let len = r.u16("entry name length")? as usize;
    let name = std::str::from_utf8(r.take(len, "entry name")?)
        .map_err(|_| FormatError::Invalid("entry name is not UTF-8".into()))?
        .to_string();
    let rank = r.u8("entry rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("entry dims")? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::Invalid(format!("{name}: shape {shape:?} overflows")))?;
    let data = r.f32s(n, "entry values")?;
    Ok((name, Tensor::new(shape, data).expect("entry shape")))
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, optimizer: &OptimizerState<f32>, epoch: u32, config: &RunConfig) -> Self {
        Self { params: model.params().clone(), optimizer: optimizer.clone(), epoch, config: config.clone() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_entry(&mut out, name, t);
        }
        match &self.optimizer {
            OptimizerState::Sgd => out.extend_from_slice(&0u32.to_le_bytes()),
            OptimizerState::Adam { step, m, v } => {
                out.extend_from_slice(&((1 + m.len() + v.len()) as u32).to_le_bytes());
                put_entry(&mut out, "adam.step", &Tensor::scalar(*step as f32));
                for (prefix, moments) in [("adam.m/", m), ("adam.v/", v)] {
                    for ((name, _), t) in self.params.iter().zip(moments) {
                        put_entry(&mut out, &format!("{prefix}{name}"), t);
                    }
                }
            }
        }
        let config = self.config.to_toml();
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let count = r.u32("parameter count")?;
        let mut params = ParamStore::default();
        for _ in 0..count {
            let (name, t) = get_entry(&mut r)?;
            params.push(name, t);
        }
        let opt_count = r.u32("optimizer entry count")? as usize;
        let optimizer = if opt_count == 0 {
            OptimizerState::Sgd
        } else {
            if opt_count != 1 + 2 * params.len() {
                return Err(FormatError::Invalid(format!(
                    "{opt_count} optimizer entries for {} parameters",
                    params.len()
                )));
            }
            let (name, step) = get_entry(&mut r)?;
            if name != "adam.step" || step.len() != 1 {
                return Err(FormatError::Invalid(format!("expected adam.step, found {name}")));
            }
            let mut moments = [Vec::new(), Vec::new()];
            for (slot, prefix) in moments.iter_mut().zip(["adam.m/", "adam.v/"]) {
                for (pname, p) in params.iter() {
                    let (name, t) = get_entry(&mut r)?;
                    if name.strip_prefix(prefix) != Some(pname) || t.shape() != p.shape() {
                        return Err(FormatError::Invalid(format!("unexpected optimizer entry {name}")));
                    }
                    slot.push(t);
                }
            }
            let [m, v] = moments;
            OptimizerState::Adam { step: step.item() as u64, m, v }
        };
        let epoch = r.u32("epoch")?;
        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| FormatError::Invalid("config is not UTF-8".into()))?;
        let config = RunConfig::from_toml(text).map_err(|e| FormatError::Invalid(e.to_string()))?;
        r.finish()?;
        Ok(Self { params, optimizer, epoch, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|source| Error::Format { path: path.to_path_buf(), source })
    }

    /// Rebuilds the model described by the embedded config.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = Model::zeros(self.config.model.clone())?;
        model.params_mut().load_from(self.params.clone())?;
        Ok(model)
    }
}
