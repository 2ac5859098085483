//! Binary checkpoint: magic, version, JSON metadata, then named tensors as
//! little-endian f32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, Moments, Normalization, TrainConfig, Trainer};
use crate::autodiff::Tensor;
use crate::backbone::bn_prefix;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MBREATH\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const RUNNING_MEAN: &str = "running_mean";
const RUNNING_VAR: &str = "running_var";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub normalization: Option<Normalization>,
    /// Shuffles and masks are derived from the seed and the epoch index,
    /// so these two values are the whole RNG state.
    pub seed: u64,
    pub epochs_completed: usize,
    pub total_steps: u64,
    /// Adam step count when optimizer moments are stored.
    pub optimizer_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn stat_name(block: usize, which: &str) -> String {
    format!("{}.{which}", bn_prefix(block))
}

impl Checkpoint {
    pub fn from_model(model: &Model, train: &TrainConfig, normalization: Option<Normalization>) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, t) in model.params.iter() {
            tensors.insert(name.to_string(), Tensor::new(t.shape(), t.data().to_vec()).expect("shape of a live tensor"));
        }
        for (b, s) in model.stats.iter().enumerate() {
            tensors.insert(stat_name(b, RUNNING_MEAN), Tensor::new(&[s.mean.len()], s.mean.clone()).expect("1-d"));
            tensors.insert(stat_name(b, RUNNING_VAR), Tensor::new(&[s.var.len()], s.var.clone()).expect("1-d"));
        }
        Checkpoint {
            meta: CheckpointMeta {
                model: model.config.clone(),
                train: train.clone(),
                normalization,
                seed: train.seed,
                epochs_completed: 0,
                total_steps: 0,
                optimizer_step: None,
            },
            tensors,
        }
    }

    /// Full training state including optimizer moments.
    pub fn from_trainer(trainer: &Trainer, normalization: Option<Normalization>) -> Self {
        let mut ck = Checkpoint::from_model(&trainer.model, &trainer.config, normalization);
        ck.meta.epochs_completed = trainer.epochs_done;
        ck.meta.total_steps = trainer.total_steps;
        ck.meta.optimizer_step = Some(trainer.optimizer.step);
        for (name, m) in &trainer.optimizer.moments {
            let shape = trainer.model.params.get(name).map(|t| t.shape().to_vec()).unwrap_or(vec![m.m.len()]);
            ck.tensors.insert(format!("{ADAM_M}{name}"), Tensor::new(&shape, m.m.clone()).expect("moment shape"));
            ck.tensors.insert(format!("{ADAM_V}{name}"), Tensor::new(&shape, m.v.clone()).expect("moment shape"));
        }
        ck
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic bytes, not a checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta_len = r.len("metadata length")?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let count = r.len("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len("dimension")?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{name}: dimensions overflow")))?;
            let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), &name)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Copies parameters and running statistics into `model`, whose
    /// configuration must produce the same parameter shapes.
    pub fn restore(&self, model: &mut Model) -> Result<()> {
        for (name, t) in model.params.iter_mut() {
            let src = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Shape(format!("parameter {name} is missing from the checkpoint")))?;
            if src.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: checkpoint {:?} vs model {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        for (b, s) in model.stats.iter_mut().enumerate() {
            for (which, dst) in [(RUNNING_MEAN, &mut s.mean), (RUNNING_VAR, &mut s.var)] {
                let name = stat_name(b, which);
                let src = self
                    .tensors
                    .get(&name)
                    .ok_or_else(|| Error::Shape(format!("{name} is missing from the checkpoint")))?;
                if src.len() != dst.len() {
                    return Err(Error::Shape(format!("{name}: checkpoint {:?} vs model [{}]", src.shape(), dst.len())));
                }
                dst.copy_from_slice(src.data());
            }
        }
        let known = model.params.len() + 2 * model.stats.len();
        let stored = self.tensors.keys().filter(|k| !k.starts_with("adam.")).count();
        if stored != known {
            let extra = self
                .tensors
                .keys()
                .find(|k| !k.starts_with("adam.") && !model.params.contains(k) && !k.ends_with(RUNNING_MEAN) && !k.ends_with(RUNNING_VAR));
            return Err(Error::Shape(format!(
                "checkpoint holds {stored} tensors, model expects {known}{}",
                extra.map(|k| format!(" (unexpected {k})")).unwrap_or_default()
            )));
        }
        Ok(())
    }

    /// Rebuilds the model stored in this checkpoint.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.meta.model.clone(), self.meta.seed)?;
        self.restore(&mut model)?;
        Ok(model)
    }

    /// Rebuilds the trainer, with optimizer moments when they were saved.
    pub fn trainer(&self, n_train: usize) -> Result<Trainer> {
        let mut t = Trainer::new(self.model()?, self.meta.train.clone(), n_train)?;
        t.epochs_done = self.meta.epochs_completed;
        if let Some(step) = self.meta.optimizer_step {
            let mut adam = Adam::new(self.meta.train.adam);
            adam.step = step;
            for (name, p) in t.model.params.iter() {
                let (Some(m), Some(v)) = (self.tensors.get(&format!("{ADAM_M}{name}")), self.tensors.get(&format!("{ADAM_V}{name}"))) else {
                    continue;
                };
                if m.len() != p.len() || v.len() != p.len() {
                    return Err(Error::Shape(format!("optimizer moments of {name}")));
                }
                adam.moments.insert(
                    name.to_string(),
                    Moments {
                        m: m.data().to_vec(),
                        v: v.data().to_vec(),
                    },
                );
            }
            t.optimizer = adam;
        }
        Ok(t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated at byte {} while reading {what}", self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .map_err(|_| Error::Format(format!("{what} does not fit in memory")))
    }
}
