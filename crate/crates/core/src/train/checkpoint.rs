//! `EPCK1` binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                          |
//! |--------------|--------------------------------------------------|
//! | 5            | magic `EPCK1`                                    |
//! | 8            | header length `L` (u64)                          |
//! | L            | header, UTF-8 JSON                               |
//! | 8·n          | parameters (f64), store order                    |
//! | 16·n         | optional AdamW moments `m` then `v`              |
//! | 32           | SHA-256 of everything above                      |
//!
//! The digest makes any flipped or missing byte a load error.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, LossRecord, TrainConfig, Trainer};
use crate::data::NormStats;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::policy::{EnergyPolicyModel, PolicyConfig};
use crate::tensor::RngState;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"EPCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub env: EnvSpec,
    pub norm_stats: NormStats,
    pub epoch: usize,
    pub rng: RngState,
    pub layout: Vec<ParamEntry>,
    pub params: Vec<f64>,
    pub optimizer: Option<AdamState>,
    pub loss_curve: Vec<LossRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    policy: PolicyConfig,
    train: TrainConfig,
    env: EnvSpec,
    norm_stats: NormStats,
    epoch: usize,
    rng: RngState,
    layout: Vec<ParamEntry>,
    n_values: usize,
    adam_step: Option<u64>,
    loss_curve: Vec<LossRecord>,
}

fn layout_of(model: &EnergyPolicyModel) -> Vec<ParamEntry> {
    let mut off = 0;
    model
        .params()
        .names()
        .iter()
        .zip(model.params().tensors())
        .map(|(n, t)| {
            let e = ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
                offset: off,
            };
            off += t.numel();
            e
        })
        .collect()
}

impl Checkpoint {
    pub(crate) fn capture(t: &Trainer) -> Self {
        Self {
            policy: t.model.config().clone(),
            train: t.cfg.clone(),
            env: t.env.clone(),
            norm_stats: t.norm_stats.clone(),
            epoch: t.epoch,
            rng: t.rng.state(),
            layout: layout_of(&t.model),
            params: t.model.params().flatten(),
            optimizer: Some(t.optimizer.clone()),
            loss_curve: t.loss_curve.clone(),
        }
    }

    /// A checkpoint of a model that has not been trained (no optimizer state).
    pub fn of_model(model: &EnergyPolicyModel, env: EnvSpec, norm_stats: NormStats) -> Self {
        Self {
            policy: model.config().clone(),
            train: TrainConfig::default(),
            env,
            norm_stats,
            epoch: 0,
            rng: crate::tensor::Rng::new(0).state(),
            layout: layout_of(model),
            params: model.params().flatten(),
            optimizer: None,
            loss_curve: Vec::new(),
        }
    }

    /// Rebuild the model; parameter names and shapes must match the config.
    pub fn model(&self) -> Result<EnergyPolicyModel> {
        let mut model = EnergyPolicyModel::new(self.policy.clone())?;
        if layout_of(&model) != self.layout {
            return Err(Error::Config(
                "checkpoint parameter layout does not match its policy config".into(),
            ));
        }
        model.params_mut().load_flat(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            policy: self.policy.clone(),
            train: self.train.clone(),
            env: self.env.clone(),
            norm_stats: self.norm_stats.clone(),
            epoch: self.epoch,
            rng: self.rng,
            layout: self.layout.clone(),
            n_values: self.params.len(),
            adam_step: self.optimizer.as_ref().map(|o| o.step),
            loss_curve: self.loss_curve.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(13 + json.len() + 24 * self.params.len() + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put(&self.params);
        if let Some(o) = &self.optimizer {
            put(&o.m);
            put(&o.v);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |msg: String| Error::Corrupt {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 5 || &bytes[..5] != CHECKPOINT_MAGIC {
            let found = String::from_utf8_lossy(&bytes[..bytes.len().min(5)]).into_owned();
            return Err(corrupt(format!(
                "not a checkpoint: magic {found:?}, expected {:?}",
                std::str::from_utf8(CHECKPOINT_MAGIC).unwrap()
            )));
        }
        if bytes.len() < 5 + 8 + 32 {
            return Err(corrupt("file is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)".into()));
        }
        let hlen = u64::from_le_bytes(body[5..13].try_into().unwrap()) as usize;
        let json = body
            .get(13..13usize.saturating_add(hlen))
            .ok_or_else(|| corrupt("header length exceeds file".into()))?;
        let h: Header = serde_json::from_slice(json).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let floats = &body[13 + hlen..];
        let n = h.n_values;
        let expect = if h.adam_step.is_some() { 3 * n } else { n };
        if floats.len() != 8 * expect {
            return Err(corrupt(format!(
                "payload has {} bytes, header implies {}",
                floats.len(),
                8 * expect
            )));
        }
        let read = |i: usize| -> Vec<f64> {
            floats[8 * i * n..8 * (i + 1) * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let optimizer = h.adam_step.map(|step| AdamState {
            step,
            m: read(1),
            v: read(2),
        });
        let ck = Self {
            params: read(0),
            policy: h.policy,
            train: h.train,
            env: h.env,
            norm_stats: h.norm_stats,
            epoch: h.epoch,
            rng: h.rng,
            layout: h.layout,
            optimizer,
            loss_curve: h.loss_curve,
        };
        let layout_total: usize = ck.layout.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if layout_total != n {
            return Err(corrupt("parameter layout does not cover the payload".into()));
        }
        Ok(ck)
    }
}

pub fn checkpoint_save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
