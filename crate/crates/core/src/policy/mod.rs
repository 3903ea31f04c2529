//! The policy network: a transformer over observation and learnable action
//! tokens, followed by one of three heads.
//!
//! - `energy`: a residual MLP whose blocks are modulated by a noise
//!   embedding (adaLN-Zero). One noise draw gives one action chunk in a
//!   single pass; two draws from the same backbone output train it.
//! - `l2`: the same MLP without noise, trained by mean squared error.
//! - `ddpm`: the same MLP conditioned on a diffusion timestep, predicting
//!   noise and sampled with `ddpm_steps` reverse iterations.

mod heads;
mod model;

pub use heads::{DdpmSchedule, Head};
pub use model::{CallCounts, EnergyPolicyModel, TrainBatch};

use serde::{Deserialize, Serialize};

use crate::energy::{EnergyConfig, Reduction, ScoreGranularity};
use crate::error::{Error, Result};
use crate::tensor::{NoiseDist, Tensor, DEFAULT_NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Energy,
    L2,
    Ddpm,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "energy" => Ok(Self::Energy),
            "l2" => Ok(Self::L2),
            "ddpm" => Ok(Self::Ddpm),
            other => Err(Error::param(format!("unknown head {other:?} (energy, l2, ddpm)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Energy => "energy",
            Self::L2 => "l2",
            Self::Ddpm => "ddpm",
        }
    }
}

/// How the noise embedding reaches the energy head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaLnMode {
    /// Shift/scale/gate modulation of every residual block.
    Adaln,
    /// Noise embedding concatenated to `z_t` at the head input; plain blocks.
    Concat,
}

impl AdaLnMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adaln" | "on" => Ok(Self::Adaln),
            "concat" | "off" => Ok(Self::Concat),
            other => Err(Error::param(format!("unknown adaln mode {other:?} (adaln, concat)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Adaln => "adaln",
            Self::Concat => "concat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSharing {
    /// One noise vector per chunk, shared by all `H` action tokens.
    PerChunk,
    /// An independent noise vector per action token.
    PerTimestep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub d_obs: usize,
    pub d_action: usize,
    pub obs_horizon: usize,
    pub pred_horizon: usize,
    pub exec_horizon: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_width: usize,
    pub head_depth: usize,
    pub alpha: f64,
    pub norm_eps: f64,
    pub granularity: ScoreGranularity,
    pub noise_dim: usize,
    pub noise_dist: NoiseDist,
    pub noise_sharing: NoiseSharing,
    pub head_kind: HeadKind,
    pub ddpm_steps: usize,
    pub adaln_mode: AdaLnMode,
    pub init_seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_obs: 2,
            d_action: 2,
            obs_horizon: 2,
            pred_horizon: 16,
            exec_horizon: 8,
            d_model: 64,
            depth: 2,
            heads: 4,
            head_width: 128,
            head_depth: 3,
            alpha: 1.0,
            norm_eps: DEFAULT_NORM_EPS,
            granularity: ScoreGranularity::PerTimestep,
            noise_dim: 16,
            noise_dist: NoiseDist::U05,
            noise_sharing: NoiseSharing::PerChunk,
            head_kind: HeadKind::Energy,
            ddpm_steps: 100,
            adaln_mode: AdaLnMode::Adaln,
            init_seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::param(m));
        if self.d_obs == 0 || self.d_action == 0 {
            return fail("observation and action dims must be positive".into());
        }
        if self.obs_horizon == 0 || self.pred_horizon == 0 {
            return fail("horizons must be positive".into());
        }
        if self.exec_horizon == 0 || self.exec_horizon > self.pred_horizon {
            return fail(format!(
                "exec_horizon {} must lie in 1..={}",
                self.exec_horizon, self.pred_horizon
            ));
        }
        if self.d_model < 2 || self.head_width < 2 {
            return fail("d_model and head_width must be at least 2".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.head_depth == 0 {
            return fail("head_depth must be at least 1".into());
        }
        self.energy().validate()?;
        self.noise_dist.validate()?;
        if self.head_kind == HeadKind::Energy && self.noise_dim == 0 {
            return fail("the energy head needs noise_dim >= 1".into());
        }
        if self.head_kind == HeadKind::Ddpm && self.ddpm_steps == 0 {
            return fail("ddpm_steps must be at least 1".into());
        }
        Ok(())
    }

    pub fn energy(&self) -> EnergyConfig {
        EnergyConfig {
            alpha: self.alpha,
            eps: self.norm_eps,
            reduction: Reduction::Mean,
            granularity: self.granularity,
        }
    }

    /// Noise tensor shape for `batch` chunks.
    pub fn noise_shape(&self, batch: usize) -> [usize; 2] {
        match self.noise_sharing {
            NoiseSharing::PerChunk => [batch, self.noise_dim],
            NoiseSharing::PerTimestep => [batch * self.pred_horizon, self.noise_dim],
        }
    }

    /// Tokens seen by the transformer per example.
    pub fn seq_len(&self) -> usize {
        self.obs_horizon + self.pred_horizon
    }
}

/// `obs_horizon × d_obs` normalized observations, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationWindow(pub Tensor);

impl ObservationWindow {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        Tensor::from_rows(rows).map(Self)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// `H × d_action` normalized actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk(pub Tensor);

impl ActionChunk {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn horizon(&self) -> usize {
        self.0.rows()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }
}

/// `H × d_model`; row `t` is the backbone vector `z_t` of action token `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput(pub Tensor);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        PolicyConfig::default().validate().unwrap();
    }

    #[test]
    fn config_rejections() {
        let bad = [
            PolicyConfig { exec_horizon: 17, ..Default::default() },
            PolicyConfig { alpha: 2.5, ..Default::default() },
            PolicyConfig { alpha: 0.0, ..Default::default() },
            PolicyConfig { noise_dim: 0, ..Default::default() },
            PolicyConfig { head_kind: HeadKind::Ddpm, ddpm_steps: 0, ..Default::default() },
            PolicyConfig { heads: 3, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Parameter(_))), "{c:?}");
        }
        // the l2 head does not use noise
        PolicyConfig { noise_dim: 0, head_kind: HeadKind::L2, ..Default::default() }
            .validate()
            .unwrap();
    }
}
