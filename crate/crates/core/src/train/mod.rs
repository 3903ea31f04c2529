//! Training, checkpoints, evaluation and the ablation harness.

mod ablation;
mod checkpoint;
mod eval;
mod optim;

pub use ablation::{
    ablation_run, parse_results_table, read_results_table, results_table, write_results_table, AblationAxis, AblationCell, AblationGrid,
    AblationRow, EvalSettings,
};
pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint, CHECKPOINT_MAGIC};
pub use eval::{
    evaluate_success, latency_bench, mode_coverage, rollout, sample_spread, trajectories_csv, write_trajectories_csv,
    ChunkPolicy, Coverage, EvalSummary, ExpertPolicy, LatencyReport, ModelPolicy, RandomPolicy,
    RolloutResult, StaircasePolicy,
};
pub use optim::{adamw_step, clip_grad_norm, AdamState};

use serde::{Deserialize, Serialize};

use crate::data::{make_training_windows, DemoDataset, NormStats, TrainingWindows};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::policy::EnergyPolicyModel;
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Emit a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            betas: [0.9, 0.95],
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::param("epochs and batch_size must be positive"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::param("grad_clip_norm must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::param("learning_rate and weight_decay must be non-negative"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(self.adam_eps > 0.0) {
            return Err(Error::param("betas must lie in [0, 1) and adam_eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Training state that can be checkpointed and resumed bit-exactly.
pub struct Trainer {
    pub model: EnergyPolicyModel,
    pub optimizer: AdamState,
    pub cfg: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: Rng,
    pub loss_curve: Vec<LossRecord>,
    pub env: EnvSpec,
    pub norm_stats: NormStats,
    windows: TrainingWindows,
}

fn check_dims(model: &EnergyPolicyModel, dataset: &DemoDataset) -> Result<()> {
    let c = model.config();
    if c.d_obs != dataset.env.d_obs || c.d_action != dataset.env.d_action {
        return Err(Error::Config(format!(
            "model expects d_obs={} d_action={}, dataset ({}) has d_obs={} d_action={}",
            c.d_obs,
            c.d_action,
            dataset.env.name.as_str(),
            dataset.env.d_obs,
            dataset.env.d_action
        )));
    }
    Ok(())
}

impl Trainer {
    pub fn new(model: EnergyPolicyModel, dataset: &DemoDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_dims(&model, dataset)?;
        let c = model.config();
        let windows = make_training_windows(dataset, c.obs_horizon, c.pred_horizon)?;
        Ok(Self {
            optimizer: AdamState::new(model.params()),
            rng: Rng::new(cfg.seed),
            cfg,
            epoch: 0,
            loss_curve: Vec::new(),
            env: dataset.env.clone(),
            norm_stats: dataset.norm_stats.clone(),
            windows,
            model,
        })
    }

    /// Continue from a checkpoint. `cfg.epochs` is the total target, so a
    /// checkpoint at epoch 5 of a 10-epoch config runs 5 more epochs.
    pub fn resume(ckpt: &Checkpoint, dataset: &DemoDataset, cfg: TrainConfig) -> Result<Self> {
        let model = ckpt.model()?;
        let mut t = Self::new(model, dataset, cfg)?;
        if ckpt.norm_stats != dataset.norm_stats {
            return Err(Error::Config("dataset normalization differs from the checkpoint's".into()));
        }
        t.optimizer = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume from".into()))?;
        t.epoch = ckpt.epoch;
        t.rng = Rng::from_state(ckpt.rng);
        t.loss_curve = ckpt.loss_curve.clone();
        Ok(t)
    }

    pub fn windows(&self) -> &TrainingWindows {
        &self.windows
    }

    /// One pass over the shuffled windows; returns the mean batch loss.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.windows.len()).collect();
        self.rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch_seed = self.rng.next_u64();
            let mut brng = Rng::new(batch_seed);
            let batch = self.windows.batch(idx);
            let mut g = Graph::new(self.model.params());
            let loss = self.model.loss(&mut g, &batch, &mut brng)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch + 1,
                    batch: bi,
                    batch_seed,
                });
            }
            let mut grads = g.backward(loss)?;
            clip_grad_norm(&mut grads, self.cfg.grad_clip_norm);
            adamw_step(self.model.params_mut(), &grads, &mut self.optimizer, &self.cfg);
            total += value;
            batches += 1;
        }
        self.epoch += 1;
        let mean = total / batches as f64;
        self.loss_curve.push(LossRecord {
            epoch: self.epoch,
            mean_loss: mean,
        });
        Ok(mean)
    }

    /// Train until `cfg.epochs`, calling `on_epoch` after each epoch.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            self.train_epoch()?;
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    fn due(&self) -> bool {
        self.epoch == self.cfg.epochs || (self.cfg.checkpoint_every > 0 && self.epoch.is_multiple_of(self.cfg.checkpoint_every))
    }
}

pub struct TrainOutcome {
    pub model: EnergyPolicyModel,
    pub loss_curve: Vec<LossRecord>,
    pub checkpoints: Vec<Checkpoint>,
}

/// Train from scratch, collecting checkpoints on the configured schedule.
pub fn train(model: EnergyPolicyModel, dataset: &DemoDataset, cfg: TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, dataset, cfg)?;
    let mut checkpoints = Vec::new();
    t.run(|t| {
        if t.due() {
            checkpoints.push(t.checkpoint());
        }
        Ok(())
    })?;
    Ok(TrainOutcome {
        loss_curve: t.loss_curve,
        model: t.model,
        checkpoints,
    })
}

/// `epoch,mean_loss` CSV with a header row.
pub fn loss_curve_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("epoch,mean_loss\n");
    for r in curve {
        s.push_str(&format!("{},{}\n", r.epoch, crate::data::fmt_real(r.mean_loss)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, ModePolicy};
    use crate::policy::PolicyConfig;

    fn setup() -> (EnergyPolicyModel, DemoDataset) {
        let ds = generate_dataset(&EnvSpec::line_reach(), 4, 0, ModePolicy::Balanced).unwrap();
        let cfg = PolicyConfig {
            d_obs: 1,
            d_action: 1,
            pred_horizon: 4,
            exec_horizon: 2,
            d_model: 8,
            depth: 1,
            heads: 2,
            head_width: 8,
            head_depth: 1,
            noise_dim: 2,
            ..Default::default()
        };
        (EnergyPolicyModel::new(cfg).unwrap(), ds)
    }

    fn tcfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn identical_seeds_identical_curves() {
        let (m, ds) = setup();
        let a = train(m.clone(), &ds, tcfg(3)).unwrap();
        let b = train(m, &ds, tcfg(3)).unwrap();
        let bits = |c: &[LossRecord]| c.iter().map(|r| r.mean_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.loss_curve), bits(&b.loss_curve));
        assert_eq!(a.checkpoints.len(), 1);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let (m, ds) = setup();
        let before = m.params().flatten();
        let cfg = TrainConfig { learning_rate: 0.0, ..tcfg(1) };
        let out = train(m, &ds, cfg).unwrap();
        assert_eq!(out.model.params().flatten(), before);
    }

    #[test]
    fn dim_mismatch_is_config_error() {
        let (_, ds) = setup();
        let m = EnergyPolicyModel::new(PolicyConfig::default()).unwrap();
        assert!(matches!(Trainer::new(m, &ds, tcfg(1)), Err(Error::Config(_))));
    }
}
