use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::heads::Head;
use super::{ActionChunk, BackboneOutput, HeadKind, ObservationWindow, PolicyConfig};
use crate::energy::chunk_energy_loss;
use crate::error::{Error, Result};
use crate::nn::{embedding_add, Graph, Init, LayerNorm, Mlp, ParamId, ParamStore, TransformerLayer};
use crate::tensor::{NoiseDist, Rng, Tensor, Var};

/// A minibatch of training windows, stacked row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    /// `[batch·obs_horizon, d_obs]`
    pub obs: Tensor,
    /// `[batch·pred_horizon, d_action]`
    pub actions: Tensor,
    pub batch: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub backbone: usize,
    pub head: usize,
}

#[derive(Debug)]
pub struct EnergyPolicyModel {
    config: PolicyConfig,
    params: ParamStore,
    obs_encoder: Mlp,
    action_tokens: ParamId,
    positions: ParamId,
    layers: Vec<TransformerLayer>,
    final_ln: LayerNorm,
    head: Head,
    backbone_calls: AtomicUsize,
    head_calls: AtomicUsize,
}

impl Clone for EnergyPolicyModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            obs_encoder: self.obs_encoder.clone(),
            action_tokens: self.action_tokens,
            positions: self.positions,
            layers: self.layers.clone(),
            final_ln: self.final_ln.clone(),
            head: self.head.clone(),
            backbone_calls: AtomicUsize::new(0),
            head_calls: AtomicUsize::new(0),
        }
    }
}

fn small_gaussian(rng: &mut Rng, shape: &[usize]) -> Result<Tensor> {
    let mut t = rng.sample(NoiseDist::Gaussian, shape)?;
    t.data_mut().iter_mut().for_each(|v| *v *= 0.02);
    Ok(t)
}

impl EnergyPolicyModel {
    /// Build and initialize from `config.init_seed`. Backbone parameters are
    /// created first, so models that differ only in their head share an
    /// identical backbone for the same seed.
    pub fn new(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.init_seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let obs_encoder = {
            let mut init = Init { rng: &mut rng };
            Mlp::new(&mut store, &mut init, "backbone.obs_encoder", [config.d_obs, d, d])
        };
        let action_tokens = store.add("backbone.action_tokens", small_gaussian(&mut rng, &[config.pred_horizon, d])?);
        let positions = store.add("backbone.positions", small_gaussian(&mut rng, &[config.seq_len(), d])?);
        let mut init = Init { rng: &mut rng };
        let layers = (0..config.depth)
            .map(|i| TransformerLayer::new(&mut store, &mut init, &format!("backbone.layer{i}"), d, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(&mut store, "backbone.final_ln", d);
        let head = Head::new(&mut store, &mut init, &config);
        Ok(Self {
            config,
            params: store,
            obs_encoder,
            action_tokens,
            positions,
            layers,
            final_ln,
            head,
            backbone_calls: AtomicUsize::new(0),
            head_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Scalar parameter count of the tensors whose name starts with `prefix`.
    pub fn count_params_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .names()
            .iter()
            .zip(self.params.tensors())
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            backbone: self.backbone_calls.load(Ordering::Relaxed),
            head: self.head_calls.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counts(&self) {
        self.backbone_calls.store(0, Ordering::Relaxed);
        self.head_calls.store(0, Ordering::Relaxed);
    }

    /// Zero every transformer layer's output projections.
    pub fn zero_transformer_branches(&mut self) {
        for l in &self.layers {
            l.zero_branches(&mut self.params);
        }
    }

    fn check_obs(&self, obs: &Tensor, batch: usize) -> Result<()> {
        let c = &self.config;
        if obs.shape() != [batch * c.obs_horizon, c.d_obs] {
            return Err(Error::dim(format!(
                "observations {:?} do not match [{}·{}, {}]",
                obs.shape(),
                batch,
                c.obs_horizon,
                c.d_obs
            )));
        }
        Ok(())
    }

    /// Backbone over `batch` stacked observation windows; returns the
    /// final-layer vectors of the action tokens, `[batch·H, d_model]`.
    pub fn backbone(&self, g: &mut Graph, obs: Var, batch: usize) -> Result<Var> {
        self.check_obs(g.value(obs), batch)?;
        self.backbone_calls.fetch_add(1, Ordering::Relaxed);
        let (o, h) = (self.config.obs_horizon, self.config.pred_horizon);
        let obs_tok = self.obs_encoder.forward(g, obs)?;
        let act = g.param(self.action_tokens);
        let stacked = g.concat_rows(obs_tok, act)?;
        let seq: Rc<[usize]> = (0..batch)
            .flat_map(|b| (b * o..(b + 1) * o).chain(batch * o..batch * o + h))
            .collect();
        let tokens = g.gather_rows(stacked, seq)?;
        let pos = g.param(self.positions);
        let mut x = embedding_add(g, tokens, pos, batch)?;
        for layer in &self.layers {
            x = layer.forward(g, x, batch)?;
        }
        let x = self.final_ln.forward(g, x)?;
        let n = o + h;
        let pick: Rc<[usize]> = (0..batch).flat_map(|b| b * n + o..(b + 1) * n).collect();
        g.gather_rows(x, pick)
    }

    pub fn backbone_forward(&self, window: &ObservationWindow) -> Result<BackboneOutput> {
        let mut g = Graph::no_grad(&self.params);
        let obs = g.input(window.tensor().clone());
        let z = self.backbone(&mut g, obs, 1)?;
        Ok(BackboneOutput(g.value(z).clone()))
    }

    /// One pass of the energy head; `noise` follows [`PolicyConfig::noise_shape`].
    pub fn head_sample(&self, g: &mut Graph, z: Var, noise: Var) -> Result<Var> {
        let Head::Energy(head) = &self.head else {
            return Err(Error::contract(format!(
                "head_sample needs an energy head, model has {}",
                self.config.head_kind.name()
            )));
        };
        self.head_calls.fetch_add(1, Ordering::Relaxed);
        head.forward(g, z, noise)
    }

    /// Deterministic prediction of the l2 head.
    pub fn head_regress(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let Head::L2(head) = &self.head else {
            return Err(Error::contract("head_regress needs an l2 head"));
        };
        self.head_calls.fetch_add(1, Ordering::Relaxed);
        head.forward(g, z)
    }

    /// Noise prediction of the ddpm head at per-chunk timesteps `steps`.
    pub fn head_denoise(&self, g: &mut Graph, z: Var, x: Var, steps: &[usize]) -> Result<Var> {
        let Head::Ddpm(head) = &self.head else {
            return Err(Error::contract("head_denoise needs a ddpm head"));
        };
        self.head_calls.fetch_add(1, Ordering::Relaxed);
        head.forward(g, z, x, steps)
    }

    fn draw_noise(&self, rng: &mut Rng, batch: usize) -> Result<Tensor> {
        rng.sample(self.config.noise_dist, &self.config.noise_shape(batch))
    }

    /// Two independent chunk samples from one backbone pass.
    pub fn forward_train(&self, g: &mut Graph, obs: &Tensor, batch: usize, rng: &mut Rng) -> Result<(Var, Var)> {
        let n1 = self.draw_noise(rng, batch)?;
        let n2 = self.draw_noise(rng, batch)?;
        self.forward_train_with_noise(g, obs, batch, n1, n2)
    }

    pub fn forward_train_with_noise(
        &self,
        g: &mut Graph,
        obs: &Tensor,
        batch: usize,
        noise1: Tensor,
        noise2: Tensor,
    ) -> Result<(Var, Var)> {
        let obs = g.input(obs.clone());
        let z = self.backbone(g, obs, batch)?;
        let n1 = g.input(noise1);
        let n2 = g.input(noise2);
        let c1 = self.head_sample(g, z, n1)?;
        let c2 = self.head_sample(g, z, n2)?;
        Ok((c1, c2))
    }

    /// Training objective of the configured head, a scalar on `g`.
    pub fn loss(&self, g: &mut Graph, batch: &TrainBatch, rng: &mut Rng) -> Result<Var> {
        let c = &self.config;
        if batch.actions.shape() != [batch.batch * c.pred_horizon, c.d_action] {
            return Err(Error::dim(format!(
                "action targets {:?} do not match [{}·{}, {}]",
                batch.actions.shape(),
                batch.batch,
                c.pred_horizon,
                c.d_action
            )));
        }
        match &self.head {
            Head::Energy(_) => {
                let (c1, c2) = self.forward_train(g, &batch.obs, batch.batch, rng)?;
                let target = g.input(batch.actions.clone());
                chunk_energy_loss(g, c1, c2, target, c.pred_horizon, &c.energy())
            }
            Head::L2(_) => {
                let obs = g.input(batch.obs.clone());
                let z = self.backbone(g, obs, batch.batch)?;
                let pred = self.head_regress(g, z)?;
                let target = g.input(batch.actions.clone());
                mse(g, pred, target)
            }
            Head::Ddpm(head) => {
                let sched = &head.schedule;
                let steps: Vec<usize> = (0..batch.batch).map(|_| rng.below(sched.steps())).collect();
                let eps = rng.sample(NoiseDist::Gaussian, batch.actions.shape())?;
                let mut noisy = batch.actions.clone();
                let width = c.pred_horizon * c.d_action;
                for (b, &k) in steps.iter().enumerate() {
                    let (sa, sn) = (sched.alpha_bars[k].sqrt(), (1.0 - sched.alpha_bars[k]).sqrt());
                    let rows = b * width..(b + 1) * width;
                    for (x, &e) in noisy.data_mut()[rows.clone()].iter_mut().zip(&eps.data()[rows]) {
                        *x = sa * *x + sn * e;
                    }
                }
                let obs = g.input(batch.obs.clone());
                let z = self.backbone(g, obs, batch.batch)?;
                let x = g.input(noisy);
                let pred = self.head_denoise(g, z, x, &steps)?;
                let target = g.input(eps);
                mse(g, pred, target)
            }
        }
    }

    /// Scalar loss value without recording gradients.
    pub fn loss_value(&self, batch: &TrainBatch, rng: &mut Rng) -> Result<f64> {
        let mut g = Graph::no_grad(&self.params);
        let l = self.loss(&mut g, batch, rng)?;
        g.value(l).item()
    }

    /// Action chunks for `batch` stacked windows, `[batch·H, d_action]`.
    pub fn predict_batch(&self, obs: &Tensor, batch: usize, rng: &mut Rng) -> Result<Tensor> {
        let mut g = Graph::no_grad(&self.params);
        let o = g.input(obs.clone());
        let z = self.backbone(&mut g, o, batch)?;
        let out = match &self.head {
            Head::Energy(_) => {
                let n = g.input(self.draw_noise(rng, batch)?);
                self.head_sample(&mut g, z, n)?
            }
            Head::L2(_) => self.head_regress(&mut g, z)?,
            Head::Ddpm(head) => {
                let sched = &head.schedule;
                let shape = [batch * self.config.pred_horizon, self.config.d_action];
                let mut x = rng.sample(NoiseDist::Gaussian, &shape)?;
                for k in (0..sched.steps()).rev() {
                    // a fresh tape per step keeps memory flat over long chains
                    let mut step = Graph::no_grad(&self.params);
                    let zc = step.input(g.value(z).clone());
                    let xv = step.input(x.clone());
                    let eps = self.head_denoise(&mut step, zc, xv, &vec![k; batch])?;
                    let noise = rng.sample(NoiseDist::Gaussian, &shape)?;
                    sched.reverse_step(k, x.data_mut(), step.value(eps).data(), noise.data());
                }
                g.input(x)
            }
        };
        Ok(g.value(out).clone())
    }

    pub fn predict_chunk(&self, window: &ObservationWindow, rng: &mut Rng) -> Result<ActionChunk> {
        self.predict_batch(window.tensor(), 1, rng).map(ActionChunk)
    }

    pub fn head_kind(&self) -> HeadKind {
        self.config.head_kind
    }
}

fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    g.mean(sq, None)
}
