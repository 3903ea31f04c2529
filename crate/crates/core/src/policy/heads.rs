use super::{AdaLnMode, NoiseSharing, PolicyConfig};
use crate::error::{Error, Result};
use crate::nn::{AdaLnBlock, Graph, Init, LayerNorm, Linear, Mlp, ParamStore, ResidualBlock};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
enum Blocks {
    Plain(Vec<ResidualBlock>),
    Modulated(Vec<AdaLnBlock>),
}

/// Input projection, residual blocks, final norm and output projection.
#[derive(Clone, Debug)]
struct Trunk {
    in_proj: Linear,
    blocks: Blocks,
    final_ln: LayerNorm,
    out: Linear,
}

impl Trunk {
    fn new(store: &mut ParamStore, init: &mut Init, in_dim: usize, cfg: &PolicyConfig, modulated: bool) -> Self {
        let w = cfg.head_width;
        let in_proj = Linear::new(store, init, "head.in_proj", in_dim, w);
        let blocks = if modulated {
            Blocks::Modulated(
                (0..cfg.head_depth)
                    .map(|i| AdaLnBlock::new(store, init, &format!("head.block{i}"), w))
                    .collect(),
            )
        } else {
            Blocks::Plain(
                (0..cfg.head_depth)
                    .map(|i| ResidualBlock::new(store, init, &format!("head.block{i}"), w))
                    .collect(),
            )
        };
        let final_ln = LayerNorm::new(store, "head.final_ln", w);
        let out = Linear::new(store, init, "head.out", w, cfg.d_action);
        Self {
            in_proj,
            blocks,
            final_ln,
            out,
        }
    }

    /// `cond` is a conditioning embedding with one row per `repeat` input rows.
    fn forward(&self, g: &mut Graph, x: Var, cond: Option<(Var, usize)>) -> Result<Var> {
        let mut h = self.in_proj.forward(g, x)?;
        match (&self.blocks, cond) {
            (Blocks::Plain(blocks), _) => {
                for b in blocks {
                    h = b.forward(g, h)?;
                }
            }
            (Blocks::Modulated(blocks), Some((embed, repeat))) => {
                for b in blocks {
                    let mut m = b.modulation(g, embed)?;
                    if repeat > 1 {
                        m = g.repeat_rows(m, repeat)?;
                    }
                    h = b.forward_modulated(g, h, m)?;
                }
            }
            (Blocks::Modulated(_), None) => {
                return Err(Error::contract("modulated head called without conditioning"));
            }
        }
        let h = self.final_ln.forward(g, h)?;
        self.out.forward(g, h)
    }
}

/// Maps `(z_t, noise)` to an action; one noise draw per sample.
#[derive(Clone, Debug)]
pub struct EnergyHead {
    trunk: Trunk,
    noise_embed: Mlp,
    mode: AdaLnMode,
    sharing: NoiseSharing,
    horizon: usize,
}

impl EnergyHead {
    fn new(store: &mut ParamStore, init: &mut Init, cfg: &PolicyConfig) -> Self {
        let w = cfg.head_width;
        let in_dim = match cfg.adaln_mode {
            AdaLnMode::Adaln => cfg.d_model,
            AdaLnMode::Concat => cfg.d_model + w,
        };
        let trunk = Trunk::new(store, init, in_dim, cfg, cfg.adaln_mode == AdaLnMode::Adaln);
        let noise_embed = Mlp::new(store, init, "head.noise_embed", [cfg.noise_dim, w, w]);
        Self {
            trunk,
            noise_embed,
            mode: cfg.adaln_mode,
            sharing: cfg.noise_sharing,
            horizon: cfg.pred_horizon,
        }
    }

    /// `z` is `[B·H, d_model]`; `noise` is `[B, noise_dim]` per chunk or
    /// `[B·H, noise_dim]` per timestep.
    pub fn forward(&self, g: &mut Graph, z: Var, noise: Var) -> Result<Var> {
        let rows = g.value(z).rows();
        let nrows = g.value(noise).rows();
        let repeat = match self.sharing {
            NoiseSharing::PerChunk => self.horizon,
            NoiseSharing::PerTimestep => 1,
        };
        if nrows * repeat != rows {
            return Err(Error::dim(format!(
                "noise {:?} does not match {rows} backbone rows",
                g.shape(noise)
            )));
        }
        let e = self.noise_embed.forward(g, noise)?;
        match self.mode {
            AdaLnMode::Adaln => self.trunk.forward(g, z, Some((e, repeat))),
            AdaLnMode::Concat => {
                let e = if repeat > 1 { g.repeat_rows(e, repeat)? } else { e };
                let x = g.concat_cols(z, e)?;
                self.trunk.forward(g, x, None)
            }
        }
    }
}

/// Deterministic regression head.
#[derive(Clone, Debug)]
pub struct L2Head {
    trunk: Trunk,
}

impl L2Head {
    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.trunk.forward(g, z, None)
    }
}

/// Noise-prediction head for the diffusion baseline.
#[derive(Clone, Debug)]
pub struct DdpmHead {
    trunk: Trunk,
    time_mlp: Mlp,
    width: usize,
    horizon: usize,
    pub schedule: DdpmSchedule,
}

impl DdpmHead {
    /// `z` and `x` are `[B·H, _]`; `steps` holds one timestep per chunk.
    pub fn forward(&self, g: &mut Graph, z: Var, x: Var, steps: &[usize]) -> Result<Var> {
        if steps.len() * self.horizon != g.value(z).rows() {
            return Err(Error::dim(format!(
                "{} timesteps for {} backbone rows",
                steps.len(),
                g.value(z).rows()
            )));
        }
        let temb = g.input(timestep_embedding(steps, self.width));
        let e = self.time_mlp.forward(g, temb)?;
        let input = g.concat_cols(z, x)?;
        self.trunk.forward(g, input, Some((e, self.horizon)))
    }
}

/// Sinusoidal features of integer timesteps, `[steps.len(), width]`.
pub(crate) fn timestep_embedding(steps: &[usize], width: usize) -> Tensor {
    let half = width / 2;
    let mut data = vec![0.0; steps.len() * width];
    for (r, &k) in steps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let a = k as f64 * freq;
            data[r * width + i] = a.sin();
            data[r * width + half + i] = a.cos();
        }
    }
    Tensor::from_parts(vec![steps.len(), width], data)
}

/// Cosine noise schedule with `K` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DdpmSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DdpmSchedule {
    pub fn cosine(steps: usize) -> Self {
        let s = 0.008;
        let f = |t: f64| (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let betas: Vec<f64> = (0..steps)
            .map(|k| (1.0 - f(k as f64 + 1.0) / f(k as f64)).min(0.999))
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// One reverse step from `x_k` given predicted noise; `noise` is the
    /// fresh Gaussian draw (ignored at `k = 0`). The implied clean sample is
    /// clipped to `[-1, 1]` before forming the posterior mean.
    pub fn reverse_step(&self, k: usize, x: &mut [f64], eps_hat: &[f64], noise: &[f64]) {
        let ab = self.alpha_bars[k];
        let ab_prev = if k == 0 { 1.0 } else { self.alpha_bars[k - 1] };
        let beta = self.betas[k];
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = self.alphas[k].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = if k == 0 {
            0.0
        } else {
            (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
        };
        for ((xi, &e), &n) in x.iter_mut().zip(eps_hat).zip(noise) {
            let x0 = ((*xi - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-1.0, 1.0);
            *xi = c0 * x0 + ct * *xi + sigma * n;
        }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Energy(EnergyHead),
    L2(L2Head),
    Ddpm(DdpmHead),
}

impl Head {
    pub(crate) fn new(store: &mut ParamStore, init: &mut Init, cfg: &PolicyConfig) -> Self {
        match cfg.head_kind {
            super::HeadKind::Energy => Head::Energy(EnergyHead::new(store, init, cfg)),
            super::HeadKind::L2 => Head::L2(L2Head {
                trunk: Trunk::new(store, init, cfg.d_model, cfg, false),
            }),
            super::HeadKind::Ddpm => {
                let w = cfg.head_width;
                let trunk = Trunk::new(store, init, cfg.d_model + cfg.d_action, cfg, true);
                let time_mlp = Mlp::new(store, init, "head.time_mlp", [w, w, w]);
                Head::Ddpm(DdpmHead {
                    trunk,
                    time_mlp,
                    width: w,
                    horizon: cfg.pred_horizon,
                    schedule: DdpmSchedule::cosine(cfg.ddpm_steps),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_is_monotone() {
        let s = DdpmSchedule::cosine(100);
        assert_eq!(s.steps(), 100);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars[0] > 0.99 && *s.alpha_bars.last().unwrap() < 1e-3);
        assert!(s.betas.iter().all(|&b| b > 0.0 && b <= 0.999));
    }

    #[test]
    fn reverse_step_with_true_noise_recovers_clean_sample() {
        // With the exact noise and k = 0 the posterior mean is the clean value.
        let s = DdpmSchedule::cosine(10);
        let (a, eps) = (0.3, -1.2);
        let ab = s.alpha_bars[0];
        let mut x = [ab.sqrt() * a + (1.0 - ab).sqrt() * eps];
        s.reverse_step(0, &mut x, &[eps], &[0.0]);
        assert!((x[0] - a).abs() < 1e-12);
    }

    #[test]
    fn timestep_embedding_zero_step() {
        let t = timestep_embedding(&[0], 6);
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
