//! The energy score, its two-sample training loss, and exact oracles.
//!
//! For a predictive distribution `p` and an observation `y`,
//!
//! ```text
//! S(p, y) = -E‖X − X′‖^α + 2·E‖X − y‖^α,      X, X′ ~ p i.i.d.
//! ```
//!
//! is strictly proper for `α ∈ (0, 2)`. Two independent model samples
//! `a¹, a²` give the unbiased per-example loss
//!
//! ```text
//! ‖a¹ − y‖^α + ‖a² − y‖^α − ‖a¹ − a²‖^α
//! ```
//!
//! whose expectation is `S(p, y)`. The differentiable pieces run on the
//! tape; the plain-`f64` functions below are enumeration oracles used to
//! check them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_alpha, kernels, Tape, Tensor, Var, DEFAULT_NORM_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// How a chunk is split into scored points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreGranularity {
    /// Each timestep row is one point in `R^d_action`.
    #[default]
    PerTimestep,
    /// The whole `H·d_action` chunk is one point.
    Flattened,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub alpha: f64,
    pub eps: f64,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default)]
    pub granularity: ScoreGranularity,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            eps: DEFAULT_NORM_EPS,
            reduction: Reduction::Mean,
            granularity: ScoreGranularity::PerTimestep,
        }
    }
}

impl EnergyConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha, self.eps)
    }

    /// Whether the score is strictly proper at this exponent.
    pub fn is_strictly_proper(&self) -> bool {
        self.alpha > 0.0 && self.alpha < 2.0
    }
}

/// Per-row `‖a1−t‖^α + ‖a2−t‖^α − ‖a1−a2‖^α` as a vector of row losses.
fn row_losses(tape: &mut Tape, a1: Var, a2: Var, target: Var, cfg: &EnergyConfig) -> Result<Var> {
    cfg.validate()?;
    let (s1, s2, st) = (tape.shape(a1), tape.shape(a2), tape.shape(target));
    if s1 != s2 || s1 != st {
        return Err(Error::dim(format!(
            "energy loss needs equal shapes, got {s1:?}, {s2:?}, {st:?}"
        )));
    }
    let d1 = tape.sub(a1, target)?;
    let d2 = tape.sub(a2, target)?;
    let d12 = tape.sub(a1, a2)?;
    let n1 = tape.norm_alpha(d1, cfg.alpha, cfg.eps)?;
    let n2 = tape.norm_alpha(d2, cfg.alpha, cfg.eps)?;
    let n12 = tape.norm_alpha(d12, cfg.alpha, cfg.eps)?;
    let s = tape.add(n1, n2)?;
    tape.sub(s, n12)
}

/// Energy loss for one pair of predicted points and a target, all `[d]`.
pub fn energy_loss_pair(tape: &mut Tape, a1: Var, a2: Var, target: Var, cfg: &EnergyConfig) -> Result<Var> {
    if tape.value(a1).rank() != 1 {
        return Err(Error::dim(format!(
            "energy_loss_pair expects vectors, got {:?}",
            tape.shape(a1)
        )));
    }
    row_losses(tape, a1, a2, target, cfg)
}

/// Energy loss between two sampled chunks and the target chunk.
///
/// Inputs are `[batch·horizon, d_action]` with each chunk's rows contiguous.
/// Per-timestep scoring reduces over all `batch·horizon` rows; flattened
/// scoring treats each chunk as one point and reduces over `batch`.
pub fn chunk_energy_loss(
    tape: &mut Tape,
    c1: Var,
    c2: Var,
    target: Var,
    horizon: usize,
    cfg: &EnergyConfig,
) -> Result<Var> {
    let shape = tape.shape(target).to_vec();
    if shape.len() != 2 || horizon == 0 || !shape[0].is_multiple_of(horizon) {
        return Err(Error::dim(format!(
            "chunk loss expects [batch·{horizon}, d_action], got {shape:?}"
        )));
    }
    let per = match cfg.granularity {
        ScoreGranularity::PerTimestep => row_losses(tape, c1, c2, target, cfg)?,
        ScoreGranularity::Flattened => {
            let flat = [shape[0] / horizon, horizon * shape[1]];
            let (a, b, t) = (
                tape.reshape(c1, &flat)?,
                tape.reshape(c2, &flat)?,
                tape.reshape(target, &flat)?,
            );
            row_losses(tape, a, b, t, cfg)?
        }
    };
    match cfg.reduction {
        Reduction::Mean => tape.mean(per, None),
        Reduction::Sum => tape.sum(per, None),
    }
}

/// Value-only form of [`chunk_energy_loss`].
pub fn chunk_energy_loss_value(c1: &Tensor, c2: &Tensor, target: &Tensor, horizon: usize, cfg: &EnergyConfig) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let (a, b, t) = (
        tape.constant(c1.clone()),
        tape.constant(c2.clone()),
        tape.constant(target.clone()),
    );
    let l = chunk_energy_loss(&mut tape, a, b, t, horizon, cfg)?;
    tape.value(l).item()
}

fn dist_alpha(x: &[f64], y: &[f64], alpha: f64) -> f64 {
    let s: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    s.powf(alpha / 2.0)
}

/// Finite-support distribution used by the exact oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution {
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(Error::contract(format!(
                "{} atoms with {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        let d = atoms[0].len();
        if atoms.iter().any(|a| a.len() != d) {
            return Err(Error::dim("atoms of different dimensions"));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::contract("negative weight"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("weights sum to {total}, not 1")));
        }
        for i in 0..atoms.len() {
            for j in 0..i {
                if atoms[i] == atoms[j] {
                    return Err(Error::contract(format!("duplicate atom {:?}", atoms[i])));
                }
            }
        }
        Ok(Self { atoms, weights })
    }

    pub fn point_mass(x: Vec<f64>) -> Self {
        Self {
            atoms: vec![x],
            weights: vec![1.0],
        }
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    /// Inverse-CDF draw from a uniform variate `u ∈ [0, 1)`.
    pub fn draw(&self, u: f64) -> &[f64] {
        let mut acc = 0.0;
        for (a, &w) in self.atoms.iter().zip(&self.weights) {
            acc += w;
            if u < acc {
                return a;
            }
        }
        self.atoms.last().expect("non-empty")
    }
}

/// Exact `S(p, y)` by enumerating atom pairs.
pub fn closed_form_discrete_score(p: &DiscreteDistribution, y: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha, 0.0)?;
    if y.len() != p.dim() {
        return Err(Error::dim(format!("observation has {} dims, atoms {}", y.len(), p.dim())));
    }
    if p.atoms.len() * p.atoms.len() > 10_000 {
        return Err(Error::param("too many atoms to enumerate pairs"));
    }
    let mut pair = 0.0;
    let mut data = 0.0;
    for (xi, &wi) in p.atoms.iter().zip(&p.weights) {
        for (xj, &wj) in p.atoms.iter().zip(&p.weights) {
            pair += wi * wj * dist_alpha(xi, xj, alpha);
        }
        data += wi * dist_alpha(xi, y, alpha);
    }
    Ok(-pair + 2.0 * data)
}

/// `E_{y~q} S(p, y)`, again by enumeration.
pub fn expected_score(p: &DiscreteDistribution, q: &DiscreteDistribution, alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for (y, &w) in q.atoms.iter().zip(&q.weights) {
        total += w * closed_form_discrete_score(p, y, alpha)?;
    }
    Ok(total)
}

/// Plug-in score from samples of `p`, with the pairwise term as a U-statistic.
pub fn energy_score_empirical(samples: &[Vec<f64>], y: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha, 0.0)?;
    let n = samples.len();
    if n < 2 {
        return Err(Error::param(format!("need at least 2 samples, got {n}")));
    }
    let mut pair = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pair += dist_alpha(&samples[i], &samples[j], alpha);
            }
        }
    }
    let data: f64 = samples.iter().map(|x| dist_alpha(x, y, alpha)).sum();
    Ok(-pair / (n * (n - 1)) as f64 + 2.0 * data / n as f64)
}

fn u_within(xs: &[Vec<f64>], alpha: f64) -> f64 {
    let n = xs.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += dist_alpha(&xs[i], &xs[j], alpha);
        }
    }
    2.0 * s / (n * (n - 1)) as f64
}

/// Unbiased estimate of `2E‖X−Y‖^α − E‖X−X′‖^α − E‖Y−Y′‖^α`.
pub fn energy_distance(p_samples: &[Vec<f64>], q_samples: &[Vec<f64>], alpha: f64) -> Result<f64> {
    check_alpha(alpha, 0.0)?;
    let (n, m) = (p_samples.len(), q_samples.len());
    if n < 2 || m < 2 {
        return Err(Error::param(format!("need at least 2 samples per side, got {n} and {m}")));
    }
    let mut cross = 0.0;
    for x in p_samples {
        for y in q_samples {
            cross += dist_alpha(x, y, alpha);
        }
    }
    cross /= (n * m) as f64;
    Ok(2.0 * cross - u_within(p_samples, alpha) - u_within(q_samples, alpha))
}

/// Per-row norms on plain tensors, for callers that do not need a tape.
pub fn row_norms(x: &Tensor, alpha: f64, eps: f64) -> Result<Tensor> {
    check_alpha(alpha, eps)?;
    Ok(kernels::norm_alpha_rows(x, alpha, eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact() -> EnergyConfig {
        EnergyConfig {
            eps: 0.0,
            ..EnergyConfig::default()
        }
    }

    fn pair_loss(a1: &[f64], a2: &[f64], t: &[f64], cfg: &EnergyConfig) -> f64 {
        let mut tape = Tape::no_grad();
        let a = tape.constant(Tensor::vector(a1.to_vec()));
        let b = tape.constant(Tensor::vector(a2.to_vec()));
        let y = tape.constant(Tensor::vector(t.to_vec()));
        let l = energy_loss_pair(&mut tape, a, b, y, cfg).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn pair_loss_examples() {
        assert_eq!(pair_loss(&[0.3, 1.0], &[0.3, 1.0], &[0.3, 1.0], &exact()), 0.0);
        assert!(pair_loss(&[0.3, 1.0], &[-2.0, 4.0], &[0.3, 1.0], &exact()).abs() < 1e-15);
        let v = pair_loss(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0], &exact());
        assert!((v - (2.0 - 2f64.sqrt())).abs() < 1e-15);
        assert!((v - 0.585_786).abs() < 1e-6);
    }

    #[test]
    fn pair_loss_dimension_mismatch() {
        let mut tape = Tape::no_grad();
        let a = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let y = tape.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(
            energy_loss_pair(&mut tape, a, b, y, &exact()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn chunk_loss_single_row_equals_pair() {
        let cfg = EnergyConfig::default();
        let (a, b, t) = ([0.2, -0.7], [1.1, 0.4], [0.0, 0.5]);
        let c = |v: &[f64]| Tensor::new(&[1, 2], v.to_vec()).unwrap();
        let chunk = chunk_energy_loss_value(&c(&a), &c(&b), &c(&t), 1, &cfg).unwrap();
        assert_eq!(chunk, pair_loss(&a, &b, &t, &cfg));
        let same = chunk_energy_loss_value(&c(&t), &c(&t), &c(&t), 1, &exact()).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn chunk_loss_matches_row_loop() {
        use crate::tensor::{NoiseDist, Rng};
        let mut rng = Rng::new(9);
        let (b, h, d) = (3, 5, 2);
        let c1 = rng.sample(NoiseDist::Gaussian, &[b * h, d]).unwrap();
        let c2 = rng.sample(NoiseDist::Gaussian, &[b * h, d]).unwrap();
        let t = rng.sample(NoiseDist::Gaussian, &[b * h, d]).unwrap();
        for alpha in [0.5, 1.0, 1.7] {
            let cfg = EnergyConfig::with_alpha(alpha);
            let got = chunk_energy_loss_value(&c1, &c2, &t, h, &cfg).unwrap();
            // independent loop oracle
            let norm = |x: &[f64], y: &[f64]| {
                (x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() + cfg.eps).powf(alpha / 2.0)
            };
            let mut acc = 0.0;
            for r in 0..b * h {
                acc += norm(c1.row(r), t.row(r)) + norm(c2.row(r), t.row(r)) - norm(c1.row(r), c2.row(r));
            }
            assert!((got - acc / (b * h) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn flattened_granularity_scores_whole_chunks() {
        let cfg = EnergyConfig {
            granularity: ScoreGranularity::Flattened,
            ..exact()
        };
        let z = Tensor::zeros(&[2, 1]);
        let one = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
        // single chunk of H=2: ‖(1,1)‖ + 0 − ‖(1,1)‖ = 0; a1=0,a2=1,t=0 → 0 + √2 − √2
        assert!(chunk_energy_loss_value(&z, &one, &z, 2, &cfg).unwrap().abs() < 1e-15);
        let v = chunk_energy_loss_value(&one, &one, &z, 2, &cfg).unwrap();
        assert!((v - 2.0 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn closed_form_examples() {
        let p = DiscreteDistribution::new(vec![vec![0.0], vec![2.0]], vec![0.5, 0.5]).unwrap();
        assert!((closed_form_discrete_score(&p, &[1.0], 1.0).unwrap() - 1.0).abs() < 1e-15);
        let pm = DiscreteDistribution::point_mass(vec![0.4, -1.0]);
        assert_eq!(closed_form_discrete_score(&pm, &[0.4, -1.0], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn distribution_contracts() {
        assert!(DiscreteDistribution::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.4]).is_err());
        assert!(DiscreteDistribution::new(vec![vec![0.0], vec![0.0]], vec![0.5, 0.5]).is_err());
        assert!(matches!(
            DiscreteDistribution::new(vec![vec![0.0]], vec![0.9]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn empirical_score_examples() {
        let y = [0.5, 0.5];
        let at_y = vec![y.to_vec(); 4];
        assert_eq!(energy_score_empirical(&at_y, &y, 1.0).unwrap(), 0.0);
        let s = energy_score_empirical(&[vec![0.0], vec![2.0]], &[1.0], 1.0).unwrap();
        assert!(s.abs() < 1e-15);
        assert!(energy_score_empirical(&[vec![0.0]], &[1.0], 1.0).is_err());
    }

    #[test]
    fn empirical_score_matches_enumeration_of_empirical_measure() {
        // Under the empirical measure the pair term E‖X−X′‖ includes the
        // zero diagonal; the U-statistic drops it, hence the n/(n−1) factor.
        let xs = vec![vec![0.1, 0.0], vec![1.0, -0.5], vec![0.3, 2.0], vec![-1.0, 0.7], vec![0.0, 0.2]];
        let n = xs.len() as f64;
        let p = DiscreteDistribution::new(xs.clone(), vec![1.0 / n; xs.len()]).unwrap();
        let y = [0.25, 0.5];
        for alpha in [0.5, 1.0, 1.5] {
            let data_only = closed_form_discrete_score(&DiscreteDistribution::point_mass(y.to_vec()), &y, alpha).unwrap();
            assert_eq!(data_only, 0.0);
            let full = closed_form_discrete_score(&p, &y, alpha).unwrap();
            let mut data = 0.0;
            for x in &xs {
                data += dist_alpha(x, &y, alpha) / n;
            }
            let pair_v = 2.0 * data - full;
            let expect = -pair_v * n / (n - 1.0) + 2.0 * data;
            let got = energy_score_empirical(&xs, &y, alpha).unwrap();
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn energy_distance_examples() {
        let xs = vec![vec![0.0], vec![1.0], vec![3.0]];
        assert!(energy_distance(&xs, &xs, 1.0).unwrap() <= 1e-12);
        let d0 = vec![vec![0.0]; 5];
        let d1 = vec![vec![1.0]; 5];
        assert!((energy_distance(&d0, &d1, 1.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(energy_distance(&d0[..1], &d1, 1.0).is_err());
    }

    #[test]
    fn alpha_two_reduces_to_mean_gap() {
        use crate::tensor::{NoiseDist, Rng};
        let mut rng = Rng::new(31);
        let xs: Vec<Vec<f64>> = (0..400).map(|_| vec![rng.gaussian() + 0.5, 2.0 * rng.gaussian()]).collect();
        let ys: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![rng.draw(NoiseDist::U10), rng.gaussian() - 0.25])
            .collect();
        let mean = |v: &[Vec<f64>]| {
            let n = v.len() as f64;
            (0..2).map(|k| v.iter().map(|x| x[k]).sum::<f64>() / n).collect::<Vec<_>>()
        };
        let trace_var = |v: &[Vec<f64>], m: &[f64]| {
            let n = v.len() as f64;
            v.iter()
                .map(|x| x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .sum::<f64>()
                / (n - 1.0)
        };
        let (mx, my) = (mean(&xs), mean(&ys));
        let gap: f64 = mx.iter().zip(&my).map(|(a, b)| (a - b).powi(2)).sum();
        // exact finite-sample identity of the unbiased estimator at α = 2
        let exact = 2.0 * gap - 2.0 * trace_var(&xs, &mx) / 400.0 - 2.0 * trace_var(&ys, &my) / 300.0;
        let ed = energy_distance(&xs, &ys, 2.0).unwrap();
        assert!((ed - exact).abs() < 1e-10);
        // population value 2‖μp − μq‖² = 2·(0.5² + 0.25²) within MC error
        assert!((ed - 2.0 * (0.25 + 0.0625)).abs() < 0.15);
    }

    #[test]
    fn row_norms_reject_alpha_above_two() {
        assert!(row_norms(&Tensor::zeros(&[2, 2]), 2.5, 0.0).is_err());
    }
}
