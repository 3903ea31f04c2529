use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::data::{fmt_real, NormKind, NormStats};
use crate::env::{classify_mode, env_step, EnvSpec, ExpertController};
use crate::error::{Error, Result};
use crate::policy::{EnergyPolicyModel, HeadKind, ObservationWindow};
use crate::tensor::{Rng, Tensor};

/// Anything that maps recent observations to a chunk of actions, in raw
/// environment units.
pub trait ChunkPolicy {
    fn obs_horizon(&self) -> usize;
    fn exec_horizon(&self) -> usize;
    /// Reset internal state and reseed any randomness for a new episode.
    fn reseed(&mut self, seed: u64);
    /// `history` holds `obs_horizon` observations, oldest first. Returns at
    /// least `exec_horizon` actions.
    fn plan(&mut self, history: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// A trained model plus the normalization it was trained with.
pub struct ModelPolicy<'a> {
    pub model: &'a EnergyPolicyModel,
    pub stats: NormStats,
    rng: Rng,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(model: &'a EnergyPolicyModel, stats: NormStats) -> Self {
        Self {
            model,
            stats,
            rng: Rng::new(0),
        }
    }
}

impl ChunkPolicy for ModelPolicy<'_> {
    fn obs_horizon(&self) -> usize {
        self.model.config().obs_horizon
    }

    fn exec_horizon(&self) -> usize {
        self.model.config().exec_horizon
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = Rng::new(seed);
    }

    fn plan(&mut self, history: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<Vec<f64>> = history.iter().map(|o| self.stats.normalize(o, NormKind::Obs)).collect();
        let chunk = self.model.predict_chunk(&ObservationWindow::new(&rows)?, &mut self.rng)?;
        Ok((0..chunk.horizon())
            .map(|t| self.stats.denormalize(chunk.row(t), NormKind::Action))
            .collect())
    }
}

/// The scripted expert, replanning every step. The mode is `seed mod n_modes`.
pub struct ExpertPolicy {
    spec: EnvSpec,
    ctl: ExpertController,
    rng: Rng,
}

impl ExpertPolicy {
    pub fn new(spec: &EnvSpec) -> Result<Self> {
        Ok(Self {
            ctl: ExpertController::new(spec, 0)?,
            spec: spec.clone(),
            rng: Rng::new(0),
        })
    }
}

impl ChunkPolicy for ExpertPolicy {
    fn obs_horizon(&self) -> usize {
        1
    }

    fn exec_horizon(&self) -> usize {
        1
    }

    fn reseed(&mut self, seed: u64) {
        let mode = (seed % self.spec.n_modes() as u64) as usize;
        self.ctl = ExpertController::new(&self.spec, mode).expect("mode is in range");
        self.rng = Rng::new(seed);
    }

    fn plan(&mut self, history: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let pos = history.last().ok_or_else(|| Error::contract("empty history"))?;
        Ok(vec![self.ctl.act(&self.spec, pos, &mut self.rng)])
    }
}

/// Uniformly random actions within the action bounds.
pub struct RandomPolicy {
    bounds: Vec<(f64, f64)>,
    rng: Rng,
}

impl RandomPolicy {
    pub fn new(spec: &EnvSpec) -> Self {
        Self {
            bounds: spec.action_bounds.clone(),
            rng: Rng::new(0),
        }
    }
}

impl ChunkPolicy for RandomPolicy {
    fn obs_horizon(&self) -> usize {
        1
    }

    fn exec_horizon(&self) -> usize {
        1
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = Rng::new(seed);
    }

    fn plan(&mut self, _: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![self.bounds.iter().map(|&(lo, hi)| self.rng.uniform(lo, hi)).collect()])
    }
}

/// Test policy whose chunk rows are distinguishable constants: row `i` of
/// the `c`-th plan is `step · (c·H + i)` in every action dimension.
pub struct StaircasePolicy {
    pub horizon: usize,
    pub exec: usize,
    pub d_action: usize,
    pub step: f64,
    pub calls: usize,
}

impl ChunkPolicy for StaircasePolicy {
    fn obs_horizon(&self) -> usize {
        1
    }

    fn exec_horizon(&self) -> usize {
        self.exec
    }

    fn reseed(&mut self, _: u64) {
        self.calls = 0;
    }

    fn plan(&mut self, _: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let c = self.calls;
        self.calls += 1;
        Ok((0..self.horizon)
            .map(|i| vec![self.step * (c * self.horizon + i) as f64; self.d_action])
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub success: bool,
    pub steps_taken: usize,
    /// Positions, starting with the initial state.
    pub trajectory: Vec<Vec<f64>>,
    /// Actions as handed to the environment (before clamping).
    pub actions: Vec<Vec<f64>>,
    pub mode_label: Option<usize>,
    pub wall_hit: bool,
    pub planner_calls: usize,
}

/// Receding-horizon rollout: plan a chunk, execute its first
/// `exec_horizon` rows (fewer if the episode ends), repeat.
pub fn rollout(policy: &mut dyn ChunkPolicy, spec: &EnvSpec, seed: u64) -> Result<RolloutResult> {
    policy.reseed(seed);
    let o = policy.obs_horizon();
    let k = policy.exec_horizon();
    let mut state = spec.reset();
    let mut observations = vec![state.observation()];
    let mut res = RolloutResult {
        success: false,
        steps_taken: 0,
        trajectory: vec![state.pos.clone()],
        actions: Vec::new(),
        mode_label: None,
        wall_hit: false,
        planner_calls: 0,
    };
    while !state.terminal {
        let n = observations.len();
        let history: Vec<Vec<f64>> = (0..o)
            .map(|j| observations[(n + j).saturating_sub(o)].clone())
            .collect();
        let chunk = policy.plan(&history)?;
        res.planner_calls += 1;
        if chunk.len() < k {
            return Err(Error::contract(format!(
                "policy planned {} actions, needs at least {k}",
                chunk.len()
            )));
        }
        for a in chunk.into_iter().take(k) {
            let (next, obs, done) = env_step(spec, &state, &a)?;
            res.actions.push(a);
            res.trajectory.push(next.pos.clone());
            observations.push(obs);
            state = next;
            if done {
                break;
            }
        }
    }
    res.success = state.success;
    res.wall_hit = state.wall_hit;
    res.steps_taken = state.step;
    res.mode_label = classify_mode(spec, &res.trajectory);
    Ok(res)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub success_rate: f64,
    pub results: Vec<RolloutResult>,
}

impl EvalSummary {
    pub fn wall_hits(&self) -> usize {
        self.results.iter().filter(|r| r.wall_hit).count()
    }

    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| !r.success).count()
    }
}

/// Success rate over rollouts seeded `seed + i`.
pub fn evaluate_success(policy: &mut dyn ChunkPolicy, spec: &EnvSpec, n_episodes: usize, seed: u64) -> Result<EvalSummary> {
    if n_episodes == 0 {
        return Err(Error::param("n_episodes must be at least 1"));
    }
    let results = (0..n_episodes as u64)
        .map(|i| rollout(policy, spec, seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    let wins = results.iter().filter(|r| r.success).count();
    Ok(EvalSummary {
        success_rate: wins as f64 / n_episodes as f64,
        results,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    /// Rollouts per mode.
    pub counts: Vec<usize>,
    pub unclassified: usize,
    pub summary: EvalSummary,
}

impl Coverage {
    pub fn modes_with_at_least(&self, n: usize) -> usize {
        self.counts.iter().filter(|&&c| c >= n).count()
    }
}

/// `n_samples` rollouts from the fixed start state; only the policy's noise
/// seed changes between them.
pub fn mode_coverage(policy: &mut dyn ChunkPolicy, spec: &EnvSpec, n_samples: usize, start_seed: u64) -> Result<Coverage> {
    let summary = evaluate_success(policy, spec, n_samples, start_seed)?;
    let mut counts = vec![0; spec.n_modes()];
    let mut unclassified = 0;
    for r in &summary.results {
        match r.mode_label {
            Some(m) if m < counts.len() => counts[m] += 1,
            _ => unclassified += 1,
        }
    }
    Ok(Coverage {
        counts,
        unclassified,
        summary,
    })
}

/// Per-dimension sample standard deviation of the first predicted action
/// over `n_samples` noise draws, in normalized action units.
pub fn sample_spread(model: &EnergyPolicyModel, window: &ObservationWindow, n_samples: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if model.head_kind() != HeadKind::Energy {
        return Err(Error::contract(format!(
            "sample_spread needs an energy head, model has {}",
            model.head_kind().name()
        )));
    }
    if n_samples < 2 {
        return Err(Error::param("sample_spread needs at least 2 samples"));
    }
    let d = model.config().d_action;
    let firsts = (0..n_samples)
        .map(|_| model.predict_chunk(window, rng).map(|c| c.row(0).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..d)
        .map(|j| {
            let mean = firsts.iter().map(|r| r[j]).sum::<f64>() / n_samples as f64;
            let var = firsts.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n_samples - 1) as f64;
            var.sqrt()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub name: String,
    /// Wall-clock per 8 executed actions.
    pub mean_ms: f64,
    pub std_ms: f64,
    pub repetitions: usize,
    pub head_evals_per_chunk: usize,
}

/// Time the planning needed for 8 executed actions (`⌈8/K⌉` chunk
/// predictions). Each repetition averages `inner` such measurements after
/// `warmup` untimed ones. Runs on the calling thread.
pub fn latency_bench(
    policies: &[(&str, &EnergyPolicyModel)],
    repetitions: usize,
    warmup: usize,
    inner: usize,
) -> Result<Vec<LatencyReport>> {
    if repetitions < 3 {
        return Err(Error::param("latency benchmarks need at least 3 repetitions"));
    }
    let first = policies.first().ok_or_else(|| Error::param("no policies to benchmark"))?.1.config();
    let mut out = Vec::new();
    for &(name, model) in policies {
        let c = model.config();
        if c.d_obs != first.d_obs || c.d_action != first.d_action {
            return Err(Error::Config(format!("{name}: dims differ from the first policy")));
        }
        let window = ObservationWindow(Tensor::zeros(&[c.obs_horizon, c.d_obs]));
        let chunks = 8usize.div_ceil(c.exec_horizon);
        let mut rng = Rng::new(0);
        let mut once = || -> Result<()> {
            for _ in 0..chunks {
                model.predict_chunk(&window, &mut rng)?;
            }
            Ok(())
        };
        for _ in 0..warmup {
            once()?;
        }
        model.reset_counts();
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t = Instant::now();
            for _ in 0..inner.max(1) {
                once()?;
            }
            times.push(t.elapsed().as_secs_f64() * 1e3 / inner.max(1) as f64);
        }
        let calls = repetitions * inner.max(1) * chunks;
        let head_evals_per_chunk = model.counts().head / calls;
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let std = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (times.len() - 1) as f64).sqrt();
        out.push(LatencyReport {
            name: name.to_string(),
            mean_ms: mean,
            std_ms: std,
            repetitions,
            head_evals_per_chunk,
        });
    }
    Ok(out)
}

/// `episode,step,pos…,act…` rows; the action columns of the final
/// position row are empty.
pub fn trajectories_csv(results: &[RolloutResult], spec: &EnvSpec) -> String {
    let mut s = String::from("episode,step");
    for i in 0..spec.d_obs {
        let _ = write!(s, ",{}", ["x", "y", "z"].get(i).map_or(format!("p{i}"), |c| c.to_string()));
    }
    for i in 0..spec.d_action {
        let _ = write!(s, ",a{i}");
    }
    s.push('\n');
    for (e, r) in results.iter().enumerate() {
        for (t, p) in r.trajectory.iter().enumerate() {
            let _ = write!(s, "{e},{t}");
            for v in p {
                let _ = write!(s, ",{}", fmt_real(*v));
            }
            match r.actions.get(t) {
                Some(a) => a.iter().for_each(|v| {
                    let _ = write!(s, ",{}", fmt_real(*v));
                }),
                None => s.push_str(&",".repeat(spec.d_action)),
            }
            s.push('\n');
        }
    }
    s
}

pub fn write_trajectories_csv(path: impl AsRef<Path>, results: &[RolloutResult], spec: &EnvSpec) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, trajectories_csv(results, spec)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staircase_executes_prefix_rows() {
        let spec = EnvSpec::line_reach();
        let mut p = StaircasePolicy {
            horizon: 5,
            exec: 3,
            d_action: 1,
            step: 1e-3,
            calls: 0,
        };
        let r = rollout(&mut p, &spec, 0).unwrap();
        for (j, a) in r.actions.iter().enumerate() {
            let (c, i) = (j / 3, j % 3);
            assert_eq!(a[0], 1e-3 * (c * 5 + i) as f64);
        }
        assert_eq!(r.steps_taken, spec.max_steps);
        assert_eq!(r.planner_calls, spec.max_steps.div_ceil(3));
    }

    #[test]
    fn expert_policy_always_succeeds() {
        for spec in [EnvSpec::forked_paths(), EnvSpec::multi_goal(), EnvSpec::line_reach()] {
            let mut p = ExpertPolicy::new(&spec).unwrap();
            let s = evaluate_success(&mut p, &spec, 12, 0).unwrap();
            assert_eq!(s.success_rate, 1.0, "{:?}", spec.name);
        }
    }

    #[test]
    fn expert_coverage_is_balanced() {
        let spec = EnvSpec::forked_paths();
        let mut p = ExpertPolicy::new(&spec).unwrap();
        let c = mode_coverage(&mut p, &spec, 50, 0).unwrap();
        assert_eq!(c.counts, vec![25, 25]);
        assert_eq!(c.unclassified, 0);
    }

    #[test]
    fn random_policy_rarely_succeeds() {
        let spec = EnvSpec::forked_paths();
        let s = evaluate_success(&mut RandomPolicy::new(&spec), &spec, 100, 0).unwrap();
        assert!(s.success_rate < 0.1);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let spec = EnvSpec::line_reach();
        let r = rollout(&mut ExpertPolicy::new(&spec).unwrap(), &spec, 0).unwrap();
        let csv = trajectories_csv(std::slice::from_ref(&r), &spec);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "episode,step,x,a0");
        assert_eq!(lines.len(), 1 + r.trajectory.len());
    }
}
