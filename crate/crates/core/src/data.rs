//! Demonstration datasets: generation from scripted experts, min-max
//! normalization, training windows and the `EPDS1` text format.
//!
//! `EPDS1` is line-oriented. The first line is the header:
//!
//! ```text
//! EPDS1 env=forked_paths seed=7 mode_policy=balanced episodes=2 max_steps=60 dt=… tolerance=… jitter=… obs_min=…,… obs_max=… act_min=… act_max=…
//! ```
//!
//! followed by exactly `episodes` lines of
//!
//! ```text
//! mode=0 success=1 len=3 obs=x,y;x,y;x,y act=a,b;a,b;a,b
//! ```
//!
//! Reals are written as `{:.16e}` (17 significant digits), which parses back
//! to the identical `f64`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{scripted_expert, EnvName, EnvSpec, Episode};
use crate::error::{Error, Result};
use crate::policy::{ActionChunk, ObservationWindow, TrainBatch};
use crate::tensor::{Rng, Tensor};

pub const DATASET_MAGIC: &str = "EPDS1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModePolicy {
    /// Episode `i` uses mode `i mod n_modes`.
    Balanced,
    /// Modes drawn i.i.d. uniformly.
    Random,
}

impl ModePolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Self::Balanced),
            "random" => Ok(Self::Random),
            other => Err(Error::param(format!("unknown mode policy {other:?} (balanced, random)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Balanced => "balanced",
            Self::Random => "random",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Obs,
    Action,
}

/// Per-dimension min/max of observations and actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub obs_min: Vec<f64>,
    pub obs_max: Vec<f64>,
    pub act_min: Vec<f64>,
    pub act_max: Vec<f64>,
}

fn min_max<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for r in rows {
        for (i, &v) in r.iter().enumerate() {
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
        }
    }
    (lo, hi)
}

impl NormStats {
    pub fn fit(episodes: &[Episode], d_obs: usize, d_action: usize) -> Self {
        let (obs_min, obs_max) = min_max(episodes.iter().flat_map(|e| &e.observations), d_obs);
        let (act_min, act_max) = min_max(episodes.iter().flat_map(|e| &e.actions), d_action);
        Self {
            obs_min,
            obs_max,
            act_min,
            act_max,
        }
    }

    fn bounds(&self, kind: NormKind) -> (&[f64], &[f64]) {
        match kind {
            NormKind::Obs => (&self.obs_min, &self.obs_max),
            NormKind::Action => (&self.act_min, &self.act_max),
        }
    }

    /// Affine map of `[min, max]` onto `[-1, 1]`; constant dims map to 0.
    pub fn normalize(&self, v: &[f64], kind: NormKind) -> Vec<f64> {
        let (lo, hi) = self.bounds(kind);
        v.iter()
            .zip(lo.iter().zip(hi))
            .map(|(&x, (&l, &h))| if h > l { 2.0 * (x - l) / (h - l) - 1.0 } else { 0.0 })
            .collect()
    }

    /// Inverse of [`Self::normalize`]; constant dims return their value.
    pub fn denormalize(&self, v: &[f64], kind: NormKind) -> Vec<f64> {
        let (lo, hi) = self.bounds(kind);
        v.iter()
            .zip(lo.iter().zip(hi))
            .map(|(&x, (&l, &h))| if h > l { (x + 1.0) * 0.5 * (h - l) + l } else { l })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    pub env: EnvSpec,
    pub seed: u64,
    pub mode_policy: ModePolicy,
    pub episodes: Vec<Episode>,
    pub norm_stats: NormStats,
}

impl DemoDataset {
    pub fn new(env: EnvSpec, seed: u64, mode_policy: ModePolicy, episodes: Vec<Episode>) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::param("a dataset needs at least one episode"));
        }
        for (i, e) in episodes.iter().enumerate() {
            let ok = !e.is_empty()
                && e.observations.len() == e.len()
                && e.observations.iter().all(|o| o.len() == env.d_obs && o.iter().all(|v| v.is_finite()))
                && e.actions.iter().all(|a| a.len() == env.d_action && a.iter().all(|v| v.is_finite()));
            if !ok {
                return Err(Error::param(format!("episode {i} is empty, ragged or non-finite")));
            }
        }
        let norm_stats = NormStats::fit(&episodes, env.d_obs, env.d_action);
        Ok(Self {
            env,
            seed,
            mode_policy,
            episodes,
            norm_stats,
        })
    }

    /// Episodes per mode label; the final entry counts unlabeled episodes.
    pub fn mode_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.env.n_modes() + 1];
        for e in &self.episodes {
            match e.mode_label {
                Some(m) if m < self.env.n_modes() => h[m] += 1,
                _ => *h.last_mut().unwrap() += 1,
            }
        }
        h
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }
}

/// Threads to use for parallel work, from `ENERGY_POLICY_THREADS` (default 1).
pub fn thread_budget() -> usize {
    std::env::var("ENERGY_POLICY_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn episode_mode(spec: &EnvSpec, policy: ModePolicy, seed: u64, i: usize) -> usize {
    match policy {
        ModePolicy::Balanced => i % spec.n_modes(),
        ModePolicy::Random => Rng::with_stream(seed.wrapping_add(i as u64), 1).below(spec.n_modes()),
    }
}

/// Roll out `n_episodes` expert demonstrations. Episode `i` is seeded with
/// `seed + i`, so the result does not depend on the thread count.
pub fn generate_dataset(spec: &EnvSpec, n_episodes: usize, seed: u64, policy: ModePolicy) -> Result<DemoDataset> {
    spec.validate()?;
    if n_episodes == 0 {
        return Err(Error::param("n_episodes must be at least 1"));
    }
    let one = |i: usize| {
        let mode = episode_mode(spec, policy, seed, i);
        scripted_expert(spec, mode, &mut Rng::new(seed.wrapping_add(i as u64)))
    };
    let threads = thread_budget().min(n_episodes);
    let episodes = if threads <= 1 {
        (0..n_episodes).map(one).collect::<Result<Vec<_>>>()?
    } else {
        let per = n_episodes.div_ceil(threads);
        let parts: Vec<Result<Vec<Episode>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let one = &one;
                    s.spawn(move || (t * per..((t + 1) * per).min(n_episodes)).map(one).collect())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("generation thread panicked")).collect()
        });
        let mut all = Vec::with_capacity(n_episodes);
        for p in parts {
            all.extend(p?);
        }
        all
    };
    DemoDataset::new(spec.clone(), seed, policy, episodes)
}

/// Normalized (observation window, action chunk) pairs stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingWindows {
    pub obs_horizon: usize,
    pub horizon: usize,
    pub d_obs: usize,
    pub d_action: usize,
    obs: Vec<f64>,
    actions: Vec<f64>,
}

impl TrainingWindows {
    pub fn len(&self) -> usize {
        self.obs.len() / (self.obs_horizon * self.d_obs)
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    fn obs_slice(&self, i: usize) -> &[f64] {
        let w = self.obs_horizon * self.d_obs;
        &self.obs[i * w..(i + 1) * w]
    }

    fn act_slice(&self, i: usize) -> &[f64] {
        let w = self.horizon * self.d_action;
        &self.actions[i * w..(i + 1) * w]
    }

    pub fn get(&self, i: usize) -> (ObservationWindow, ActionChunk) {
        (
            ObservationWindow(Tensor::from_parts(vec![self.obs_horizon, self.d_obs], self.obs_slice(i).to_vec())),
            ActionChunk(Tensor::from_parts(vec![self.horizon, self.d_action], self.act_slice(i).to_vec())),
        )
    }

    pub fn pairs(&self) -> Vec<(ObservationWindow, ActionChunk)> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// Stack the windows at `indices` into one training batch.
    pub fn batch(&self, indices: &[usize]) -> TrainBatch {
        let mut obs = Vec::with_capacity(indices.len() * self.obs_horizon * self.d_obs);
        let mut actions = Vec::with_capacity(indices.len() * self.horizon * self.d_action);
        for &i in indices {
            obs.extend_from_slice(self.obs_slice(i));
            actions.extend_from_slice(self.act_slice(i));
        }
        TrainBatch {
            obs: Tensor::from_parts(vec![indices.len() * self.obs_horizon, self.d_obs], obs),
            actions: Tensor::from_parts(vec![indices.len() * self.horizon, self.d_action], actions),
            batch: indices.len(),
        }
    }
}

/// One window per timestep of every episode. History before the first step
/// repeats `o_0`; the chunk past the last step repeats the final action.
pub fn make_training_windows(dataset: &DemoDataset, obs_horizon: usize, horizon: usize) -> Result<TrainingWindows> {
    if obs_horizon == 0 || horizon == 0 {
        return Err(Error::param("obs_horizon and horizon must be at least 1"));
    }
    if dataset.episodes.is_empty() {
        return Err(Error::param("cannot window an empty dataset"));
    }
    let stats = &dataset.norm_stats;
    let mut out = TrainingWindows {
        obs_horizon,
        horizon,
        d_obs: dataset.env.d_obs,
        d_action: dataset.env.d_action,
        obs: Vec::new(),
        actions: Vec::new(),
    };
    for ep in &dataset.episodes {
        let obs: Vec<Vec<f64>> = ep.observations.iter().map(|o| stats.normalize(o, NormKind::Obs)).collect();
        let act: Vec<Vec<f64>> = ep.actions.iter().map(|a| stats.normalize(a, NormKind::Action)).collect();
        let n = ep.len();
        for t in 0..n {
            for j in 0..obs_horizon {
                let src = (t + j + 1).saturating_sub(obs_horizon);
                out.obs.extend_from_slice(&obs[src]);
            }
            for j in 0..horizon {
                out.actions.extend_from_slice(&act[(t + j).min(n - 1)]);
            }
        }
    }
    Ok(out)
}

pub(crate) fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|&x| fmt_real(x)).collect::<Vec<_>>().join(",")
}

fn fmt_rows(rows: &[Vec<f64>]) -> String {
    rows.iter().map(|r| fmt_vec(r)).collect::<Vec<_>>().join(";")
}

/// Canonical `EPDS1` text of a dataset.
pub fn dataset_to_string(ds: &DemoDataset) -> String {
    let s = &ds.norm_stats;
    let mut out = format!(
        "{DATASET_MAGIC} env={} seed={} mode_policy={} episodes={} max_steps={} dt={} tolerance={} jitter={} obs_min={} obs_max={} act_min={} act_max={}\n",
        ds.env.name.as_str(),
        ds.seed,
        ds.mode_policy.as_str(),
        ds.episodes.len(),
        ds.env.max_steps,
        fmt_real(ds.env.dt),
        fmt_real(ds.env.tolerance),
        fmt_real(ds.env.expert_jitter),
        fmt_vec(&s.obs_min),
        fmt_vec(&s.obs_max),
        fmt_vec(&s.act_min),
        fmt_vec(&s.act_max),
    );
    for e in &ds.episodes {
        let mode = e.mode_label.map_or("-".to_string(), |m| m.to_string());
        let _ = writeln!(
            out,
            "mode={mode} success={} len={} obs={} act={}",
            u8::from(e.success),
            e.len(),
            fmt_rows(&e.observations),
            fmt_rows(&e.actions)
        );
    }
    out
}

pub fn dataset_save(ds: &DemoDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset_to_string(ds)).map_err(|e| Error::io(path, e))
}

/// Fields of one `key=value` line, in order, with every key required.
struct Fields<'a> {
    path: &'a Path,
    line: usize,
    items: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn parse(path: &'a Path, line: usize, text: &'a str) -> Result<Self> {
        let items = text
            .split(' ')
            .map(|tok| {
                tok.split_once('=').ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("expected key=value, found {tok:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { path, line, items })
    }

    fn err(&self, msg: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            line: self.line,
            msg,
        }
    }

    fn expect_keys(&self, keys: &[&str]) -> Result<()> {
        let found: Vec<&str> = self.items.iter().map(|(k, _)| *k).collect();
        if found != keys {
            return Err(self.err(format!("expected fields {keys:?}, found {found:?}")));
        }
        Ok(())
    }

    fn get(&self, key: &str) -> &'a str {
        self.items.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).unwrap_or("")
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| self.err(format!("bad value for {key}: {:?}", self.get(key))))
    }

    fn reals(&self, key: &str, text: &str) -> Result<Vec<f64>> {
        text.split(',')
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| self.err(format!("bad real in {key}: {t:?}")))
            })
            .collect()
    }

    fn vec(&self, key: &str, dim: usize) -> Result<Vec<f64>> {
        let v = self.reals(key, self.get(key))?;
        if v.len() != dim {
            return Err(self.err(format!("{key} has {} entries, expected {dim}", v.len())));
        }
        Ok(v)
    }

    fn rows(&self, key: &str, n: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
        let rows = self
            .get(key)
            .split(';')
            .map(|r| self.reals(key, r))
            .collect::<Result<Vec<_>>>()?;
        if rows.len() != n || rows.iter().any(|r| r.len() != dim) {
            return Err(self.err(format!("{key} is not {n} rows of {dim}")));
        }
        Ok(rows)
    }
}

const HEADER_KEYS: [&str; 12] = [
    "env",
    "seed",
    "mode_policy",
    "episodes",
    "max_steps",
    "dt",
    "tolerance",
    "jitter",
    "obs_min",
    "obs_max",
    "act_min",
    "act_max",
];
const EPISODE_KEYS: [&str; 5] = ["mode", "success", "len", "obs", "act"];

/// Parse `EPDS1` text. Any malformed, missing or extra line is an error.
pub fn dataset_from_str(text: &str, path: &Path) -> Result<DemoDataset> {
    let fmt_err = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    if !text.ends_with('\n') {
        return Err(fmt_err(text.lines().count().max(1), "file does not end with a newline (truncated?)".into()));
    }
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let rest = match header.split_once(' ') {
        Some((DATASET_MAGIC, rest)) => rest,
        _ => {
            let magic = header.split(' ').next().unwrap_or("");
            return Err(fmt_err(1, format!("unsupported format {magic:?}, expected {DATASET_MAGIC}")));
        }
    };
    let h = Fields::parse(path, 1, rest)?;
    h.expect_keys(&HEADER_KEYS)?;
    let name = EnvName::parse(h.get("env")).map_err(|e| h.err(e.to_string()))?;
    let mut env = EnvSpec::by_name(name);
    env.max_steps = h.num("max_steps")?;
    env.dt = h.num("dt")?;
    env.tolerance = h.num("tolerance")?;
    env.expert_jitter = h.num("jitter")?;
    let seed: u64 = h.num("seed")?;
    let mode_policy = ModePolicy::parse(h.get("mode_policy")).map_err(|e| h.err(e.to_string()))?;
    let n: usize = h.num("episodes")?;
    let stats = NormStats {
        obs_min: h.vec("obs_min", env.d_obs)?,
        obs_max: h.vec("obs_max", env.d_obs)?,
        act_min: h.vec("act_min", env.d_action)?,
        act_max: h.vec("act_max", env.d_action)?,
    };

    let mut episodes = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let lno = i + 2;
        if i >= n {
            return Err(fmt_err(lno, format!("more episodes than the {n} declared")));
        }
        let f = Fields::parse(path, lno, line)?;
        f.expect_keys(&EPISODE_KEYS)?;
        let mode_label = match f.get("mode") {
            "-" => None,
            _ => Some(f.num::<usize>("mode")?),
        };
        let success = match f.get("success") {
            "0" => false,
            "1" => true,
            v => return Err(f.err(format!("bad success flag {v:?}"))),
        };
        let len: usize = f.num("len")?;
        if len == 0 {
            return Err(f.err("episode length must be at least 1".into()));
        }
        episodes.push(Episode {
            observations: f.rows("obs", len, env.d_obs)?,
            actions: f.rows("act", len, env.d_action)?,
            mode_label,
            success,
        });
    }
    if episodes.len() != n {
        return Err(fmt_err(
            episodes.len() + 2,
            format!("header declares {n} episodes, file has {} (truncated?)", episodes.len()),
        ));
    }
    let ds = DemoDataset::new(env, seed, mode_policy, episodes).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if ds.norm_stats != stats {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            msg: "stored normalization stats do not match the episodes".into(),
        });
    }
    Ok(ds)
}

pub fn dataset_load(path: impl AsRef<Path>) -> Result<DemoDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DemoDataset {
        generate_dataset(&EnvSpec::forked_paths(), 4, 3, ModePolicy::Balanced).unwrap()
    }

    #[test]
    fn balanced_alternates() {
        let ds = generate_dataset(&EnvSpec::forked_paths(), 200, 7, ModePolicy::Balanced).unwrap();
        assert_eq!(ds.mode_histogram(), vec![100, 100, 0]);
    }

    #[test]
    fn normalize_endpoints_and_inverse() {
        let ds = tiny();
        let s = &ds.norm_stats;
        assert_eq!(s.normalize(&s.obs_min, NormKind::Obs), vec![-1.0, -1.0]);
        assert_eq!(s.normalize(&s.obs_max, NormKind::Obs), vec![1.0, 1.0]);
        let x = ds.episodes[1].actions[3].clone();
        let back = s.denormalize(&s.normalize(&x, NormKind::Action), NormKind::Action);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_dim_normalizes_to_zero() {
        let s = NormStats {
            obs_min: vec![2.0],
            obs_max: vec![2.0],
            act_min: vec![0.0],
            act_max: vec![1.0],
        };
        assert_eq!(s.normalize(&[2.0], NormKind::Obs), vec![0.0]);
        assert_eq!(s.denormalize(&[0.0], NormKind::Obs), vec![2.0]);
    }

    #[test]
    fn window_padding() {
        let ds = tiny();
        let w = make_training_windows(&ds, 2, 16).unwrap();
        assert_eq!(w.len(), ds.total_steps());
        let (o, _) = w.get(0);
        assert_eq!(o.tensor().row(0), o.tensor().row(1));
        let last = ds.episodes[0].len() - 1;
        let (_, c) = w.get(last);
        for t in 1..16 {
            assert_eq!(c.row(t), c.row(0));
        }
    }

    #[test]
    fn text_round_trip_is_byte_identical() {
        let ds = tiny();
        let text = dataset_to_string(&ds);
        let back = dataset_from_str(&text, Path::new("mem")).unwrap();
        assert_eq!(back, ds);
        assert_eq!(dataset_to_string(&back), text);
    }

    #[test]
    fn truncated_text_fails_with_line_number() {
        let text = dataset_to_string(&tiny());
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        match dataset_from_str(&cut, Path::new("mem")) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(dataset_from_str(&text[..text.len() - 10], Path::new("mem")).is_err());
    }

    #[test]
    fn wrong_magic_rejected() {
        let text = dataset_to_string(&tiny()).replacen("EPDS1", "EPDS2", 1);
        assert!(matches!(dataset_from_str(&text, Path::new("mem")), Err(Error::Format { line: 1, .. })));
    }
}
