use std::fmt::Write as _;
use std::path::Path;

use super::eval::{mode_coverage, sample_spread, ModelPolicy};
use super::{train, TrainConfig};
use crate::data::{fmt_real, thread_budget, DemoDataset, NormKind};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::policy::{AdaLnMode, EnergyPolicyModel, ObservationWindow, PolicyConfig};
use crate::tensor::{NoiseDist, Rng};

#[derive(Clone, Debug, PartialEq)]
pub enum AblationAxis {
    HeadWidth(Vec<usize>),
    Alpha(Vec<f64>),
    AdaLn(Vec<AdaLnMode>),
    Noise(Vec<NoiseDist>),
}

impl AblationAxis {
    fn len(&self) -> usize {
        match self {
            Self::HeadWidth(v) => v.len(),
            Self::Alpha(v) => v.len(),
            Self::AdaLn(v) => v.len(),
            Self::Noise(v) => v.len(),
        }
    }

    fn apply(&self, i: usize, cfg: &mut PolicyConfig) {
        match self {
            Self::HeadWidth(v) => cfg.head_width = v[i],
            Self::Alpha(v) => cfg.alpha = v[i],
            Self::AdaLn(v) => cfg.adaln_mode = v[i],
            Self::Noise(v) => cfg.noise_dist = v[i],
        }
    }
}

/// Cartesian product of axes. Text form: `axis=v1,v2;axis=v1,…` with axes
/// `head_width`, `alpha`, `adaln`, `noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub axes: Vec<AblationAxis>,
}

fn list<T>(name: &str, values: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let out = values
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| f(s.trim()))
        .collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        return Err(Error::param(format!("axis {name} has no values")));
    }
    Ok(out)
}

impl AblationGrid {
    pub fn parse(spec: &str) -> Result<Self> {
        let mut axes = Vec::new();
        for part in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, values) = part
                .split_once('=')
                .ok_or_else(|| Error::param(format!("grid axis {part:?} is not name=v1,v2,…")))?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::param(format!("bad number {s:?}")));
            let axis = match name.trim() {
                "head_width" | "width" => AblationAxis::HeadWidth(list(name, values, |s| {
                    s.parse().map_err(|_| Error::param(format!("bad width {s:?}")))
                })?),
                "alpha" => AblationAxis::Alpha(list(name, values, num)?),
                "adaln" | "adaln_mode" => AblationAxis::AdaLn(list(name, values, AdaLnMode::parse)?),
                "noise" | "noise_dist" => AblationAxis::Noise(list(name, values, NoiseDist::parse)?),
                other => {
                    return Err(Error::param(format!(
                        "unknown grid axis {other:?} (head_width, alpha, adaln, noise)"
                    )))
                }
            };
            axes.push(axis);
        }
        if axes.is_empty() {
            return Err(Error::param("the ablation grid is empty"));
        }
        Ok(Self { axes })
    }

    /// Every cell of the product, last axis varying fastest.
    pub fn cells(&self, base: &PolicyConfig) -> Vec<AblationCell> {
        let sizes: Vec<usize> = self.axes.iter().map(AblationAxis::len).collect();
        let total: usize = sizes.iter().product();
        (0..total)
            .map(|mut flat| {
                let mut cfg = base.clone();
                let mut idx = vec![0; sizes.len()];
                for a in (0..sizes.len()).rev() {
                    idx[a] = flat % sizes[a];
                    flat /= sizes[a];
                }
                for (axis, &i) in self.axes.iter().zip(&idx) {
                    axis.apply(i, &mut cfg);
                }
                AblationCell { policy: cfg }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub policy: PolicyConfig,
}

/// How each trained cell is scored.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub env: EnvSpec,
    /// Rollouts from the fixed start; success and coverage share them.
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: usize,
    pub head_width: usize,
    pub alpha: f64,
    pub adaln_mode: AdaLnMode,
    pub noise: NoiseDist,
    pub success_rate: f64,
    pub mode_counts: Vec<usize>,
    pub unclassified: usize,
    /// Per-dim spread of the first action at the start state.
    pub spread: Vec<f64>,
    pub final_loss: f64,
}

fn run_cell(
    i: usize,
    cell: &AblationCell,
    train_cfg: &TrainConfig,
    dataset: &DemoDataset,
    eval: &EvalSettings,
) -> Result<AblationRow> {
    let model = EnergyPolicyModel::new(cell.policy.clone())?;
    let out = train(model, dataset, train_cfg.clone())?;
    let mut policy = ModelPolicy::new(&out.model, dataset.norm_stats.clone());
    let cov = mode_coverage(&mut policy, &eval.env, eval.samples, eval.seed)?;
    let start = dataset.norm_stats.normalize(&eval.env.start, NormKind::Obs);
    let window = ObservationWindow::new(&vec![start; cell.policy.obs_horizon])?;
    let spread = sample_spread(&out.model, &window, eval.samples.max(2), &mut Rng::new(eval.seed))?;
    let p = &cell.policy;
    Ok(AblationRow {
        cell: i,
        head_width: p.head_width,
        alpha: p.alpha,
        adaln_mode: p.adaln_mode,
        noise: p.noise_dist,
        success_rate: cov.summary.success_rate,
        mode_counts: cov.counts,
        unclassified: cov.unclassified,
        spread,
        final_loss: out.loss_curve.last().map_or(f64::NAN, |r| r.mean_loss),
    })
}

/// Train and score every cell with the same training seed. Cells run on up
/// to `ENERGY_POLICY_THREADS` threads; rows come back in cell order.
pub fn ablation_run(
    base: &PolicyConfig,
    train_cfg: &TrainConfig,
    dataset: &DemoDataset,
    grid: &AblationGrid,
    eval: &EvalSettings,
) -> Result<Vec<AblationRow>> {
    let cells = grid.cells(base);
    let threads = thread_budget().min(cells.len());
    let mut slots: Vec<Option<Result<AblationRow>>> = (0..cells.len()).map(|_| None).collect();
    if threads <= 1 {
        for (i, c) in cells.iter().enumerate() {
            slots[i] = Some(run_cell(i, c, train_cfg, dataset, eval));
        }
    } else {
        let done: Vec<Vec<(usize, Result<AblationRow>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let cells = &cells;
                    s.spawn(move || {
                        (t..cells.len())
                            .step_by(threads)
                            .map(|i| (i, run_cell(i, &cells[i], train_cfg, dataset, eval)))
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("ablation thread panicked")).collect()
        });
        for (i, r) in done.into_iter().flatten() {
            slots[i] = Some(r);
        }
    }
    slots.into_iter().map(|r| r.expect("every cell ran")).collect()
}

const TABLE_HEADER: &str = "cell,head_width,alpha,adaln_mode,noise,success_rate,mode_counts,unclassified,spread,final_loss";

fn join<T>(v: &[T], f: impl Fn(&T) -> String) -> String {
    v.iter().map(f).collect::<Vec<_>>().join("|")
}

pub fn results_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.cell,
            r.head_width,
            fmt_real(r.alpha),
            r.adaln_mode.name(),
            r.noise.short_name(),
            fmt_real(r.success_rate),
            join(&r.mode_counts, |c| c.to_string()),
            r.unclassified,
            join(&r.spread, |v| fmt_real(*v)),
            fmt_real(r.final_loss),
        );
    }
    s
}

pub fn write_results_table(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, results_table(rows)).map_err(|e| Error::io(path, e))
}

pub fn parse_results_table(text: &str, path: &Path) -> Result<Vec<AblationRow>> {
    let err = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some(TABLE_HEADER) {
        return Err(err(1, format!("expected header {TABLE_HEADER:?}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let lno = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(err(lno, format!("expected 10 columns, found {}", f.len())));
            }
            let bad = |c: &str| err(lno, format!("bad value in column {c}"));
            let real = |s: &str, c: &str| s.parse::<f64>().map_err(|_| bad(c));
            let int = |s: &str, c: &str| s.parse::<usize>().map_err(|_| bad(c));
            Ok(AblationRow {
                cell: int(f[0], "cell")?,
                head_width: int(f[1], "head_width")?,
                alpha: real(f[2], "alpha")?,
                adaln_mode: AdaLnMode::parse(f[3]).map_err(|_| bad("adaln_mode"))?,
                noise: NoiseDist::parse(f[4]).map_err(|_| bad("noise"))?,
                success_rate: real(f[5], "success_rate")?,
                mode_counts: f[6].split('|').map(|s| int(s, "mode_counts")).collect::<Result<_>>()?,
                unclassified: int(f[7], "unclassified")?,
                spread: f[8].split('|').map(|s| real(s, "spread")).collect::<Result<_>>()?,
                final_loss: real(f[9], "final_loss")?,
            })
        })
        .collect()
}

pub fn read_results_table(path: impl AsRef<Path>) -> Result<Vec<AblationRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results_table(&text, path)
}
