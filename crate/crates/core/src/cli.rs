//! Command-line front end.
//!
//! Configuration is resolved as defaults ← `--config` TOML file ← flags and
//! the result is written as `config.toml` into every output directory.
//! Exit codes: 0 success, 2 usage or configuration, 3 training failure,
//! 4 unreadable or corrupt artifact.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{dataset_load, dataset_save, generate_dataset, DemoDataset, ModePolicy, DATASET_MAGIC};
use crate::env::{EnvName, EnvSpec};
use crate::error::{Error, Result};
use crate::policy::{AdaLnMode, EnergyPolicyModel, HeadKind, PolicyConfig};
use crate::tensor::NoiseDist;
use crate::train::{
    ablation_run, checkpoint_load, checkpoint_save, latency_bench, loss_curve_csv, mode_coverage, write_results_table,
    write_trajectories_csv, AblationGrid, Checkpoint, EvalSettings, EvalSummary, ModelPolicy, TrainConfig, Trainer,
    CHECKPOINT_MAGIC,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_TRAIN: i32 = 3;
pub const EXIT_CORRUPT: i32 = 4;

/// Everything a run depends on, after merging file and flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub env: EnvName,
    pub episodes: usize,
    pub seed: u64,
    pub mode_policy: ModePolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig {
                env: EnvName::ForkedPaths,
                episodes: 200,
                seed: 0,
                mode_policy: ModePolicy::Balanced,
            },
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // noise_dist is a tagged enum; replace it whole
                    Some(slot) if k != "noise_dist" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl RunConfig {
    /// Defaults overlaid with a (possibly partial) TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, over);
        base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::from_toml(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.train.validate()
    }

    fn echo(&self, dir: &Path) -> Result<()> {
        let p = dir.join("config.toml");
        fs::write(&p, self.to_toml()).map_err(|e| Error::io(p, e))
    }
}

#[derive(Parser, Debug)]
#[command(name = "energy-policy", version, about = "Train and evaluate single-pass energy-score action policies")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate expert demonstrations as an EPDS1 file.
    GenData(GenDataArgs),
    /// Train a policy on a dataset.
    Train(TrainArgs),
    /// Roll out a checkpoint and report its success rate.
    Eval(EvalArgs),
    /// Sample rollouts from the fixed start and count modes.
    Coverage(CoverageArgs),
    /// Time chunk prediction of one or more checkpoints.
    Bench(BenchArgs),
    /// Train and score a grid of head variants.
    Ablate(AblateArgs),
    /// Summarize a checkpoint or dataset file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode_policy: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    noise_dist: Option<String>,
    #[arg(long)]
    adaln_mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Seeds both parameter initialization and training.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    env: Option<String>,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CoverageArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    env: Option<String>,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    ckpts: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Timed predictions averaged inside each repetition.
    #[arg(long, default_value_t = 5)]
    inner: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// `axis=v1,v2`; repeat the flag or separate axes with `;`.
    #[arg(long, required = true)]
    grid: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct InspectArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Coverage(a) => cmd_coverage(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss { .. } => EXIT_TRAIN,
        Error::Format { .. } | Error::Corrupt { .. } | Error::Io { .. } => EXIT_CORRUPT,
        Error::Dimension(_) | Error::Parameter(_) | Error::Contract(_) | Error::Config(_) => EXIT_USAGE,
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn histogram_line(spec: &EnvSpec, counts: &[usize], unclassified: usize) -> String {
    let mut parts: Vec<String> = counts
        .iter()
        .enumerate()
        .map(|(m, c)| format!("{}={c}", spec.mode_name(m)))
        .collect();
    parts.push(format!("unclassified={unclassified}"));
    parts.join(" ")
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut rc = RunConfig::load(a.config.as_deref())?;
    if let Some(e) = &a.env {
        rc.data.env = EnvName::parse(e)?;
    }
    if let Some(n) = a.episodes {
        rc.data.episodes = n;
    }
    if let Some(s) = a.seed {
        rc.data.seed = s;
    }
    if let Some(m) = &a.mode_policy {
        rc.data.mode_policy = ModePolicy::parse(m)?;
    }
    let spec = EnvSpec::by_name(rc.data.env);
    let ds = generate_dataset(&spec, rc.data.episodes, rc.data.seed, rc.data.mode_policy)?;
    dataset_save(&ds, &a.out)?;
    let h = ds.mode_histogram();
    println!("wrote {} episodes ({}) to {}", ds.episodes.len(), spec.name.as_str(), a.out.display());
    println!("modes: {}", histogram_line(&spec, &h[..h.len() - 1], h[h.len() - 1]));
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ds = dataset_load(&a.data)?;
    let mut rc = RunConfig::load(a.config.as_deref())?;
    rc.data.env = ds.env.name;
    rc.data.episodes = ds.episodes.len();
    rc.data.seed = ds.seed;
    rc.data.mode_policy = ds.mode_policy;
    let p = &mut rc.policy;
    if a.config.is_none() {
        p.d_obs = ds.env.d_obs;
        p.d_action = ds.env.d_action;
    }
    if let Some(h) = &a.head {
        p.head_kind = HeadKind::parse(h)?;
    }
    if let Some(al) = a.alpha {
        p.alpha = al;
    }
    if let Some(n) = &a.noise_dist {
        p.noise_dist = NoiseDist::parse(n)?;
    }
    if let Some(m) = &a.adaln_mode {
        p.adaln_mode = AdaLnMode::parse(m)?;
    }
    if let Some(s) = a.seed {
        p.init_seed = s;
        rc.train.seed = s;
    }
    if p.head_kind != HeadKind::Energy && (a.noise_dist.is_some() || a.adaln_mode.is_some()) {
        eprintln!(
            "warning: noise flags are ignored for the deterministic {} head",
            p.head_kind.name()
        );
    }
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        rc.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        rc.train.learning_rate = lr;
    }
    rc.validate()?;
    mkdir(&a.out_dir)?;
    rc.echo(&a.out_dir)?;
    let model = EnergyPolicyModel::new(rc.policy.clone())?;
    println!(
        "training {} head ({} parameters) on {} windows for {} epochs",
        rc.policy.head_kind.name(),
        model.count_params(),
        ds.total_steps(),
        rc.train.epochs
    );
    let mut trainer = Trainer::new(model, &ds, rc.train.clone())?;
    let out = a.out_dir.clone();
    let every = rc.train.checkpoint_every;
    let total = rc.train.epochs;
    let result = trainer.run(|t| {
        let r = t.loss_curve.last().expect("an epoch finished");
        println!("epoch {:>4}  loss {:.6}", r.epoch, r.mean_loss);
        if every > 0 && t.epoch % every == 0 && t.epoch != total {
            checkpoint_save(&t.checkpoint(), out.join(format!("epoch{:04}.ckpt", t.epoch)))?;
        }
        Ok(())
    });
    write(&a.out_dir.join("loss_curve.csv"), &loss_curve_csv(&trainer.loss_curve))?;
    result?;
    checkpoint_save(&trainer.checkpoint(), a.out_dir.join("final.ckpt"))?;
    println!("wrote {}", a.out_dir.join("final.ckpt").display());
    Ok(())
}

/// Load a checkpoint and pick the env: its own, or `--env` if compatible.
fn load_for_eval(ckpt: &Path, env: Option<&str>) -> Result<(Checkpoint, EnergyPolicyModel, EnvSpec)> {
    let ck = checkpoint_load(ckpt)?;
    let model = ck.model()?;
    let spec = match env {
        None => ck.env.clone(),
        Some(name) => {
            let name = EnvName::parse(name)?;
            if name != ck.env.name {
                return Err(Error::Config(format!(
                    "checkpoint was trained on {}, not {}",
                    ck.env.name.as_str(),
                    name.as_str()
                )));
            }
            ck.env.clone()
        }
    };
    Ok((ck, model, spec))
}

fn rollouts_csv(s: &EvalSummary) -> String {
    let mut out = String::from("episode,success,steps,mode,wall_hit,planner_calls\n");
    for (i, r) in s.results.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            u8::from(r.success),
            r.steps_taken,
            r.mode_label.map_or(String::new(), |m| m.to_string()),
            u8::from(r.wall_hit),
            r.planner_calls
        ));
    }
    out
}

fn eval_echo(dir: &Path, ck: &Checkpoint) -> Result<()> {
    let rc = RunConfig {
        data: DataConfig {
            env: ck.env.name,
            episodes: 0,
            seed: 0,
            mode_policy: ModePolicy::Balanced,
        },
        policy: ck.policy.clone(),
        train: ck.train.clone(),
    };
    rc.echo(dir)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (ck, model, spec) = load_for_eval(&a.ckpt, a.env.as_deref())?;
    let mut policy = ModelPolicy::new(&model, ck.norm_stats.clone());
    let s = crate::train::evaluate_success(&mut policy, &spec, a.episodes, a.seed)?;
    let wins = s.results.iter().filter(|r| r.success).count();
    println!(
        "success rate {:.4} ({wins}/{}) on {}; wall hits {}",
        s.success_rate,
        a.episodes,
        spec.name.as_str(),
        s.wall_hits()
    );
    if let Some(dir) = &a.out {
        mkdir(dir)?;
        eval_echo(dir, &ck)?;
        write(&dir.join("rollouts.csv"), &rollouts_csv(&s))?;
        write_trajectories_csv(dir.join("trajectories.csv"), &s.results, &spec)?;
    }
    Ok(())
}

fn cmd_coverage(a: CoverageArgs) -> Result<()> {
    let (ck, model, spec) = load_for_eval(&a.ckpt, a.env.as_deref())?;
    let mut policy = ModelPolicy::new(&model, ck.norm_stats.clone());
    let c = mode_coverage(&mut policy, &spec, a.samples, a.seed)?;
    println!("modes over {} samples: {}", a.samples, histogram_line(&spec, &c.counts, c.unclassified));
    println!("success rate {:.4}", c.summary.success_rate);
    if let Some(dir) = &a.out {
        mkdir(dir)?;
        eval_echo(dir, &ck)?;
        write(&dir.join("rollouts.csv"), &rollouts_csv(&c.summary))?;
        write_trajectories_csv(dir.join("trajectories.csv"), &c.summary.results, &spec)?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let models = a
        .ckpts
        .iter()
        .map(|p| checkpoint_load(p).and_then(|c| c.model()))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = a
        .ckpts
        .iter()
        .zip(&models)
        .map(|(p, m)| format!("{}:{}", p.display(), m.head_kind().name()))
        .collect();
    let entries: Vec<(&str, &EnergyPolicyModel)> = names.iter().map(String::as_str).zip(&models).collect();
    let reports = latency_bench(&entries, a.reps, a.warmup, a.inner)?;
    let mut csv = String::from("policy,mean_ms,std_ms,repetitions,head_evals_per_chunk\n");
    println!("{:<40} {:>10} {:>10} {:>5} {:>10}", "policy", "mean_ms", "std_ms", "reps", "head_evals");
    for r in &reports {
        println!(
            "{:<40} {:>10.3} {:>10.3} {:>5} {:>10}",
            r.name, r.mean_ms, r.std_ms, r.repetitions, r.head_evals_per_chunk
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.name, r.mean_ms, r.std_ms, r.repetitions, r.head_evals_per_chunk
        ));
    }
    if let Some(out) = &a.out {
        write(out, &csv)?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let grid = AblationGrid::parse(&a.grid.join(";"))?;
    let ds = dataset_load(&a.data)?;
    let mut rc = RunConfig::load(a.config.as_deref())?;
    if a.config.is_none() {
        rc.policy.d_obs = ds.env.d_obs;
        rc.policy.d_action = ds.env.d_action;
    }
    rc.data.env = ds.env.name;
    rc.data.episodes = ds.episodes.len();
    rc.data.seed = ds.seed;
    rc.validate()?;
    for cell in grid.cells(&rc.policy) {
        cell.policy.validate()?;
    }
    mkdir(&a.out_dir)?;
    rc.echo(&a.out_dir)?;
    let eval = EvalSettings {
        env: ds.env.clone(),
        samples: a.samples,
        seed: a.seed,
    };
    let rows = ablation_run(&rc.policy, &rc.train, &ds, &grid, &eval)?;
    let path = a.out_dir.join("results.csv");
    write_results_table(&path, &rows)?;
    for r in &rows {
        println!(
            "cell {:>3}  width {:>4}  alpha {:.2}  {:<6}  {:<5}  success {:.3}  modes {:?}",
            r.cell,
            r.head_width,
            r.alpha,
            r.adaln_mode.name(),
            r.noise.short_name(),
            r.success_rate,
            r.mode_counts
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn describe_dataset(ds: &DemoDataset) -> String {
    let h = ds.mode_histogram();
    let s = &ds.norm_stats;
    format!(
        "format {DATASET_MAGIC}\nenv {}\nseed {}\nmode_policy {}\nepisodes {}\nsteps {}\nmodes {}\nobs_min {:?}\nobs_max {:?}\nact_min {:?}\nact_max {:?}\n",
        ds.env.name.as_str(),
        ds.seed,
        ds.mode_policy.as_str(),
        ds.episodes.len(),
        ds.total_steps(),
        histogram_line(&ds.env, &h[..h.len() - 1], h[h.len() - 1]),
        s.obs_min,
        s.obs_max,
        s.act_min,
        s.act_max
    )
}

fn describe_checkpoint(ck: &Checkpoint) -> Result<String> {
    let model = ck.model()?;
    let rc = RunConfig {
        data: DataConfig {
            env: ck.env.name,
            episodes: 0,
            seed: 0,
            mode_policy: ModePolicy::Balanced,
        },
        policy: ck.policy.clone(),
        train: ck.train.clone(),
    };
    Ok(format!(
        "format EPCK1\nenv {}\nepoch {}\nparameters {}\ntensors {}\noptimizer_state {}\nobs_min {:?}\nobs_max {:?}\nact_min {:?}\nact_max {:?}\n\n{}",
        ck.env.name.as_str(),
        ck.epoch,
        model.count_params(),
        ck.layout.len(),
        ck.optimizer.is_some(),
        ck.norm_stats.obs_min,
        ck.norm_stats.obs_max,
        ck.norm_stats.act_min,
        ck.norm_stats.act_max,
        rc.to_toml()
    ))
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let path = a.ckpt.as_ref().or(a.data.as_ref()).expect("clap enforces one of the two");
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = if bytes.starts_with(CHECKPOINT_MAGIC) {
        describe_checkpoint(&Checkpoint::from_bytes(&bytes, path)?)?
    } else if bytes.starts_with(DATASET_MAGIC.as_bytes()) {
        let s = String::from_utf8(bytes).map_err(|_| Error::Corrupt {
            path: path.clone(),
            msg: "dataset is not valid UTF-8".into(),
        })?;
        describe_dataset(&crate::data::dataset_from_str(&s, path)?)
    } else {
        return Err(Error::Corrupt {
            path: path.clone(),
            msg: format!(
                "unknown file type; expected magic {} or {DATASET_MAGIC}",
                std::str::from_utf8(CHECKPOINT_MAGIC).unwrap()
            ),
        });
    };
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_overlays_defaults() {
        let rc = RunConfig::from_toml("[policy]\nalpha = 0.5\nnoise_dist = { kind = \"gaussian\" }\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(rc.policy.alpha, 0.5);
        assert_eq!(rc.policy.noise_dist, NoiseDist::Gaussian);
        assert_eq!(rc.train.epochs, 3);
        assert_eq!(rc.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn echo_round_trips() {
        let rc = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&rc.to_toml()).unwrap(), rc);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("[policy]\nwidth = 3\n"), Err(Error::Config(_))));
    }
}
