use energy_policy::data::*;
use energy_policy::env::*;
use energy_policy::policy::*;
use energy_policy::train::*;
use std::time::Instant;
fn main() {
    let a: Vec<String> = std::env::args().skip(1).collect();
    let env = EnvName::parse(&a[0]).unwrap();
    let head = HeadKind::parse(&a[1]).unwrap();
    let epochs: usize = a[2].parse().unwrap();
    let dm: usize = a[3].parse().unwrap();
    let hw: usize = a[4].parse().unwrap();
    let bs: usize = a[5].parse().unwrap();
    let lr: f64 = a[6].parse().unwrap();
    let h: usize = a.get(7).map(|s| s.parse().unwrap()).unwrap_or(16);
    let adaln = a.get(8).map(|s| AdaLnMode::parse(s).unwrap()).unwrap_or(AdaLnMode::Adaln);
    let noise = a.get(9).map(|s| energy_policy::tensor::NoiseDist::parse(s).unwrap()).unwrap_or(energy_policy::tensor::NoiseDist::U05);
    let alpha: f64 = a.get(10).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let mut spec = EnvSpec::by_name(env);
    if let Ok(j) = std::env::var("TUNE_JITTER") { spec.expert_jitter = j.parse().unwrap(); }
    let ds = generate_dataset(&spec, 200, 7, ModePolicy::Balanced).unwrap();
    let pc = PolicyConfig { d_obs: spec.d_obs, d_action: spec.d_action, d_model: dm, head_width: hw, depth: 2, head_depth: 2, pred_horizon: h, exec_horizon: h/2, head_kind: head, adaln_mode: adaln, noise_dist: noise, alpha, ..Default::default() };
    let m = EnergyPolicyModel::new(pc).unwrap();
    println!("params {} windows {}", m.count_params(), ds.total_steps());
    let tc = TrainConfig { epochs, batch_size: bs, learning_rate: lr, ..Default::default() };
    let mut t = Trainer::new(m, &ds, tc).unwrap();
    let t0 = Instant::now();
    t.run(|t| { let r = t.loss_curve.last().unwrap(); if r.epoch % 5 == 0 || r.epoch == 1 { println!("epoch {} loss {:.4} t={:.1}s", r.epoch, r.mean_loss, t0.elapsed().as_secs_f64()); } Ok(()) }).unwrap();
    let mut p = ModelPolicy::new(&t.model, ds.norm_stats.clone());
    let c = mode_coverage(&mut p, &spec, 50, 1000).unwrap();
    println!("coverage {:?} uncl {} success {} wall {}", c.counts, c.unclassified, c.summary.success_rate, c.summary.wall_hits());
    for r in c.summary.results.iter().filter(|r| !r.success) {
        println!("  fail steps {} wall {} end {:?}", r.steps_taken, r.wall_hit, r.trajectory.last().unwrap());
    }
    if head == HeadKind::Energy {
        let rows: Vec<Vec<f64>> = vec![spec.start.clone(); pc_obs_h(&t.model)];
        let w = ObservationWindow::new(&rows.iter().map(|r| ds.norm_stats.normalize(r, NormKind::Obs)).collect::<Vec<_>>()).unwrap();
        let sp = sample_spread(&t.model, &w, 100, &mut energy_policy::tensor::Rng::new(5)).unwrap();
        println!("spread at start {:?}", sp);
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}

fn pc_obs_h(m: &EnergyPolicyModel) -> usize { m.config().obs_horizon }
