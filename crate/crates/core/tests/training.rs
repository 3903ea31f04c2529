use energy_policy::data::{dataset_from_str, dataset_load, dataset_save, dataset_to_string, generate_dataset, DemoDataset, ModePolicy};
use energy_policy::env::EnvSpec;
use energy_policy::policy::{EnergyPolicyModel, ObservationWindow, PolicyConfig};
use energy_policy::tensor::Rng;
use energy_policy::train::{checkpoint_load, checkpoint_save, evaluate_success, train, Checkpoint, ModelPolicy, TrainConfig, Trainer};
use energy_policy::Error;

fn small_policy(spec: &EnvSpec) -> PolicyConfig {
    PolicyConfig {
        d_obs: spec.d_obs,
        d_action: spec.d_action,
        pred_horizon: 8,
        exec_horizon: 4,
        d_model: 16,
        heads: 2,
        depth: 1,
        head_width: 16,
        head_depth: 1,
        noise_dim: 4,
        ..Default::default()
    }
}

fn tcfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 64,
        learning_rate: 1e-3,
        ..Default::default()
    }
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|v| v.to_bits()).collect()
}

fn dataset(spec: &EnvSpec, n: usize) -> DemoDataset {
    generate_dataset(spec, n, 3, ModePolicy::Balanced).unwrap()
}

#[test]
fn resume_matches_uninterrupted_training() {
    let spec = EnvSpec::forked_paths();
    let ds = dataset(&spec, 6);
    let model = EnergyPolicyModel::new(small_policy(&spec)).unwrap();

    let mut straight = Trainer::new(model.clone(), &ds, tcfg(10)).unwrap();
    straight.run(|_| Ok(())).unwrap();

    let mut first = Trainer::new(model, &ds, tcfg(5)).unwrap();
    first.run(|_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    checkpoint_save(&first.checkpoint(), &path).unwrap();
    let mut resumed = Trainer::resume(&checkpoint_load(&path).unwrap(), &ds, tcfg(10)).unwrap();
    resumed.run(|_| Ok(())).unwrap();

    assert_eq!(resumed.epoch, 10);
    assert_eq!(bits(&resumed.model.params().flatten()), bits(&straight.model.params().flatten()));
    let curve = |t: &Trainer| t.loss_curve.iter().map(|r| r.mean_loss).collect::<Vec<_>>();
    assert_eq!(bits(&curve(&resumed)), bits(&curve(&straight)));
    assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
}

#[test]
fn end_to_end_pipeline_is_bitwise_reproducible() {
    let run = || {
        let spec = EnvSpec::multi_goal();
        let ds = dataset(&spec, 6);
        let text = dataset_to_string(&ds);
        let out = train(EnergyPolicyModel::new(small_policy(&spec)).unwrap(), &ds, tcfg(2)).unwrap();
        let ck = out.checkpoints.last().unwrap().to_bytes();
        let model = out.model;
        let mut p = ModelPolicy::new(&model, ds.norm_stats.clone());
        let eval = evaluate_success(&mut p, &spec, 4, 17).unwrap();
        let traj: Vec<u64> = eval.results.iter().flat_map(|r| r.trajectory.iter().flatten().map(|v| v.to_bits())).collect();
        (text, ck, traj)
    };
    assert_eq!(run(), run());
}

#[test]
fn dataset_round_trip_is_lossless() {
    for spec in [EnvSpec::forked_paths(), EnvSpec::multi_goal(), EnvSpec::line_reach()] {
        let ds = generate_dataset(&spec, 5, 21, ModePolicy::Random).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.epds");
        dataset_save(&ds, &path).unwrap();
        let back = dataset_load(&path).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.episodes.iter().zip(&ds.episodes) {
            assert_eq!(bits(&a.observations.concat()), bits(&b.observations.concat()));
            assert_eq!(bits(&a.actions.concat()), bits(&b.actions.concat()));
        }
    }
}

#[test]
fn tampered_dataset_stats_are_rejected() {
    let ds = dataset(&EnvSpec::line_reach(), 3);
    let text = dataset_to_string(&ds);
    let line = text.lines().nth(1).unwrap();
    // nudge the first observation of the first episode
    let tampered = text.replacen(line, &line.replacen("obs=0.", "obs=1.", 1), 1);
    assert_ne!(tampered, text);
    let err = dataset_from_str(&tampered, "t.epds".as_ref()).unwrap_err();
    assert!(matches!(err, Error::Corrupt { .. } | Error::Format { .. }), "{err}");
}

#[test]
fn checkpoint_round_trip_preserves_inference() {
    let spec = EnvSpec::forked_paths();
    let ds = dataset(&spec, 4);
    let out = train(EnergyPolicyModel::new(small_policy(&spec)).unwrap(), &ds, tcfg(1)).unwrap();
    let ck = Checkpoint::of_model(&out.model, spec.clone(), ds.norm_stats.clone());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint_save(&ck, &path).unwrap();
    let model = checkpoint_load(&path).unwrap().model().unwrap();
    let w = ObservationWindow::new(&[vec![0.2, -0.9], vec![0.1, -0.8]]).unwrap();
    for seed in 0..10 {
        let a = out.model.predict_chunk(&w, &mut Rng::new(seed)).unwrap();
        let b = model.predict_chunk(&w, &mut Rng::new(seed)).unwrap();
        assert_eq!(bits(a.tensor().data()), bits(b.tensor().data()));
    }
}

#[test]
fn truncated_checkpoint_fails_closed() {
    let spec = EnvSpec::line_reach();
    let model = EnergyPolicyModel::new(small_policy(&spec)).unwrap();
    let ds = dataset(&spec, 2);
    let bytes = Checkpoint::of_model(&model, spec, ds.norm_stats).to_bytes();
    for cut in [0, 5, 13, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut], "c".as_ref()).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }), "cut {cut}: {err}");
    }
}

/// 5-epoch moving average of the training loss, allowing one uptick.
fn assert_smoothed_loss_decreases(curve: &[f64]) {
    let ma: Vec<f64> = curve.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let violations = ma.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(violations <= 1, "moving average {ma:?}");
}

#[test]
fn training_loss_trends_down_on_every_env() {
    for spec in [EnvSpec::forked_paths(), EnvSpec::multi_goal(), EnvSpec::line_reach()] {
        let ds = dataset(&spec, 20);
        let out = train(EnergyPolicyModel::new(small_policy(&spec)).unwrap(), &ds, tcfg(15)).unwrap();
        let curve: Vec<f64> = out.loss_curve.iter().map(|r| r.mean_loss).collect();
        assert!(curve.last() < curve.first(), "{}: {curve:?}", spec.name.as_str());
        assert_smoothed_loss_decreases(&curve);
    }
}
