mod common;

use slowfast_core::gridworld::{make_dataset, Action, Dataset, DatasetConfig};
use slowfast_core::persist::Checkpoint;
use slowfast_core::slow::*;
use slowfast_core::Error;
use slowfast_tensor::Tensor;

fn dataset(seed: u64) -> Dataset {
    make_dataset(&DatasetConfig { seed, episodes: 3, world: common::small_world(), ..Default::default() }).unwrap()
}

fn cfg(steps: u64, seed: u64) -> SlowConfig {
    SlowConfig { lr: 1e-3, batch_size: 2, steps, seed, log_every: 2, ..Default::default() }
}

#[test]
fn zero_steps_leave_params_unchanged() {
    let ds = dataset(0);
    let model = common::toy_model(0);
    let before = model.params.content_hash();
    let (m, curve) = train_slow(model, &ds, cfg(0, 1)).unwrap();
    assert_eq!(m.params.content_hash(), before);
    assert!(curve.is_empty());
}

#[test]
fn training_is_deterministic_per_seed() {
    let ds = dataset(1);
    let run = |seed| {
        let mut t = SlowTrainer::new(common::toy_model(2), &ds, cfg(4, seed)).unwrap();
        t.run(|_| Ok(())).unwrap();
        (t.losses().to_vec(), t.checkpoint().unwrap().to_bytes().unwrap())
    };
    let (la, ca) = run(3);
    let (lb, cb) = run(3);
    let (lc, _) = run(4);
    assert_eq!(la, lb);
    assert_eq!(ca, cb);
    assert_ne!(la, lc);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let ds = dataset(2);
    let mut full = SlowTrainer::new(common::toy_model(5), &ds, cfg(6, 7)).unwrap();
    full.run(|_| Ok(())).unwrap();

    let mut half = SlowTrainer::new(common::toy_model(5), &ds, cfg(6, 7)).unwrap();
    for _ in 0..3 {
        half.train_step().unwrap();
    }
    let bytes = half.checkpoint().unwrap().to_bytes().unwrap();
    drop(half);
    let mut resumed = SlowTrainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), &ds).unwrap();
    assert_eq!(resumed.step(), 3);
    resumed.run(|_| Ok(())).unwrap();
    assert_eq!(resumed.losses(), full.losses());
    assert_eq!(resumed.checkpoint().unwrap().to_bytes().unwrap(), full.checkpoint().unwrap().to_bytes().unwrap());
}

#[test]
fn initial_loss_is_near_one() {
    let ds = dataset(3);
    let mut total = 0.0;
    for seed in 0..8 {
        let mut t = SlowTrainer::new(common::toy_model(seed), &ds, SlowConfig { batch_size: 4, ..cfg(1, seed) }).unwrap();
        total += t.train_step().unwrap() as f64;
    }
    let mean = total / 8.0;
    assert!((mean - 1.0).abs() < 0.15, "mean initial loss {mean}");
}

#[test]
fn nan_loss_aborts_with_step_and_samples() {
    let ds = dataset(4);
    let mut model = common::toy_model(1);
    let id = model.params.id("out.conv.b").unwrap();
    *model.params.value_mut(id) = Tensor::new(&[3], vec![f32::NAN; 3]).unwrap();
    let mut t = SlowTrainer::new(model, &ds, cfg(3, 0)).unwrap();
    match t.train_step() {
        Err(Error::NonFiniteLoss { step: 0, samples }) => {
            assert_eq!(samples.len(), 2);
            assert!(samples.iter().all(|&i| i < ds.len()));
        }
        other => panic!("{other:?}"),
    }
}

/// Which rows of the action table moved during training.
fn moved_action_rows(p_uncond: f64) -> Vec<bool> {
    let ds = dataset(6);
    let model = common::toy_model(0);
    let before = model.params.get("action.table").unwrap().clone();
    let (m, _) = train_slow(model, &ds, SlowConfig { p_uncond, ..cfg(4, 2) }).unwrap();
    let after = m.params.get("action.table").unwrap();
    let e = before.shape()[1];
    (0..before.shape()[0])
        .map(|i| before.data()[i * e..(i + 1) * e] != after.data()[i * e..(i + 1) * e])
        .collect()
}

#[test]
fn unconditional_batches_use_only_the_null_action() {
    let null = Action::Null.id();
    let all = moved_action_rows(1.0);
    assert!(all[null]);
    assert!(all.iter().enumerate().all(|(i, &m)| m == (i == null)));
    let none = moved_action_rows(0.0);
    assert!(!none[null]);
    assert!(none.iter().any(|&m| m));
}

#[test]
fn config_is_validated() {
    let ds = dataset(5);
    for bad in [
        SlowConfig { batch_size: 0, ..cfg(1, 0) },
        SlowConfig { lr: 0.0, ..cfg(1, 0) },
        SlowConfig { f_p_choices: vec![], ..cfg(1, 0) },
        SlowConfig { f_p_choices: vec![40], ..cfg(1, 0) },
        SlowConfig { p_uncond: 1.5, ..cfg(1, 0) },
    ] {
        assert!(matches!(SlowTrainer::new(common::toy_model(0), &ds, bad), Err(Error::Config(_))));
    }
}

#[test]
fn loss_curve_csv() {
    let ds = dataset(6);
    let (_, curve) = train_slow(common::toy_model(0), &ds, cfg(4, 0)).unwrap();
    assert_eq!(curve.iter().map(|p| p.step).collect::<Vec<_>>(), vec![0, 2, 4]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    write_loss_csv(&path, &curve).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 4);
    let (step, loss) = lines[2].split_once(',').unwrap();
    assert_eq!(step, "2");
    assert!((loss.parse::<f64>().unwrap() - curve[1].loss).abs() < 1e-6);
}

#[test]
fn untrained_generation_has_no_skill() {
    let held = dataset(9);
    let r = eval_validation(&common::toy_model(0), &held, 2, 4, 0).unwrap();
    assert_eq!(r.samples, 4);
    // Saturated noise: no better than the constant frame, no structure.
    assert!(r.psnr <= r.baseline_psnr, "{r:?}");
    assert!(r.ssim < 0.05, "{r:?}");
    assert!(r.copy_last_psnr > r.baseline_psnr);
    assert!(eval_validation(&common::toy_model(0), &held, 40, 4, 0).is_err());
}
