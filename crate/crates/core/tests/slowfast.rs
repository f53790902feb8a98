mod common;

use slowfast_core::fast::FastConfig;
use slowfast_core::gridworld::ChunkSpec;
use slowfast_core::lora::LoraAdapter;
use slowfast_core::model::Model;
use slowfast_core::slowfast::*;
use slowfast_core::Error;
use slowfast_tensor::{Adam, AdamConfig};

use common::bits;

fn spec() -> ChunkSpec {
    ChunkSpec::new(2, 2).unwrap()
}

fn fast() -> FastConfig {
    FastConfig {
        rank: 2,
        lr: 1e-3,
        steps_per_chunk: 2,
        seed: 9,
        ..Default::default()
    }
}

fn episodes(seed: u64, count: usize, chunks: usize) -> Vec<GtEpisode> {
    random_episodes(&common::small_world(), seed, count, chunks, 2).unwrap()
}

fn factor_bits(a: &LoraAdapter) -> Vec<u32> {
    a.factors.ids().flat_map(|id| bits(a.factors.value(id).data())).collect()
}

fn b_is_zero(a: &LoraAdapter) -> bool {
    a.point_names().iter().all(|p| a.b(p).unwrap().data().iter().all(|&v| v == 0.0))
}

#[test]
fn episodes_have_one_chunk_per_action() {
    let eps = episodes(3, 2, 4);
    for ep in &eps {
        assert_eq!(ep.actions.len(), 4);
        assert_eq!(ep.chunks.len(), 4);
        assert!(ep.chunks.iter().all(|c| c.len() == 2));
        assert_eq!(ep.video().len(), 1 + 4 * 2);
        assert_eq!(ep.input(0).len(), 1);
        assert_eq!(bits(ep.input(2).data()), bits(ep.chunks[1].data()));
    }
    assert_eq!(bits(episodes(3, 2, 4)[1].video().data()), bits(eps[1].video().data()));
}

#[test]
fn ds_counts_layout_and_fresh_theta() {
    let model = common::toy_model(1);
    let hash = model.params.content_hash();
    let dir = tempfile::tempdir().unwrap();
    let eps = episodes(4, 2, 3);
    let ds = build_ds(&model, &eps, spec(), &fast(), InnerMode::GroundTruth, dir.path()).unwrap();
    assert_eq!(ds.len(), 6);
    assert_eq!(model.params.content_hash(), hash);
    for e in 0..2 {
        for i in 0..3 {
            let d = dir.path().join(format!("episode_{e}")).join(format!("iter_{i}"));
            for f in ["x.bin", "y.bin", "theta.bin", "meta.json"] {
                assert!(d.join(f).is_file(), "{}", d.join(f).display());
            }
        }
    }
    let reopened = DsIndex::open(dir.path()).unwrap();
    assert_eq!(reopened.entries, ds.entries);
    for (k, m) in ds.entries.iter().enumerate() {
        let s = ds.load(k).unwrap();
        let ep = &eps[m.episode];
        assert_eq!(s.meta.action, ep.actions[m.iter]);
        assert_eq!(bits(s.x.data()), bits(ep.input(m.iter).data()));
        assert_eq!(bits(s.y.data()), bits(ep.chunks[m.iter].data()));
        assert_eq!(b_is_zero(&s.theta), m.iter == 0, "episode {} iter {}", m.episode, m.iter);
    }
}

#[test]
fn zero_episodes_give_empty_ds() {
    let model = common::toy_model(1);
    let dir = tempfile::tempdir().unwrap();
    let ds = build_ds(&model, &[], spec(), &fast(), InnerMode::GroundTruth, dir.path()).unwrap();
    assert!(ds.is_empty());
    let mut m = model.clone();
    let mut opt = Adam::new(AdamConfig::with_lr(1e-3), &m.params);
    assert!(matches!(outer_update(&mut m, &mut opt, &ds, 2, 2, 0), Err(Error::Empty(_))));
}

#[test]
fn short_episodes_are_skipped() {
    let model = common::toy_model(1);
    let dir = tempfile::tempdir().unwrap();
    let mut eps = episodes(4, 2, 2);
    eps[0].actions.clear();
    eps[0].chunks.clear();
    let ds = build_ds(&model, &eps, spec(), &fast(), InnerMode::GroundTruth, dir.path()).unwrap();
    assert_eq!(ds.len(), 2);
    assert!(ds.entries.iter().all(|m| m.episode == 1));
}

#[test]
fn stored_theta_matches_replay() {
    let model = common::toy_model(2);
    let dir = tempfile::tempdir().unwrap();
    let eps = episodes(5, 2, 3);
    let ds = build_ds(&model, &eps, spec(), &fast(), InnerMode::GroundTruth, dir.path()).unwrap();
    for (k, m) in ds.entries.iter().enumerate() {
        let stored = ds.load(k).unwrap().theta;
        let replayed = replay_theta(&model, &eps[m.episode], m.episode, &fast(), m.iter).unwrap();
        assert_eq!(factor_bits(&stored), factor_bits(&replayed));
    }
}

#[test]
fn generated_mode_records_ground_truth_targets() {
    let model = common::toy_model(2);
    let dir = tempfile::tempdir().unwrap();
    let eps = episodes(5, 1, 3);
    let ds = build_ds(&model, &eps, spec(), &fast(), InnerMode::Generated, dir.path()).unwrap();
    assert_eq!(ds.len(), 3);
    let s = ds.load(2).unwrap();
    assert_eq!(bits(s.y.data()), bits(eps[0].chunks[2].data()));
    let gt = replay_theta(&model, &eps[0], 0, &fast(), 2).unwrap();
    assert_ne!(factor_bits(&s.theta), factor_bits(&gt));
}

fn theta_file_bytes(dir: &std::path::Path) -> Vec<Vec<u8>> {
    let ds = DsIndex::open(dir).unwrap();
    ds.entries
        .iter()
        .map(|m| std::fs::read(dir.join(format!("episode_{}/iter_{}/theta.bin", m.episode, m.iter))).unwrap())
        .collect()
}

#[test]
fn outer_update_moves_phi_only() {
    let mut model = common::toy_model(3);
    let dir = tempfile::tempdir().unwrap();
    let ds = build_ds(&model, &episodes(6, 2, 2), spec(), &fast(), InnerMode::GroundTruth, dir.path()).unwrap();
    let thetas = theta_file_bytes(dir.path());
    let loaded: Vec<Vec<u32>> = (0..ds.len()).map(|k| factor_bits(&ds.load(k).unwrap().theta)).collect();
    let hash = model.params.content_hash();
    let mut opt = Adam::new(AdamConfig::with_lr(1e-3), &model.params);
    let stats = outer_update(&mut model, &mut opt, &ds, 2, 3, 1).unwrap();
    assert_eq!(stats.samples, 4);
    assert_eq!(stats.updates, 2);
    assert!(stats.mean_loss.is_finite() && stats.mean_loss > 0.0);
    assert_ne!(model.params.content_hash(), hash);
    assert_eq!(theta_file_bytes(dir.path()), thetas);
    let after: Vec<Vec<u32>> = (0..ds.len()).map(|k| factor_bits(&ds.load(k).unwrap().theta)).collect();
    assert_eq!(after, loaded);
}

#[test]
fn outer_update_with_zero_lr_keeps_phi() {
    let mut model = common::toy_model(3);
    let dir = tempfile::tempdir().unwrap();
    let ds = build_ds(&model, &episodes(6, 1, 1), spec(), &fast(), InnerMode::GroundTruth, dir.path()).unwrap();
    assert_eq!(ds.len(), 1);
    let hash = model.params.content_hash();
    let mut opt = Adam::new(AdamConfig::with_lr(0.0), &model.params);
    outer_update(&mut model, &mut opt, &ds, 2, 1, 1).unwrap();
    assert_eq!(model.params.content_hash(), hash);
}

#[test]
fn unreadable_samples_are_skipped() {
    let mut model = common::toy_model(3);
    let dir = tempfile::tempdir().unwrap();
    let ds = build_ds(&model, &episodes(6, 1, 2), spec(), &fast(), InnerMode::GroundTruth, dir.path()).unwrap();
    std::fs::write(dir.path().join("episode_0/iter_1/theta.bin"), b"junk").unwrap();
    let mut opt = Adam::new(AdamConfig::with_lr(1e-3), &model.params);
    let stats = outer_update(&mut model, &mut opt, &ds, 2, 1, 1).unwrap();
    assert_eq!(stats.samples, 1);
    assert_eq!(stats.updates, 1);
}

#[test]
fn loop_epochs_and_datasets() {
    let eps = episodes(7, 2, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut model = common::toy_model(4);
    let hash = model.params.content_hash();
    let none = LoopConfig {
        max_epochs: 0,
        ..Default::default()
    };
    let r = run_loop(&mut model, &eps, spec(), &fast(), &none, dir.path()).unwrap();
    assert!(r.epochs.is_empty());
    assert_eq!(r.stop, StopReason::MaxEpochs);
    assert_eq!(model.params.content_hash(), hash);

    let two = LoopConfig {
        max_epochs: 2,
        lr: 1e-3,
        batch: 2,
        ..Default::default()
    };
    let r = run_loop(&mut model, &eps, spec(), &fast(), &two, dir.path()).unwrap();
    assert_eq!(r.epochs.len(), 2);
    assert_eq!(r.stop, StopReason::MaxEpochs);
    assert!(r.epochs.iter().all(|d| d.ds_size == 4));
    assert_ne!(model.params.content_hash(), hash);
    for k in 0..2 {
        let ds = DsIndex::open(&dir.path().join(format!("epoch_{k}"))).unwrap();
        assert_eq!(ds.len(), 4);
        for (j, m) in ds.entries.iter().enumerate() {
            assert_eq!(b_is_zero(&ds.load(j).unwrap().theta), m.iter == 0);
        }
    }
}

#[test]
fn loop_is_deterministic() {
    let eps = episodes(7, 1, 2);
    let cfg = LoopConfig {
        max_epochs: 1,
        lr: 1e-3,
        batch: 2,
        ..Default::default()
    };
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut model = common::toy_model(4);
        let r = run_loop(&mut model, &eps, spec(), &fast(), &cfg, dir.path()).unwrap();
        (model.params.content_hash(), r.epochs[0].outer.mean_loss)
    };
    assert_eq!(run(), run());
}

#[test]
fn stop_reasons() {
    assert_eq!(stop_reason(&[], 0.1), None);
    assert_eq!(stop_reason(&[1.0], 0.1), None);
    assert_eq!(stop_reason(&[1.0, 0.5], 0.1), None);
    assert_eq!(stop_reason(&[1.0, 0.95], 0.1), Some(StopReason::Converged));
    assert_eq!(stop_reason(&[1.0, 0.5], 0.0), None);
    assert_eq!(stop_reason(&[1.0, 1.0], 0.0), None);
    assert_eq!(stop_reason(&[1.0, 2.0, 3.0], 0.0), None);
    assert_eq!(stop_reason(&[1.0, 2.0, 3.0, 4.0], 0.0), Some(StopReason::Diverged));
    assert_eq!(stop_reason(&[5.0, 1.0, 2.0, 3.0, 4.0], 0.0), Some(StopReason::Diverged));
    assert_eq!(stop_reason(&[1.0, 2.0, 1.5, 3.0, 4.0], 0.0), None);
}

#[test]
fn held_out_loss_is_deterministic_and_finite() {
    let model: Model = common::toy_model(5);
    let eps = episodes(8, 2, 2);
    let a = episode_loss(&model, &eps, spec(), &fast(), 2, 3).unwrap();
    let b = episode_loss(&model, &eps, spec(), &fast(), 2, 3).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(a.is_finite() && a > 0.0);
    let off = FastConfig {
        enabled: false,
        ..fast()
    };
    let c = episode_loss(&model, &eps, spec(), &off, 2, 3).unwrap();
    assert_ne!(a.to_bits(), c.to_bits());
    assert!(matches!(episode_loss(&model, &[], spec(), &fast(), 2, 3), Err(Error::Empty(_))));
}
