mod common;

use std::sync::OnceLock;

use proptest::prelude::*;
use slowfast_core::gridworld::{render_poses, rollout, Action, Heading, Pose, World};
use slowfast_core::planner::*;
use slowfast_core::video::LatentVideo;
use slowfast_core::Error;

fn trained_idm() -> &'static (InverseDynamics, f64) {
    static IDM: OnceLock<(InverseDynamics, f64)> = OnceLock::new();
    IDM.get_or_init(|| {
        // Reduced budget; the default budget reaches 99% and runs in the acceptance suite.
        let cfg = IdmConfig { steps: 2500, samples: 15_000, seed: 1, ..Default::default() };
        let idm = train_idm(&common::small_world(), &cfg).unwrap();
        let held = sample_transitions(&common::small_world(), 2, 700).unwrap();
        let acc = idm.accuracy(&held).unwrap();
        (idm, acc)
    })
}

#[test]
fn distance_examples() {
    let o = Pose::new(0, 0, Heading::N);
    assert_eq!(waypoint_distance(&[o], &[Pose::new(3, 4, Heading::E)]).unwrap(), 5.0);
    let path = [o, Pose::new(1, 0, Heading::N), Pose::new(2, 0, Heading::N)];
    assert_eq!(waypoint_distance(&path, &path[1..]).unwrap(), 0.0);
    assert!(matches!(waypoint_distance(&[], &[o]), Err(Error::Empty(_))));
    assert!(waypoint_distance(&[o], &[]).is_err());
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax_lowest(&[0.1, 0.5, 0.5, 0.2]), 1);
    assert_eq!(argmax_lowest(&[1.0; 7]), 0);
    assert_eq!(argmax_lowest(&[-3.0, -1.0, -2.0]), 1);
}

#[test]
fn idm_learns_held_out_worlds() {
    let (idm, acc) = trained_idm();
    assert!(*acc >= 0.97, "held-out accuracy {acc}");
    let w = common::world(11);
    let p = w.random_start(11).unwrap();
    let f = w.render(p);
    let probs = idm.action_probs(&f, &f).unwrap();
    assert_eq!(probs.len(), 7);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let still = LatentVideo::from_frames(16, 16, [f.as_slice(), f.as_slice(), f.as_slice()]);
    assert_eq!(infer_actions(idm, &still).unwrap(), vec![Action::Noop; 2]);
}

#[test]
fn idm_recovers_unblocked_move_script() {
    let (idm, _) = trained_idm();
    for seed in 0..3 {
        let task = make_plan_task(&common::small_world(), seed, 3, 2).unwrap();
        let w = World::generate(task.world_seed, &task.world).unwrap();
        let mut pose = task.start;
        let mut poses = vec![pose];
        let mut script = Vec::new();
        for sg in &task.subgoals {
            for _ in 0..sg.horizon {
                pose = w.step(pose, sg.action).unwrap();
                poses.push(pose);
                script.push(sg.action);
            }
        }
        let video = render_poses(&w, &poses);
        assert_eq!(infer_actions(idm, &video).unwrap(), script, "seed {seed}");
    }
}

#[test]
fn infer_needs_two_frames() {
    let (idm, _) = trained_idm();
    let one = LatentVideo::zeros(1, 16, 16);
    assert!(matches!(infer_actions(idm, &one), Err(Error::FrameCount { got: 1, expected: 2 })));
    assert_eq!(infer_actions(idm, &LatentVideo::zeros(4, 16, 16)).unwrap().len(), 3);
}

#[test]
fn idm_checkpoint_round_trip() {
    let (idm, _) = trained_idm();
    let back = InverseDynamics::from_checkpoint(&idm.to_checkpoint().unwrap()).unwrap();
    let w = common::world(3);
    let p = w.random_start(3).unwrap();
    let (a, b) = (w.render(p), w.render(w.step(p, Action::TurnRight).unwrap()));
    assert_eq!(idm.action_logits(&a, &b).unwrap(), back.action_logits(&a, &b).unwrap());
}

#[test]
fn perfect_generator_and_decoder_return_exactly() {
    for seed in 0..5 {
        let task = make_plan_task(&common::small_world(), seed, 3, 3).unwrap();
        assert_eq!(task.subgoals.len(), 6);
        let world = World::generate(task.world_seed, &task.world).unwrap();
        let mut gen = EnvGenerator { world: world.clone(), pose: task.start, f_g: 2 };
        let mut dec = OracleDecoder { world, pose: task.start };
        let r = plan_and_execute(&mut gen, &mut dec, &task, PlanOptions::default()).unwrap();
        assert_eq!(r.distance, 0.0, "seed {seed}");
        assert_eq!(r.executed.len(), 18);
        assert_eq!(r.trajectory.len(), 19);
        assert_eq!(*r.trajectory.last().unwrap(), task.start);
        assert!(r.executed.iter().all(|a| a.is_env_action()));
    }
}

#[test]
fn task_waypoints_follow_the_script() {
    let task = make_plan_task(&common::small_world(), 4, 2, 2).unwrap();
    let world = World::generate(task.world_seed, &task.world).unwrap();
    let mut pose = task.start;
    for sg in &task.subgoals {
        pose = *rollout(&world, pose, sg.action, sg.horizon).unwrap().last().unwrap();
        assert_eq!(pose, sg.waypoint);
    }
    let n = task.subgoals.len();
    for i in 0..n / 2 {
        assert_eq!(task.subgoals[n - 1 - i].action, task.subgoals[i].action.inverse());
    }
    assert!(make_plan_task(&common::small_world(), 4, 0, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn distance_matches_double_loop(
        traj in prop::collection::vec((0i32..16, 0i32..16), 1..20),
        wps in prop::collection::vec((0i32..16, 0i32..16), 1..6),
    ) {
        let to = |v: &[(i32, i32)]| v.iter().map(|&(x, y)| Pose::new(x, y, Heading::N)).collect::<Vec<_>>();
        let got = waypoint_distance(&to(&traj), &to(&wps)).unwrap();
        let mut total = 0.0;
        for w in &wps {
            let mut best = f64::MAX;
            for p in &traj {
                let d = (((p.0 - w.0).pow(2) + (p.1 - w.1).pow(2)) as f64).sqrt();
                if d < best { best = d; }
            }
            total += best;
        }
        prop_assert!((got - total / wps.len() as f64).abs() < 1e-12);
    }
}
