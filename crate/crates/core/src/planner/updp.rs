use rand::Rng;
use serde::{Deserialize, Serialize};

use super::idm::InverseDynamics;
use crate::error::{Error, Result};
use crate::fast::FastSession;
use crate::gridworld::{render_poses, rollout, Action, Pose, World, WorldConfig};
use crate::rng::{self, tags};
use crate::video::LatentVideo;

/// Produces the next chunk of imagined frames for an action.
pub trait ChunkGenerator {
    fn generate(&mut self, action: Action) -> Result<LatentVideo>;
    /// Replaces the latest chunk with what the environment actually showed;
    /// `pose` is where the agent ended up.
    fn observe(&mut self, observed: &LatentVideo, pose: Pose) -> Result<()>;
    /// Learns from the latest (possibly observed) chunk.
    fn learn(&mut self) -> Result<()>;
}

impl ChunkGenerator for FastSession {
    fn generate(&mut self, action: Action) -> Result<LatentVideo> {
        self.generate_step(action)
    }

    fn observe(&mut self, observed: &LatentVideo, _pose: Pose) -> Result<()> {
        FastSession::observe(self, observed.clone())
    }

    fn learn(&mut self) -> Result<()> {
        self.update_templora().map(|_| ())
    }
}

/// Renders the true future from the environment.
pub struct EnvGenerator {
    pub world: World,
    pub pose: Pose,
    pub f_g: usize,
}

impl ChunkGenerator for EnvGenerator {
    fn generate(&mut self, action: Action) -> Result<LatentVideo> {
        let poses = rollout(&self.world, self.pose, action, self.f_g)?;
        self.pose = *poses.last().expect("f_g > 0");
        Ok(render_poses(&self.world, &poses))
    }

    fn observe(&mut self, _observed: &LatentVideo, pose: Pose) -> Result<()> {
        self.pose = pose;
        Ok(())
    }

    fn learn(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Recovers executable actions from imagined frames.
pub trait ActionDecoder {
    /// One action per frame of `chunk`, starting from frame `prev`.
    fn decode(&mut self, prev: &[f32], chunk: &LatentVideo) -> Result<Vec<Action>>;
    fn sync(&mut self, _pose: Pose) {}
}

impl ActionDecoder for InverseDynamics {
    fn decode(&mut self, prev: &[f32], chunk: &LatentVideo) -> Result<Vec<Action>> {
        let mut last = prev;
        let mut out = Vec::with_capacity(chunk.len());
        for f in chunk.frames() {
            out.push(self.predict(last, f)?);
            last = f;
        }
        Ok(out)
    }
}

/// Ground-truth inverse dynamics: simulates every action from the current
/// pose and keeps the one whose rendering is closest to the next frame
/// (exact matches win, ties go to the lowest id).
pub struct OracleDecoder {
    pub world: World,
    pub pose: Pose,
}

impl ActionDecoder for OracleDecoder {
    fn decode(&mut self, _prev: &[f32], chunk: &LatentVideo) -> Result<Vec<Action>> {
        let mut out = Vec::with_capacity(chunk.len());
        for f in chunk.frames() {
            let mut best = (f64::INFINITY, Action::Noop, self.pose);
            for a in Action::ENV {
                let p = self.world.step(self.pose, a)?;
                let d: f64 = self
                    .world
                    .render(p)
                    .iter()
                    .zip(f)
                    .map(|(x, y)| ((x - y) as f64).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, a, p);
                }
            }
            out.push(best.1);
            self.pose = best.2;
        }
        Ok(out)
    }

    fn sync(&mut self, pose: Pose) {
        self.pose = pose;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subgoal {
    pub action: Action,
    /// Frames to execute for this subgoal.
    pub horizon: usize,
    pub waypoint: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanTask {
    pub world_seed: u64,
    pub world: WorldConfig,
    pub start: Pose,
    pub subgoals: Vec<Subgoal>,
}

/// An outbound path of random unblocked moves followed by retracing it back
/// to the start. Waypoints are where the scripted actions take the agent, so
/// the last one is the start itself.
pub fn make_plan_task(world: &WorldConfig, seed: u64, legs: usize, horizon: usize) -> Result<PlanTask> {
    const MOVES: [Action; 4] = [
        Action::MoveForward,
        Action::MoveBackward,
        Action::StrafeLeft,
        Action::StrafeRight,
    ];
    if legs == 0 || horizon == 0 {
        return Err(Error::Config("plan needs at least one leg and a positive horizon".into()));
    }
    for attempt in 0..64u64 {
        let ws = rng::derive(seed, &[tags::BENCH, 7, attempt]);
        let w = World::generate(ws, world)?;
        let start = w.random_start(ws)?;
        let mut r = rng::stream(seed, &[tags::BENCH, 8, attempt]);
        let mut pose = start;
        let mut out = Vec::with_capacity(legs);
        for _ in 0..legs {
            let mut order = MOVES;
            order.rotate_left(r.random_range(0..MOVES.len()));
            let clear = order.into_iter().find_map(|a| {
                let poses = rollout(&w, pose, a, horizon).ok()?;
                let moved = poses.iter().try_fold(pose, |prev, &p| (p != prev).then_some(p));
                moved.map(|end| (a, end))
            });
            match clear {
                Some((a, end)) => {
                    out.push(a);
                    pose = end;
                }
                None => break,
            }
        }
        if out.len() < legs {
            continue;
        }
        let script = out.iter().copied().chain(out.iter().rev().map(|a| a.inverse()));
        let mut pose = start;
        let mut subgoals = Vec::new();
        for action in script {
            pose = *rollout(&w, pose, action, horizon)?.last().expect("horizon > 0");
            subgoals.push(Subgoal {
                action,
                horizon,
                waypoint: pose,
            });
        }
        return Ok(PlanTask {
            world_seed: ws,
            world: world.clone(),
            start,
            subgoals,
        });
    }
    Err(Error::WorldTooSmall(format!(
        "no world for seed {seed} admits {legs} clear legs of {horizon} cells"
    )))
}

/// Mean over waypoints of the closest approach of the trajectory.
pub fn waypoint_distance(trajectory: &[Pose], waypoints: &[Pose]) -> Result<f64> {
    if trajectory.is_empty() || waypoints.is_empty() {
        return Err(Error::Empty("trajectory or waypoints"));
    }
    Ok(waypoints
        .iter()
        .map(|w| trajectory.iter().map(|p| p.distance(w)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / waypoints.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanOptions {
    /// Condition on observed frames rather than imagined ones.
    pub closed_loop: bool,
    pub learn: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            closed_loop: true,
            learn: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanReport {
    pub task: PlanTask,
    pub options: PlanOptions,
    pub trajectory: Vec<Pose>,
    pub executed: Vec<Action>,
    pub waypoints: Vec<Pose>,
    pub distance: f64,
    #[serde(skip)]
    pub observed: Option<LatentVideo>,
}

/// Imagines each subgoal, decodes actions from the imagined frames, runs
/// them in the environment and feeds the observations back.
pub fn plan_and_execute(
    generator: &mut dyn ChunkGenerator,
    decoder: &mut dyn ActionDecoder,
    task: &PlanTask,
    options: PlanOptions,
) -> Result<PlanReport> {
    let world = World::generate(task.world_seed, &task.world)?;
    let mut pose = task.start;
    let mut trajectory = vec![pose];
    let mut executed = Vec::new();
    let mut observed = render_poses(&world, &[pose]);
    decoder.sync(pose);
    let mut prev = observed.frame(0).to_vec();
    for sg in &task.subgoals {
        let mut remaining = sg.horizon;
        while remaining > 0 {
            let chunk = generator.generate(sg.action)?;
            let actions = decoder.decode(&prev, &chunk)?;
            if actions.is_empty() {
                return Err(Error::Empty("decoder returned no actions"));
            }
            let mut seen = LatentVideo::empty(observed.height(), observed.width());
            for &a in actions.iter().take(remaining) {
                pose = world.step(pose, a)?;
                trajectory.push(pose);
                executed.push(a);
                seen.push_frame(&world.render(pose));
            }
            observed.append(&seen);
            remaining -= seen.len();
            // A partial final chunk is padded with the last observation.
            while seen.len() < chunk.len() {
                seen.push_frame(&world.render(pose));
            }
            if options.closed_loop {
                generator.observe(&seen, pose)?;
                decoder.sync(pose);
                prev = seen.frame(seen.len() - 1).to_vec();
            } else {
                prev = chunk.frame(chunk.len() - 1).to_vec();
            }
            if options.learn {
                generator.learn()?;
            }
        }
    }
    let waypoints: Vec<Pose> = task.subgoals.iter().map(|s| s.waypoint).collect();
    let distance = waypoint_distance(&trajectory, &waypoints)?;
    Ok(PlanReport {
        task: task.clone(),
        options,
        trajectory,
        executed,
        waypoints,
        distance,
        observed: Some(observed),
    })
}
