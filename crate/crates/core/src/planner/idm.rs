use rand::Rng;
use serde::{Deserialize, Serialize};
use slowfast_tensor::{Adam, AdamConfig, Bound, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::gridworld::{Action, World, WorldConfig, NUM_ENV_ACTIONS};
use crate::lora::dense;
use crate::persist::Checkpoint;
use crate::rng::{self, tags};
use crate::video::LatentVideo;

pub const IDM_ROLE: &str = "idm";

/// A frame pair with the action that links them.
#[derive(Clone, Debug)]
pub struct Transition {
    pub before: Vec<f32>,
    pub after: Vec<f32>,
    pub action: Action,
}

/// Label for an observed transition: identical frames mean nothing visible
/// happened, which covers blocked moves as well as `noop`.
pub fn canonical_label(before: &[f32], after: &[f32], action: Action) -> Action {
    if before == after {
        Action::Noop
    } else {
        action
    }
}

/// Uniformly drawn environment transitions in fresh worlds, canonically labelled.
pub fn sample_transitions(config: &WorldConfig, seed: u64, count: usize) -> Result<Vec<Transition>> {
    let mut out = Vec::with_capacity(count);
    let mut world_idx = 0u64;
    while out.len() < count {
        let ws = rng::derive(seed, &[tags::IDM, world_idx]);
        let world = World::generate(ws, config)?;
        let mut r = rng::stream(ws, &[tags::WALK]);
        let cells = world.free_cells();
        for _ in 0..(count - out.len()).min(200) {
            let (x, y) = cells[r.random_range(0..cells.len())];
            let pose = crate::gridworld::Pose::new(x, y, crate::gridworld::Heading::ALL[r.random_range(0..4)]);
            let action = Action::ENV[r.random_range(0..NUM_ENV_ACTIONS)];
            let before = world.render(pose);
            let after = world.render(world.step(pose, action)?);
            let action = canonical_label(&before, &after, action);
            out.push(Transition { before, after, action });
        }
        world_idx += 1;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdmConfig {
    pub channels: usize,
    pub hidden: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Transitions drawn for [`train_idm`].
    pub samples: usize,
    pub seed: u64,
}

impl Default for IdmConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            hidden: 64,
            lr: 2e-3,
            steps: 6000,
            batch: 64,
            samples: 40_000,
            seed: 0,
        }
    }
}

/// Classifies the action between two frames: two strided convolutions over
/// `(a, b, b - a)` then a two-layer head over the seven environment actions.
#[derive(Clone, Debug)]
pub struct InverseDynamics {
    pub frame_size: usize,
    pub channels: usize,
    pub params: ParamStore<f32>,
}

impl InverseDynamics {
    pub fn new(frame_size: usize, config: &IdmConfig) -> Result<Self> {
        if frame_size % 4 != 0 || frame_size == 0 {
            return Err(Error::Config(format!("IDM frame size {frame_size} must be a multiple of 4")));
        }
        let c = config.channels;
        let flat = 2 * c * (frame_size / 4).pow(2);
        let specs: [(&str, Vec<usize>, usize); 8] = [
            ("c1.w", vec![c, 9, 3, 3], 81),
            ("c1.b", vec![c], 0),
            ("c2.w", vec![2 * c, c, 3, 3], c * 9),
            ("c2.b", vec![2 * c], 0),
            ("fc1.w", vec![config.hidden, flat], flat),
            ("fc1.b", vec![config.hidden], 0),
            ("fc2.w", vec![NUM_ENV_ACTIONS, config.hidden], config.hidden),
            ("fc2.b", vec![NUM_ENV_ACTIONS], 0),
        ];
        let mut params = ParamStore::new();
        for (i, (name, shape, fan)) in specs.into_iter().enumerate() {
            let t = if fan == 0 {
                Tensor::zeros(&shape)
            } else {
                let mut r = rng::stream(config.seed, &[tags::IDM, 1, i as u64]);
                rng::uniform(&mut r, &shape, (3.0 / fan as f64).sqrt())
            };
            params.insert(name, t)?;
        }
        Ok(Self {
            frame_size,
            channels: c,
            params,
        })
    }

    fn logits(&self, tape: &mut Tape<f32>, p: &Bound, pairs: &[(&[f32], &[f32])]) -> Result<Var> {
        let s = self.frame_size;
        let plane = 3 * s * s;
        let mut data = Vec::with_capacity(pairs.len() * 3 * plane);
        for (a, b) in pairs {
            if a.len() != plane || b.len() != plane {
                return Err(Error::Config(format!("IDM expects {s}x{s} RGB frames")));
            }
            data.extend_from_slice(a);
            data.extend_from_slice(b);
            data.extend(a.iter().zip(*b).map(|(x, y)| y - x));
        }
        let x = tape.constant(Tensor::new(&[pairs.len(), 9, s, s], data)?);
        let h = tape.conv2d(x, p.get("c1.w")?, p.get("c1.b")?, 2, 1)?;
        let h = tape.silu(h)?;
        let h = tape.conv2d(h, p.get("c2.w")?, p.get("c2.b")?, 2, 1)?;
        let h = tape.silu(h)?;
        let n = tape.shape(h)[1..].iter().product();
        let h = tape.reshape(h, &[pairs.len(), n])?;
        let h = dense(tape, p, None, "fc1", h)?;
        let h = tape.silu(h)?;
        dense(tape, p, None, "fc2", h)
    }

    pub fn action_logits(&self, before: &[f32], after: &[f32]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &self.params);
        let l = self.logits(&mut tape, &p, &[(before, after)])?;
        Ok(tape.value(l).data().to_vec())
    }

    /// Softmax over the environment actions.
    pub fn action_probs(&self, before: &[f32], after: &[f32]) -> Result<Vec<f64>> {
        let logits = self.action_logits(before, after)?;
        let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - m).exp()).collect();
        let z: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / z).collect())
    }

    /// Arg-max action; ties go to the lowest id.
    pub fn predict(&self, before: &[f32], after: &[f32]) -> Result<Action> {
        let logits = self.action_logits(before, after)?;
        Ok(Action::ENV[argmax_lowest(&logits)])
    }

    pub fn train(&mut self, data: &[Transition], config: &IdmConfig) -> Result<Vec<f32>> {
        if data.is_empty() {
            return Err(Error::Empty("IDM training data"));
        }
        self.params.set_trainable(true);
        let mut opt = Adam::new(AdamConfig::with_lr(config.lr), &self.params);
        let mut trace = Vec::with_capacity(config.steps);
        for step in 0..config.steps {
            let mut r = rng::stream(config.seed, &[tags::IDM, 2, step as u64]);
            let idx: Vec<usize> = (0..config.batch).map(|_| r.random_range(0..data.len())).collect();
            let pairs: Vec<(&[f32], &[f32])> = idx.iter().map(|&i| (&data[i].before[..], &data[i].after[..])).collect();
            let targets: Vec<usize> = idx.iter().map(|&i| data[i].action.id()).collect();
            let mut tape = Tape::new();
            let p = Bound::new(&mut tape, &self.params);
            let logits = self.logits(&mut tape, &p, &pairs)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            trace.push(tape.value(loss).data()[0]);
            tape.backward(loss)?;
            self.params.accumulate_grads(&tape)?;
            opt.step(&mut self.params)?;
            self.params.zero_grads();
        }
        self.params.set_trainable(false);
        Ok(trace)
    }

    pub fn accuracy(&self, data: &[Transition]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("IDM evaluation data"));
        }
        let mut hits = 0;
        for t in data {
            if self.predict(&t.before, &t.after)? == t.action {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(IDM_ROLE);
        c.push_store("", &self.params);
        c.set_meta("frame_size", self.frame_size)?;
        c.set_meta("channels", self.channels)?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_role(IDM_ROLE)?;
        let mut params = c.store("")?;
        params.set_trainable(false);
        Ok(Self {
            frame_size: c.meta("frame_size")?,
            channels: c.meta("channels")?,
            params,
        })
    }
}

/// Fresh model trained on `config.samples` transitions from worlds derived
/// from `config.seed`.
pub fn train_idm(world: &WorldConfig, config: &IdmConfig) -> Result<InverseDynamics> {
    let data = sample_transitions(world, config.seed, config.samples)?;
    let mut idm = InverseDynamics::new(world.frame_size(), config)?;
    idm.train(&data, config)?;
    Ok(idm)
}

pub fn argmax_lowest(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One action per consecutive frame pair.
pub fn infer_actions(idm: &InverseDynamics, video: &LatentVideo) -> Result<Vec<Action>> {
    if video.len() < 2 {
        return Err(Error::FrameCount {
            got: video.len(),
            expected: 2,
        });
    }
    (1..video.len())
        .map(|i| idm.predict(video.frame(i - 1), video.frame(i)))
        .collect()
}
