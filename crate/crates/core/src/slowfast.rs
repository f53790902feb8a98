//! Alternating inner (Temp-LoRA) and outer (base weight) learning.
//!
//! The inner pass walks each training episode chunk by chunk, recording the
//! pair `(X_i, X_{i+1})` together with the adapter `Θ_i` it held before
//! learning chunk `i`. The outer pass then trains the base weights to
//! predict `X_{i+1}` from `X_i` while `Θ_i` is applied and frozen.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use slowfast_tensor::{Adam, AdamConfig, Bound, Tape};

use crate::diffusion::{masked_loss, DiffusionExample};
use crate::error::{Error, Result};
use crate::fast::{new_templora, templora_update, FastConfig};
use crate::gridworld::{render_poses, rollout, Action, ChunkSpec, Pose, World, WorldConfig};
use crate::lora::{LoraAdapter, LoraBinding};
use crate::model::Model;
use crate::persist::Checkpoint;
use crate::rng::{self, tags};
use crate::video::LatentVideo;

/// Ground-truth episode: an initial frame and one rendered chunk per action.
#[derive(Clone, Debug)]
pub struct GtEpisode {
    pub first: LatentVideo,
    pub actions: Vec<Action>,
    pub chunks: Vec<LatentVideo>,
}

impl GtEpisode {
    pub fn from_env(world: &World, start: Pose, actions: &[Action], f_g: usize) -> Result<Self> {
        let mut pose = start;
        let mut chunks = Vec::with_capacity(actions.len());
        for &a in actions {
            let poses = rollout(world, pose, a, f_g)?;
            pose = *poses.last().expect("f_g > 0");
            chunks.push(render_poses(world, &poses));
        }
        Ok(Self {
            first: render_poses(world, &[start]),
            actions: actions.to_vec(),
            chunks,
        })
    }

    /// `X_i`: the first frame for `i = 0`, otherwise chunk `i - 1`.
    pub fn input(&self, i: usize) -> &LatentVideo {
        if i == 0 {
            &self.first
        } else {
            &self.chunks[i - 1]
        }
    }

    pub fn video(&self) -> LatentVideo {
        let mut v = self.first.clone();
        for c in &self.chunks {
            v.append(c);
        }
        v
    }
}

/// Episodes in fresh worlds. Half of the chunks retrace an earlier move so
/// the agent keeps coming back to places it has seen.
pub fn random_episodes(world: &WorldConfig, seed: u64, count: usize, chunks: usize, f_g: usize) -> Result<Vec<GtEpisode>> {
    const MOVES: [Action; 6] = [
        Action::MoveForward,
        Action::MoveBackward,
        Action::StrafeLeft,
        Action::StrafeRight,
        Action::TurnLeft,
        Action::TurnRight,
    ];
    (0..count)
        .map(|e| {
            let ws = rng::derive(seed, &[tags::EPISODE, e as u64]);
            let w = World::generate(ws, world)?;
            let start = w.random_start(ws)?;
            let mut r = rng::stream(ws, &[tags::WALK]);
            let mut stack: Vec<Action> = Vec::new();
            let actions: Vec<Action> = (0..chunks)
                .map(|_| {
                    if !stack.is_empty() && r.random_bool(0.5) {
                        stack.pop().expect("non-empty").inverse()
                    } else {
                        let a = MOVES[r.random_range(0..MOVES.len())];
                        stack.push(a);
                        a
                    }
                })
                .collect();
            GtEpisode::from_env(&w, start, &actions, f_g)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMode {
    /// Temp-LoRA learns ground-truth chunk pairs.
    GroundTruth,
    /// Temp-LoRA learns the model's own generated chunks.
    Generated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsMeta {
    pub episode: usize,
    pub iter: usize,
    pub action: Action,
    pub x_frames: usize,
    pub y_frames: usize,
    pub frame_size: usize,
}

/// On-disk episodic dataset: `episode_{e}/iter_{i}/{x.bin,y.bin,theta.bin,meta.json}`.
#[derive(Clone, Debug)]
pub struct DsIndex {
    pub dir: PathBuf,
    pub entries: Vec<DsMeta>,
}

pub struct DsSample {
    pub meta: DsMeta,
    pub x: LatentVideo,
    pub y: LatentVideo,
    pub theta: LoraAdapter,
}

impl DsIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn item_dir(dir: &Path, m: &DsMeta) -> PathBuf {
        dir.join(format!("episode_{}", m.episode)).join(format!("iter_{}", m.iter))
    }

    fn write(dir: &Path, s: &DsSample) -> Result<()> {
        let d = Self::item_dir(dir, &s.meta);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        let w = |name: &str, bytes: Vec<u8>| {
            let p = d.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        w("x.bin", s.x.to_le_bytes())?;
        w("y.bin", s.y.to_le_bytes())?;
        w("theta.bin", s.theta.to_checkpoint()?.to_bytes()?)?;
        w("meta.json", serde_json::to_vec_pretty(&s.meta)?)
    }

    pub fn load(&self, i: usize) -> Result<DsSample> {
        let m = &self.entries[i];
        let d = Self::item_dir(&self.dir, m);
        let r = |name: &str| {
            let p = d.join(name);
            std::fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        Ok(DsSample {
            meta: m.clone(),
            x: LatentVideo::from_le_bytes(m.x_frames, m.frame_size, m.frame_size, &r("x.bin")?)?,
            y: LatentVideo::from_le_bytes(m.y_frames, m.frame_size, m.frame_size, &r("y.bin")?)?,
            theta: LoraAdapter::from_checkpoint(&Checkpoint::from_bytes(&r("theta.bin")?)?)?,
        })
    }

    /// Re-reads the index from `meta.json` files, ordered by episode and iteration.
    pub fn open(dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let eps = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for e in eps {
            let e = e.map_err(|err| Error::io(dir, err))?.path();
            if !e.is_dir() {
                continue;
            }
            for it in std::fs::read_dir(&e).map_err(|err| Error::io(&e, err))? {
                let p = it.map_err(|err| Error::io(&e, err))?.path().join("meta.json");
                let bytes = std::fs::read(&p).map_err(|err| Error::io(&p, err))?;
                entries.push(serde_json::from_slice::<DsMeta>(&bytes)?);
            }
        }
        entries.sort_by_key(|m| (m.episode, m.iter));
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
        })
    }
}

fn episode_fast_config(config: &FastConfig, episode: usize) -> FastConfig {
    FastConfig {
        seed: rng::derive(config.seed, &[tags::EPISODE, episode as u64]),
        ..config.clone()
    }
}

/// Runs the inner loop over every episode and writes one sample per chunk.
pub fn build_ds(model: &Model, episodes: &[GtEpisode], spec: ChunkSpec, config: &FastConfig, mode: InnerMode, dir: &Path) -> Result<DsIndex> {
    let frozen = frozen_view(model);
    let mut entries = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        if ep.actions.is_empty() {
            log::warn!("episode {e} is shorter than one chunk, skipped");
            continue;
        }
        let cfg = episode_fast_config(config, e);
        let mut state = new_templora(&frozen, &cfg)?;
        let mut generated_input = ep.first.clone();
        for (i, &action) in ep.actions.iter().enumerate() {
            let meta = DsMeta {
                episode: e,
                iter: i,
                action,
                x_frames: ep.input(i).len(),
                y_frames: ep.chunks[i].len(),
                frame_size: model.frame_size(),
            };
            DsIndex::write(
                dir,
                &DsSample {
                    meta: meta.clone(),
                    x: ep.input(i).clone(),
                    y: ep.chunks[i].clone(),
                    theta: state.adapter.clone(),
                },
            )?;
            entries.push(meta);
            let seed = rng::derive(cfg.seed, &[tags::UPDATE, i as u64]);
            let clip = match mode {
                InnerMode::GroundTruth => ep.input(i).concat(&ep.chunks[i]),
                InnerMode::Generated => {
                    let cond = generated_input.tail(spec.f_p);
                    let out = frozen.generator(Some(&state.adapter)).sample_chunk(
                        &cond,
                        action,
                        spec.f_g,
                        rng::derive(cfg.seed, &[tags::SAMPLE, i as u64]),
                    )?;
                    let clip = generated_input.concat(&out);
                    generated_input = out;
                    clip
                }
            };
            templora_update(&frozen, &mut state, &[clip], cfg.steps_per_chunk, seed)?;
        }
    }
    Ok(DsIndex {
        dir: dir.to_path_buf(),
        entries,
    })
}

/// `Θ_upto` of episode `index` rebuilt from a fresh adapter by replaying the
/// ground-truth inner updates.
pub fn replay_theta(model: &Model, ep: &GtEpisode, index: usize, config: &FastConfig, upto: usize) -> Result<LoraAdapter> {
    let frozen = frozen_view(model);
    let cfg = episode_fast_config(config, index);
    let mut state = new_templora(&frozen, &cfg)?;
    for i in 0..upto.min(ep.actions.len()) {
        let clip = ep.input(i).concat(&ep.chunks[i]);
        let seed = rng::derive(cfg.seed, &[tags::UPDATE, i as u64]);
        templora_update(&frozen, &mut state, &[clip], cfg.steps_per_chunk, seed)?;
    }
    Ok(state.adapter)
}

fn frozen_view(model: &Model) -> Model {
    model.clone().frozen()
}

fn pair_example(model: &Model, x: &LatentVideo, y: &LatentVideo, f_p: usize, action: Action, r: &mut impl Rng) -> DiffusionExample {
    let cond = x.tail(f_p);
    let f_p = cond.len();
    DiffusionExample::draw(cond.concat(y), f_p, action, &model.schedule, r)
}

/// Masked loss of predicting `y` from the tail of `x` under `Θ` (frozen).
/// Gradients, if requested, flow into the base weights only.
fn pair_loss(model: &Model, theta: &LoraAdapter, ex: DiffusionExample, scale: f32) -> Result<(f32, Tape<f32>)> {
    let mut tape = Tape::new();
    let base = Bound::new(&mut tape, &model.params);
    let mut factors = theta.factors.clone();
    factors.set_trainable(false);
    let lb = Bound::new(&mut tape, &factors);
    let binding = LoraBinding {
        bound: &lb,
        scale: theta.scale,
    };
    let out = masked_loss(&mut tape, &model.net, &base, Some(&binding), &model.schedule, &[ex])?;
    let loss = tape.value(out.loss).data()[0];
    if model.params.ids().any(|id| model.params.requires_grad(id)) {
        let scaled = tape.scale(out.loss, scale)?;
        tape.backward(scaled)?;
    }
    Ok((loss, tape))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterStats {
    pub samples: usize,
    pub updates: usize,
    pub mean_loss: f64,
}

/// One pass over `ds` in a seeded order, `batch` samples per Adam step.
pub fn outer_update(model: &mut Model, optimizer: &mut Adam<f32>, ds: &DsIndex, f_p: usize, batch: usize, seed: u64) -> Result<OuterStats> {
    if ds.is_empty() {
        return Err(Error::Empty("episodic dataset"));
    }
    let batch = batch.max(1);
    model.params.set_trainable(true);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[tags::OUTER]));
    let mut total = 0.0;
    let mut seen = 0usize;
    let mut updates = 0;
    for group in order.chunks(batch) {
        let before = seen;
        for &i in group {
            let s = match ds.load(i) {
                Ok(s) => s,
                Err(err) => {
                    log::warn!("skipping sample {i}: {err}");
                    continue;
                }
            };
            let mut r = rng::stream(seed, &[tags::OUTER, i as u64]);
            let ex = pair_example(model, &s.x, &s.y, f_p, s.meta.action, &mut r);
            let (loss, tape) = pair_loss(model, &s.theta, ex, 1.0 / group.len() as f32)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: updates as u64,
                    samples: vec![i],
                });
            }
            model.params.accumulate_grads(&tape)?;
            total += loss as f64;
            seen += 1;
        }
        if seen > before {
            optimizer.step(&mut model.params)?;
            updates += 1;
        }
        model.params.zero_grads();
    }
    if seen == 0 {
        return Err(Error::Empty("episodic dataset"));
    }
    Ok(OuterStats {
        samples: seen,
        updates,
        mean_loss: total / seen as f64,
    })
}

/// Mean masked loss over held-out episodes while Temp-LoRA learns each
/// episode with ground-truth chunks. Each pair is scored at `draws` fixed
/// timestep and noise draws.
pub fn episode_loss(model: &Model, episodes: &[GtEpisode], spec: ChunkSpec, config: &FastConfig, draws: usize, seed: u64) -> Result<f64> {
    let frozen = frozen_view(model);
    let mut total = 0.0;
    let mut n = 0usize;
    for (e, ep) in episodes.iter().enumerate() {
        let cfg = episode_fast_config(config, e);
        let mut state = new_templora(&frozen, &cfg)?;
        for (i, &action) in ep.actions.iter().enumerate() {
            for d in 0..draws {
                let mut r = rng::stream(seed, &[tags::EVAL, e as u64, i as u64, d as u64]);
                let ex = pair_example(&frozen, ep.input(i), &ep.chunks[i], spec.f_p, action, &mut r);
                total += pair_loss(&frozen, &state.adapter, ex, 1.0)?.0 as f64;
                n += 1;
            }
            if cfg.enabled {
                let clip = ep.input(i).concat(&ep.chunks[i]);
                let s = rng::derive(cfg.seed, &[tags::UPDATE, i as u64]);
                templora_update(&frozen, &mut state, &[clip], cfg.steps_per_chunk, s)?;
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("held-out episodes"));
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub max_epochs: usize,
    /// Stop once the epoch loss changes by less than this.
    pub min_loss_delta: f64,
    pub lr: f64,
    pub batch: usize,
    pub mode: InnerMode,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_epochs: 1,
            min_loss_delta: 0.0,
            lr: 1e-4,
            batch: 4,
            mode: InnerMode::GroundTruth,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Converged,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub ds_size: usize,
    pub outer: OuterStats,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoopReport {
    pub epochs: Vec<EpochDiagnostics>,
    pub stop: StopReason,
}

/// Epochs of `build_ds` then `outer_update`. `ds_root/epoch_{k}` holds each
/// epoch's dataset. Three consecutive loss increases stop the loop.
pub fn run_loop(
    model: &mut Model,
    episodes: &[GtEpisode],
    spec: ChunkSpec,
    fast: &FastConfig,
    config: &LoopConfig,
    ds_root: &Path,
) -> Result<LoopReport> {
    let mut optimizer = Adam::new(AdamConfig::with_lr(config.lr), &model.params);
    let mut epochs: Vec<EpochDiagnostics> = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    for epoch in 0..config.max_epochs {
        let dir = ds_root.join(format!("epoch_{epoch}"));
        let ds = build_ds(model, episodes, spec, fast, config.mode, &dir)?;
        let seed = rng::derive(config.seed, &[tags::OUTER, epoch as u64]);
        let outer = outer_update(model, &mut optimizer, &ds, spec.f_p, config.batch, seed)?;
        log::info!("epoch {epoch}: |D_s| = {}, loss {:.5}", ds.len(), outer.mean_loss);
        epochs.push(EpochDiagnostics {
            epoch,
            ds_size: ds.len(),
            outer,
        });
        let losses: Vec<f64> = epochs.iter().map(|d| d.outer.mean_loss).collect();
        if let Some(s) = stop_reason(&losses, config.min_loss_delta) {
            stop = s;
            break;
        }
    }
    model.params.set_trainable(false);
    Ok(LoopReport { epochs, stop })
}

/// Early stop given the per-epoch losses so far: three consecutive rises
/// diverge, a change below `min_delta` converges.
pub fn stop_reason(losses: &[f64], min_delta: f64) -> Option<StopReason> {
    let n = losses.len();
    if n < 2 {
        return None;
    }
    if n >= 4 && losses[n - 4..].windows(2).all(|w| w[1] > w[0]) {
        return Some(StopReason::Diverged);
    }
    if (losses[n - 1] - losses[n - 2]).abs() < min_delta {
        return Some(StopReason::Converged);
    }
    None
}

/// Shares frozen weights with generation sessions.
pub fn shared(model: &Model) -> Arc<Model> {
    Arc::new(frozen_view(model))
}
