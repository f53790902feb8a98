//! Inference-time learning: a Temp-LoRA adapter absorbs each generated
//! chunk so later chunks can draw on it.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use slowfast_tensor::{Bound, Tape};

use crate::diffusion::{masked_loss, DiffusionExample};
use crate::error::{Error, Result};
use crate::gridworld::{Action, ChunkSpec};
use crate::lora::{LoraAdapter, LoraBinding, LoraConfig, TempLoraState};
use crate::model::Model;
use crate::persist::Checkpoint;
use crate::rng::{self, tags};
use crate::video::{self, LatentVideo};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FastConfig {
    pub enabled: bool,
    pub rank: usize,
    pub alpha: Option<f64>,
    pub lr: f64,
    pub steps_per_chunk: usize,
    /// Also revisit earlier chunks during each update.
    pub replay: bool,
    pub seed: u64,
}

impl Default for FastConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rank: 32,
            alpha: None,
            lr: 1e-4,
            steps_per_chunk: 10,
            replay: false,
            seed: 0,
        }
    }
}

impl FastConfig {
    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.rank,
            alpha: self.alpha,
        }
    }
}

/// The conditioning input `X_i` and generated output `Y_i` of one chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkRecord {
    pub index: usize,
    pub action: Action,
    pub input: LatentVideo,
    pub output: LatentVideo,
}

impl ChunkRecord {
    pub fn joint(&self) -> LatentVideo {
        self.input.concat(&self.output)
    }
}

/// Fresh adapter over the model's injection points.
pub fn new_templora(model: &Model, config: &FastConfig) -> Result<TempLoraState> {
    let adapter = LoraAdapter::init(
        &model.params,
        &model.net.injection_points(),
        config.lora(),
        rng::derive(config.seed, &[tags::LORA]),
    )?;
    Ok(TempLoraState::new(adapter, config.lr))
}

/// `steps` Adam updates of the adapter on the unconditional denoising loss
/// of `clips`, with every frame noised and the null action. One clip is
/// drawn per step. The base weights receive no gradient.
pub fn templora_update(model: &Model, state: &mut TempLoraState, clips: &[LatentVideo], steps: usize, seed: u64) -> Result<Vec<f32>> {
    if clips.is_empty() {
        return Err(Error::NothingGenerated);
    }
    let mut trace = Vec::with_capacity(steps);
    for k in 0..steps {
        let mut r = rng::stream(seed, &[tags::UPDATE, k as u64]);
        let clip = &clips[if clips.len() > 1 { r.random_range(0..clips.len()) } else { 0 }];
        let ex = DiffusionExample::draw(clip.clone(), 0, Action::Null, &model.schedule, &mut r);
        let mut tape = Tape::new();
        let base = Bound::new(&mut tape, &model.params);
        let lb = Bound::new(&mut tape, &state.adapter.factors);
        let binding = LoraBinding {
            bound: &lb,
            scale: state.adapter.scale,
        };
        let out = masked_loss(&mut tape, &model.net, &base, Some(&binding), &model.schedule, &[ex])?;
        let loss = tape.value(out.loss).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.steps,
                samples: vec![],
            });
        }
        tape.backward(out.loss)?;
        state.adapter.factors.accumulate_grads(&tape)?;
        state.optimizer.step(&mut state.adapter.factors)?;
        state.adapter.factors.zero_grads();
        state.steps += 1;
        trace.push(loss);
    }
    Ok(trace)
}

/// One generation episode. Base weights are shared and never modified.
pub struct FastSession {
    model: Arc<Model>,
    spec: ChunkSpec,
    config: FastConfig,
    templora: Option<TempLoraState>,
    video: LatentVideo,
    records: Vec<ChunkRecord>,
}

impl FastSession {
    /// `first` must hold exactly one frame.
    pub fn new(model: Arc<Model>, first: LatentVideo, spec: ChunkSpec, config: FastConfig) -> Result<Self> {
        spec.validate()?;
        if first.len() != 1 {
            return Err(Error::FrameCount {
                got: first.len(),
                expected: 1,
            });
        }
        if first.height() != model.frame_size() || first.width() != model.frame_size() {
            return Err(Error::Config(format!(
                "first frame is {}x{}, model expects {}px",
                first.height(),
                first.width(),
                model.frame_size()
            )));
        }
        if model.params.ids().any(|id| model.params.requires_grad(id)) {
            return Err(Error::Config("session models must be frozen".into()));
        }
        let templora = if config.enabled {
            Some(new_templora(&model, &config)?)
        } else {
            None
        };
        Ok(Self {
            model,
            spec,
            config,
            templora,
            video: first,
            records: Vec::new(),
        })
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn spec(&self) -> ChunkSpec {
        self.spec
    }

    pub fn config(&self) -> &FastConfig {
        &self.config
    }

    pub fn video(&self) -> &LatentVideo {
        &self.video
    }

    pub fn records(&self) -> &[ChunkRecord] {
        &self.records
    }

    pub fn chunk_index(&self) -> usize {
        self.records.len()
    }

    pub fn templora(&self) -> Option<&TempLoraState> {
        self.templora.as_ref()
    }

    pub fn templora_mut(&mut self) -> Option<&mut TempLoraState> {
        self.templora.as_mut()
    }

    /// `X_i`: the first frame for chunk 0, otherwise the previous output.
    fn next_input(&self) -> LatentVideo {
        match self.records.last() {
            Some(r) => r.output.clone(),
            None => self.video.clone(),
        }
    }

    /// Generates chunk `i` conditioned on the tail of `X_i`.
    pub fn generate_step(&mut self, action: Action) -> Result<LatentVideo> {
        if !action.is_env_action() {
            return Err(Error::NullAction);
        }
        let index = self.chunk_index();
        let input = self.next_input();
        let cond = input.tail(self.spec.f_p);
        let lora = self.templora.as_ref().map(|s| &s.adapter);
        let seed = rng::derive(self.config.seed, &[tags::SAMPLE, index as u64]);
        let output = self.model.generator(lora).sample_chunk(&cond, action, self.spec.f_g, seed)?;
        self.video.append(&output);
        self.records.push(ChunkRecord {
            index,
            action,
            input,
            output: output.clone(),
        });
        Ok(output)
    }

    /// Replaces the latest output with observed frames of the same length.
    pub fn observe(&mut self, observed: LatentVideo) -> Result<()> {
        let last = self.records.last_mut().ok_or(Error::NothingGenerated)?;
        if observed.len() != last.output.len() || observed.frame_len() != last.output.frame_len() {
            return Err(Error::FrameCount {
                got: observed.len(),
                expected: last.output.len(),
            });
        }
        let start = self.video.len() - observed.len();
        let n = self.video.frame_len();
        self.video.data_mut()[start * n..].copy_from_slice(observed.data());
        last.output = observed;
        Ok(())
    }

    /// Fits the adapter to `X_i ⊕ Y_i` of the latest chunk. Returns the
    /// per-step losses, or an empty trace when Temp-LoRA is disabled.
    pub fn update_templora(&mut self) -> Result<Vec<f32>> {
        let Some(state) = self.templora.as_mut() else {
            return Ok(Vec::new());
        };
        let last = self.records.last().ok_or(Error::NothingGenerated)?;
        let clips: Vec<LatentVideo> = if self.config.replay {
            self.records.iter().map(ChunkRecord::joint).collect()
        } else {
            vec![last.joint()]
        };
        let seed = rng::derive(self.config.seed, &[tags::UPDATE, last.index as u64]);
        templora_update(&self.model, state, &clips, self.config.steps_per_chunk, seed)
    }

    pub fn reset_templora(&mut self) -> Result<()> {
        if self.templora.is_some() {
            self.templora = Some(new_templora(&self.model, &self.config)?);
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<Option<Checkpoint>> {
        self.templora
            .as_ref()
            .map(|s| {
                let mut c = s.adapter.to_checkpoint()?;
                c.set_meta("chunk_index", self.chunk_index())?;
                Ok(c)
            })
            .transpose()
    }

    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        let state = self
            .templora
            .as_mut()
            .ok_or_else(|| Error::Config("Temp-LoRA is disabled for this session".into()))?;
        state.restore_factors(LoraAdapter::from_checkpoint(c)?)
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub video: LatentVideo,
    pub actions: Vec<Action>,
    /// `Θ_0` then the adapter after each chunk's update.
    pub snapshots: Vec<Checkpoint>,
    pub records: Vec<ChunkRecord>,
    pub loss_traces: Vec<Vec<f32>>,
}

/// Generates one chunk per action, updating Temp-LoRA after each.
pub fn run_episode(model: Arc<Model>, first: LatentVideo, actions: &[Action], spec: ChunkSpec, config: FastConfig) -> Result<EpisodeResult> {
    let mut s = FastSession::new(model, first, spec, config)?;
    let mut snapshots: Vec<Checkpoint> = s.snapshot()?.into_iter().collect();
    let mut traces = Vec::with_capacity(actions.len());
    for &a in actions {
        s.generate_step(a)?;
        traces.push(s.update_templora()?);
        snapshots.extend(s.snapshot()?);
    }
    Ok(EpisodeResult {
        video: s.video.clone(),
        actions: actions.to_vec(),
        snapshots,
        records: s.records,
        loss_traces: traces,
    })
}

#[derive(Serialize)]
struct EpisodeManifest<'a> {
    frames: usize,
    chunks: usize,
    f_p: usize,
    f_g: usize,
    frame_size: usize,
    templora: bool,
    config: &'a FastConfig,
    loss_traces: &'a [Vec<f32>],
}

impl EpisodeResult {
    /// `frames/`, `actions.json`, `templora_snapshots/` and `episode_manifest.json`.
    pub fn write(&self, dir: &Path, spec: ChunkSpec, config: &FastConfig) -> Result<()> {
        video::write_png_frames(&self.video, &dir.join("frames"))?;
        let names: Vec<&str> = self.actions.iter().map(|a| a.name()).collect();
        let p = dir.join("actions.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&names)?).map_err(|e| Error::io(&p, e))?;
        if !self.snapshots.is_empty() {
            let sd = dir.join("templora_snapshots");
            for (i, c) in self.snapshots.iter().enumerate() {
                c.save(&sd.join(format!("theta_{i:04}.sfvg")))?;
            }
        }
        let m = EpisodeManifest {
            frames: self.video.len(),
            chunks: self.records.len(),
            f_p: spec.f_p,
            f_g: spec.f_g,
            frame_size: self.video.height(),
            templora: !self.snapshots.is_empty(),
            config,
            loss_traces: &self.loss_traces,
        };
        let p = dir.join("episode_manifest.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(&p, e))
    }
}
