//! `RunConfig`: one TOML document holding every tunable of a run. Unknown
//! keys are rejected and every key has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use slowfast_core::denoiser::ArchConfig;
use slowfast_core::diffusion::ScheduleConfig;
use slowfast_core::fast::FastConfig;
use slowfast_core::gridworld::{ChunkSpec, DatasetConfig, WorldConfig, CONTEXT_WINDOW};
use slowfast_core::planner::IdmConfig;
use slowfast_core::slow::SlowConfig;
use slowfast_core::slowfast::{InnerMode, LoopConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldSection,
    pub chunks: ChunkSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub slow: SlowSection,
    pub fast: FastSection,
    #[serde(rename = "loop")]
    pub slowfast: LoopSection,
    pub planner: PlannerSection,
    pub metrics: MetricsSection,
    pub service: ServiceSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub seed: u64,
    /// Grid side in cells.
    pub grid: usize,
    /// View side in tiles, odd.
    pub view: usize,
    pub tile_px: usize,
    pub border_px: usize,
    pub wall_prob: f64,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            seed: 0,
            grid: w.grid,
            view: w.view,
            tile_px: w.tile_px,
            border_px: w.border_px,
            wall_prob: w.wall_prob,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkSection {
    pub f_p: usize,
    pub f_g: usize,
}

impl Default for ChunkSection {
    fn default() -> Self {
        let c = ChunkSpec::default();
        Self { f_p: c.f_p, f_g: c.f_g }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    pub eta: f64,
    pub clip_denoised: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        Self {
            steps: s.steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            sample_steps: s.sample_steps,
            eta: s.eta,
            clip_denoised: s.clip_denoised,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub channels: usize,
    pub emb_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub temporal_attention: bool,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = ArchConfig::default();
        Self {
            channels: a.channels,
            emb_dim: a.emb_dim,
            time_dim: a.time_dim,
            groups: a.groups,
            temporal_attention: a.temporal_attention,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    pub episodes: usize,
    pub episode_len: usize,
    pub first_frame_samples: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            seed: 0,
            episodes: 64,
            episode_len: 32,
            first_frame_samples: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlowSection {
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub f_p_choices: Vec<usize>,
    pub log_every: u64,
    /// Fraction of unconditional batches.
    pub p_uncond: f64,
    /// Write a resumable training state every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for SlowSection {
    fn default() -> Self {
        let s = SlowConfig::default();
        Self {
            lr: s.lr,
            steps: s.steps,
            batch: s.batch_size,
            seed: s.seed,
            f_p_choices: s.f_p_choices,
            log_every: s.log_every,
            p_uncond: s.p_uncond,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FastSection {
    pub enabled: bool,
    pub rank: usize,
    pub alpha: Option<f64>,
    pub lr: f64,
    /// Adapter updates per chunk.
    pub k: usize,
    pub replay: bool,
    pub seed: u64,
}

impl Default for FastSection {
    fn default() -> Self {
        let f = FastConfig::default();
        Self {
            enabled: f.enabled,
            rank: f.rank,
            alpha: f.alpha,
            lr: f.lr,
            k: f.steps_per_chunk,
            replay: f.replay,
            seed: f.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopSection {
    pub epochs: usize,
    pub min_loss_delta: f64,
    pub lr: f64,
    pub batch: usize,
    pub mode: InnerMode,
    pub episodes: usize,
    /// Chunks per training episode.
    pub chunks: usize,
    pub seed: u64,
}

impl Default for LoopSection {
    fn default() -> Self {
        let l = LoopConfig::default();
        Self {
            epochs: l.max_epochs,
            min_loss_delta: l.min_loss_delta,
            lr: l.lr,
            batch: l.batch,
            mode: l.mode,
            episodes: 8,
            chunks: 6,
            seed: l.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSection {
    pub legs: usize,
    /// Frames per subgoal.
    pub horizon: usize,
    pub closed_loop: bool,
    pub idm_steps: usize,
    pub idm_samples: usize,
    pub idm_seed: u64,
}

impl Default for PlannerSection {
    fn default() -> Self {
        let i = IdmConfig::default();
        Self {
            legs: 3,
            horizon: 4,
            closed_loop: true,
            idm_steps: i.steps,
            idm_samples: i.samples,
            idm_seed: i.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrcFeature {
    PooledPixels,
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Scene-cut threshold; calibrated on ground-truth walks when absent.
    pub scuts_threshold: Option<f64>,
    pub calibration_seed: u64,
    pub calibration_transitions: usize,
    pub src_feature: SrcFeature,
    pub pool: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            scuts_threshold: None,
            calibration_seed: 0,
            calibration_transitions: 1000,
            src_feature: SrcFeature::PooledPixels,
            pool: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub host: String,
    pub port: u16,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let c: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.world_config().validate()?;
        self.chunk_spec()?;
        if self.fast.rank == 0 {
            return bad("fast.rank must be positive".into());
        }
        if self.slow.batch == 0 || self.slowfast.batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.metrics.pool == 0 {
            return bad("metrics.pool must be positive".into());
        }
        if let Some(t) = self.metrics.scuts_threshold {
            if !(t.is_finite() && t > 0.0) {
                return bad(format!("metrics.scuts_threshold {t} must be positive"));
            }
        }
        if self.data.episode_len < self.chunks.f_p + self.chunks.f_g {
            return bad("data.episode_len is shorter than one chunk".into());
        }
        Ok(())
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            grid: self.world.grid,
            view: self.world.view,
            tile_px: self.world.tile_px,
            border_px: self.world.border_px,
            wall_prob: self.world.wall_prob,
        }
    }

    pub fn chunk_spec(&self) -> CliResult<ChunkSpec> {
        Ok(ChunkSpec::new(self.chunks.f_p, self.chunks.f_g)?)
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            channels: self.model.channels,
            emb_dim: self.model.emb_dim,
            time_dim: self.model.time_dim,
            groups: self.model.groups,
            frame_size: self.world_config().frame_size(),
            max_frames: CONTEXT_WINDOW,
            temporal_attention: self.model.temporal_attention,
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.schedule.steps,
            beta_start: self.schedule.beta_start,
            beta_end: self.schedule.beta_end,
            sample_steps: self.schedule.sample_steps,
            eta: self.schedule.eta,
            clip_denoised: self.schedule.clip_denoised,
        }
    }

    pub fn dataset(&self) -> CliResult<DatasetConfig> {
        Ok(DatasetConfig {
            seed: self.data.seed,
            episodes: self.data.episodes,
            episode_len: self.data.episode_len,
            chunk: self.chunk_spec()?,
            first_frame_samples: self.data.first_frame_samples,
            world: self.world_config(),
        })
    }

    pub fn slow_config(&self) -> SlowConfig {
        SlowConfig {
            lr: self.slow.lr,
            batch_size: self.slow.batch,
            steps: self.slow.steps,
            seed: self.slow.seed,
            f_p_choices: self.slow.f_p_choices.clone(),
            log_every: self.slow.log_every,
            p_uncond: self.slow.p_uncond,
        }
    }

    pub fn fast_config(&self) -> FastConfig {
        FastConfig {
            enabled: self.fast.enabled,
            rank: self.fast.rank,
            alpha: self.fast.alpha,
            lr: self.fast.lr,
            steps_per_chunk: self.fast.k,
            replay: self.fast.replay,
            seed: self.fast.seed,
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            max_epochs: self.slowfast.epochs,
            min_loss_delta: self.slowfast.min_loss_delta,
            lr: self.slowfast.lr,
            batch: self.slowfast.batch,
            mode: self.slowfast.mode,
            seed: self.slowfast.seed,
        }
    }

    pub fn idm_config(&self) -> IdmConfig {
        IdmConfig {
            steps: self.planner.idm_steps,
            samples: self.planner.idm_samples,
            seed: self.planner.idm_seed,
            ..Default::default()
        }
    }

    /// The configured threshold, or a fresh calibration on ground-truth walks.
    pub fn scuts_threshold(&self) -> CliResult<f64> {
        match self.metrics.scuts_threshold {
            Some(t) => Ok(t),
            None => Ok(slowfast_core::metrics::calibrate_scuts_threshold(
                &self.world_config(),
                self.metrics.calibration_seed,
                self.metrics.calibration_transitions,
            )?),
        }
    }
}
