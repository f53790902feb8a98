use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::action::Action;
use super::world::{Pose, World, WorldConfig};
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::video::{self, LatentVideo};

/// Maximum number of frames the denoiser sees at once.
pub const CONTEXT_WINDOW: usize = 32;

/// Conditioning / generated frame counts of one chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub f_p: usize,
    pub f_g: usize,
}

impl ChunkSpec {
    pub fn new(f_p: usize, f_g: usize) -> Result<Self> {
        let spec = Self { f_p, f_g };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.f_p == 0 || self.f_g == 0 {
            return Err(Error::Config(format!(
                "chunk needs at least one conditioning and one generated frame (f_p={}, f_g={})",
                self.f_p, self.f_g
            )));
        }
        if self.total() > CONTEXT_WINDOW {
            return Err(Error::ContextWindow {
                frames: self.total(),
                max: CONTEXT_WINDOW,
            });
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.f_p + self.f_g
    }

    pub fn with_f_p(&self, f_p: usize) -> Result<Self> {
        Self::new(f_p, self.f_g)
    }
}

impl Default for ChunkSpec {
    fn default() -> Self {
        Self { f_p: 4, f_g: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub episodes: usize,
    pub episode_len: usize,
    pub chunk: ChunkSpec,
    pub first_frame_samples: bool,
    pub world: WorldConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            episodes: 64,
            episode_len: 32,
            chunk: ChunkSpec::default(),
            first_frame_samples: false,
            world: WorldConfig::default(),
        }
    }
}

/// One random-walk trajectory. `actions[i]` moves `poses[i]` to `poses[i + 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodePath {
    pub world_seed: u64,
    pub poses: Vec<Pose>,
    pub actions: Vec<Action>,
}

/// A training pair. Future frames replay `action` from the last past pose,
/// so every generated frame in the sample shares one action label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub episode: usize,
    pub start: usize,
    pub action: Action,
    pub past: Vec<Pose>,
    pub future: Vec<Pose>,
}

impl Sample {
    pub fn f_p(&self) -> usize {
        self.past.len()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub worlds: Vec<World>,
    pub episodes: Vec<EpisodePath>,
    pub samples: Vec<Sample>,
}

pub fn episode_world_seed(seed: u64, episode: usize) -> u64 {
    rng::derive(seed, &[tags::EPISODE, episode as u64])
}

/// Sticky random walk: each drawn action is held for 1 to 4 steps.
pub fn random_walk(world: &World, start: Pose, len: usize, seed: u64) -> Result<EpisodePath> {
    const WEIGHTS: [(Action, u32); 7] = [
        (Action::MoveForward, 6),
        (Action::MoveBackward, 2),
        (Action::StrafeLeft, 2),
        (Action::StrafeRight, 2),
        (Action::TurnLeft, 3),
        (Action::TurnRight, 3),
        (Action::Noop, 1),
    ];
    let total: u32 = WEIGHTS.iter().map(|w| w.1).sum();
    let mut rng = rng::stream(seed, &[tags::WALK]);
    let mut poses = vec![start];
    let mut actions = Vec::with_capacity(len.saturating_sub(1));
    let mut current = Action::Noop;
    let mut hold = 0;
    while poses.len() < len {
        if hold == 0 {
            let mut pick = rng.random_range(0..total);
            current = WEIGHTS
                .iter()
                .find(|(_, w)| {
                    let hit = pick < *w;
                    pick = pick.saturating_sub(*w);
                    hit
                })
                .map(|w| w.0)
                .expect("pick below total");
            hold = rng.random_range(1..=4);
        }
        hold -= 1;
        let next = world.step(*poses.last().unwrap(), current)?;
        actions.push(current);
        poses.push(next);
    }
    Ok(EpisodePath {
        world_seed: world.seed,
        poses,
        actions,
    })
}

pub fn rollout(world: &World, from: Pose, action: Action, steps: usize) -> Result<Vec<Pose>> {
    let mut out = Vec::with_capacity(steps);
    let mut p = from;
    for _ in 0..steps {
        p = world.step(p, action)?;
        out.push(p);
    }
    Ok(out)
}

pub fn render_poses(world: &World, poses: &[Pose]) -> LatentVideo {
    let s = world.config.frame_size();
    let mut v = LatentVideo::empty(s, s);
    for &p in poses {
        v.push_frame(&world.render(p));
    }
    v
}

pub fn make_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.chunk.validate()?;
    config.world.validate()?;
    let ChunkSpec { f_p, f_g } = config.chunk;
    if config.episode_len < f_p + f_g {
        return Err(Error::Config(format!(
            "episode length {} is shorter than one chunk ({})",
            config.episode_len,
            f_p + f_g
        )));
    }
    let mut worlds = Vec::with_capacity(config.episodes);
    let mut episodes = Vec::with_capacity(config.episodes);
    let mut samples = Vec::new();
    for e in 0..config.episodes {
        let world_seed = episode_world_seed(config.seed, e);
        let world = World::generate(world_seed, &config.world)?;
        let start = world.random_start(world_seed)?;
        let path = random_walk(&world, start, config.episode_len, world_seed)?;
        let mut push = |s: usize, fp: usize| -> Result<()> {
            let last = path.poses[s + fp - 1];
            let action = path.actions[s + fp - 1];
            samples.push(Sample {
                episode: e,
                start: s,
                action,
                past: path.poses[s..s + fp].to_vec(),
                future: rollout(&world, last, action, f_g)?,
            });
            Ok(())
        };
        if config.first_frame_samples {
            push(0, 1)?;
        }
        for s in 0..=config.episode_len - (f_p + f_g) {
            push(s, f_p)?;
        }
        worlds.push(world);
        episodes.push(path);
    }
    Ok(Dataset {
        config: config.clone(),
        worlds,
        episodes,
        samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobFormat {
    F32,
    Ppm,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DatasetConfig,
    frame_size: usize,
    format: BlobFormat,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: usize,
    world_seed: u64,
    #[serde(flatten)]
    sample: Sample,
    files: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn frame_size(&self) -> usize {
        self.config.world.frame_size()
    }

    pub fn world_seeds(&self) -> Vec<u64> {
        self.worlds.iter().map(|w| w.seed).collect()
    }

    /// Past then future frames of sample `i`.
    pub fn frames(&self, i: usize) -> LatentVideo {
        let s = &self.samples[i];
        let world = &self.worlds[s.episode];
        let mut v = render_poses(world, &s.past);
        v.append(&render_poses(world, &s.future));
        v
    }

    /// Writes `manifest.json` plus one blob per sample (or one PPM per frame).
    pub fn write(&self, dir: &Path, format: BlobFormat) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let size = self.frame_size();
        let mut entries = Vec::with_capacity(self.len());
        for (i, s) in self.samples.iter().enumerate() {
            let frames = self.frames(i);
            let files = match format {
                BlobFormat::F32 => {
                    let name = format!("sample_{i:06}.bin");
                    let path = dir.join(&name);
                    std::fs::write(&path, frames.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
                    vec![name]
                }
                BlobFormat::Ppm => frames
                    .frames()
                    .enumerate()
                    .map(|(j, f)| {
                        let name = format!("sample_{i:06}_{j:02}.ppm");
                        let path = dir.join(&name);
                        std::fs::write(&path, video::encode_ppm(f, size, size))
                            .map_err(|e| Error::io(&path, e))?;
                        Ok(name)
                    })
                    .collect::<Result<_>>()?,
            };
            entries.push(ManifestEntry {
                id: i,
                world_seed: self.worlds[s.episode].seed,
                sample: s.clone(),
                files,
            });
        }
        let manifest = Manifest {
            config: self.config.clone(),
            frame_size: size,
            format,
            samples: entries,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Rebuilds the dataset from its manifest and checks the blobs against it.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        let ds = make_dataset(&manifest.config)?;
        if ds.len() != manifest.samples.len() {
            return Err(Error::Config(format!(
                "manifest lists {} samples, config yields {}",
                manifest.samples.len(),
                ds.len()
            )));
        }
        let size = manifest.frame_size;
        for entry in &manifest.samples {
            let mut stored = LatentVideo::empty(size, size);
            for f in &entry.files {
                let p = dir.join(f);
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                match manifest.format {
                    BlobFormat::F32 => {
                        let n = bytes.len() / 4 / stored.frame_len();
                        stored.append(&LatentVideo::from_le_bytes(n, size, size, &bytes)?);
                    }
                    BlobFormat::Ppm => stored.push_frame(&video::decode_ppm(&bytes)?.2),
                }
            }
            if ds.samples[entry.id] != entry.sample || ds.frames(entry.id) != stored {
                return Err(Error::Config(format!(
                    "sample {} on disk does not match its manifest",
                    entry.id
                )));
            }
        }
        Ok(ds)
    }
}
