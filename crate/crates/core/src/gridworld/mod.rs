//! Deterministic top-down grid world that supplies ground-truth video.

mod action;
mod dataset;
mod revisit;
mod world;

pub use action::{Action, NUM_ACTIONS, NUM_ENV_ACTIONS};
pub use dataset::{
    episode_world_seed, make_dataset, random_walk, render_poses, rollout, BlobFormat, ChunkSpec,
    Dataset, DatasetConfig, EpisodePath, Sample, CONTEXT_WINDOW,
};
pub use revisit::{make_revisit_benchmark, RevisitAnnotation, RevisitBenchmark, RevisitMark};
pub use world::{Heading, Pose, Tile, World, WorldConfig, BORDER_RGB, PALETTE, WALL_RGB};
