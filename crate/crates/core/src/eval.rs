//! Scripted episodes scored with the memory metrics.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fast::{run_episode, FastConfig};
use crate::gridworld::{ChunkSpec, RevisitBenchmark};
use crate::metrics::{scene_cut_count, scene_revisit_consistency, FeatureExtractor};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevisitScore {
    pub src: f64,
    pub scuts: usize,
    pub frames: usize,
    pub seconds: f64,
}

/// Generates the benchmark script from its first frame and scores the
/// result against the benchmark's revisit annotation.
pub fn run_revisit(
    model: Arc<Model>,
    bench: &RevisitBenchmark,
    f_p: usize,
    config: &FastConfig,
    scuts_threshold: f64,
    extractor: &dyn FeatureExtractor,
) -> Result<RevisitScore> {
    let t0 = Instant::now();
    let spec = ChunkSpec::new(f_p, bench.f_g)?;
    let first = bench.frames.slice(0, 1);
    let r = run_episode(model, first, &bench.chunk_actions, spec, config.clone())?;
    Ok(RevisitScore {
        src: scene_revisit_consistency(&r.video, &bench.annotation, extractor)?,
        scuts: scene_cut_count(&r.video, scuts_threshold),
        frames: r.video.len(),
        seconds: t0.elapsed().as_secs_f64(),
    })
}
