#![allow(dead_code)]

use slowfast_core::denoiser::ArchConfig;
use slowfast_core::diffusion::ScheduleConfig;
use slowfast_core::gridworld::{World, WorldConfig};
use slowfast_core::model::Model;

pub fn small_world() -> WorldConfig {
    WorldConfig {
        tile_px: 2,
        border_px: 1,
        ..Default::default()
    }
}

pub fn toy_arch() -> ArchConfig {
    ArchConfig {
        channels: 8,
        groups: 4,
        frame_size: 16,
        ..Default::default()
    }
}

pub fn fast_schedule() -> ScheduleConfig {
    ScheduleConfig {
        sample_steps: 4,
        ..Default::default()
    }
}

pub fn toy_model(seed: u64) -> Model {
    Model::new(toy_arch(), fast_schedule(), seed).unwrap()
}

pub fn world(seed: u64) -> World {
    World::generate(seed, &small_world()).unwrap()
}

pub fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}
