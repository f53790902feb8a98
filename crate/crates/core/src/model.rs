use std::path::Path;

use slowfast_tensor::ParamStore;

use crate::denoiser::{ArchConfig, Denoiser};
use crate::diffusion::{Generator, NoiseSchedule, ScheduleConfig};
use crate::error::Result;
use crate::lora::LoraAdapter;
use crate::persist::Checkpoint;

pub const MODEL_ROLE: &str = "model";

/// Architecture, schedule and base weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Denoiser,
    pub schedule: NoiseSchedule,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn new(arch: ArchConfig, schedule: ScheduleConfig, seed: u64) -> Result<Self> {
        let net = Denoiser::new(arch)?;
        let params = net.init_params(seed)?;
        Ok(Self {
            net,
            schedule: NoiseSchedule::new(schedule)?,
            params,
        })
    }

    pub fn from_params(arch: ArchConfig, schedule: ScheduleConfig, params: ParamStore<f32>) -> Result<Self> {
        Ok(Self {
            net: Denoiser::new(arch)?,
            schedule: NoiseSchedule::new(schedule)?,
            params,
        })
    }

    /// Base weights with gradients disabled, for inference-time learning.
    pub fn frozen(mut self) -> Self {
        self.params.set_trainable(false);
        self
    }

    pub fn generator<'a>(&'a self, lora: Option<&'a LoraAdapter>) -> Generator<'a> {
        Generator {
            net: &self.net,
            params: &self.params,
            lora,
            schedule: &self.schedule,
        }
    }

    pub fn frame_size(&self) -> usize {
        self.net.arch.frame_size
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(MODEL_ROLE);
        c.push_store("", &self.params);
        c.set_meta("arch", &self.net.arch)?;
        c.set_meta("schedule", &self.schedule.config)?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_role(MODEL_ROLE)?;
        let arch: ArchConfig = c.meta("arch")?;
        let schedule: ScheduleConfig = c.meta("schedule")?;
        let model = Self::from_params(arch, schedule, c.store("")?)?;
        let expected = model.net.init_params::<f32>(0)?;
        for id in expected.ids() {
            let name = expected.name(id);
            let got = model.params.get(name)?;
            if got.shape() != expected.value(id).shape() {
                return Err(crate::Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, architecture expects {:?}",
                    got.shape(),
                    expected.value(id).shape()
                )));
            }
        }
        if model.params.len() != expected.len() {
            return Err(crate::Error::Checkpoint(format!(
                "checkpoint holds {} tensors, architecture expects {}",
                model.params.len(),
                expected.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
