//! Noise schedule, masked corruption, training loss and the chunk sampler.

use serde::{Deserialize, Serialize};
use slowfast_tensor::{Bound, ParamStore, Tape, Tensor, Var};

use crate::denoiser::{Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::gridworld::{Action, ChunkSpec};
use crate::lora::{LoraAdapter, LoraBinding};
use crate::rng::{self, tags};
use crate::video::LatentVideo;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    /// 0 gives deterministic DDIM, 1 matches ancestral sampling variance.
    pub eta: f64,
    /// Clip the clean-frame estimate to `[-1, 1]` inside every update. Off
    /// by default: the latent is then only clamped after the last step.
    #[serde(default)]
    pub clip_denoised: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 50,
            eta: 0.0,
            clip_denoised: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas; cumulative products are kept in f64.
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let t = config.steps;
        if t < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {t}")));
        }
        if !(0.0 < config.beta_start && config.beta_start <= config.beta_end && config.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1 (got {}, {})",
                config.beta_start, config.beta_end
            )));
        }
        if config.sample_steps == 0 || config.sample_steps > t {
            return Err(Error::Config(format!(
                "sample_steps {} must lie in 1..={t}",
                config.sample_steps
            )));
        }
        if !(0.0..=1.0).contains(&config.eta) {
            return Err(Error::Config(format!("eta {} must lie in [0, 1]", config.eta)));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| config.beta_start + (config.beta_end - config.beta_start) * i as f64 / (t - 1) as f64)
            .collect();
        let mut acc = 1.0f64;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            config,
            betas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative signal fraction; `alpha_bar(0)` is 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Descending, evenly strided timesteps starting at `T`.
    pub fn sampling_timesteps(&self) -> Vec<usize> {
        let t = self.steps();
        let s = self.config.sample_steps;
        let stride = t / s;
        (0..s).map(|i| t - i * stride).collect()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `sqrt(abar) z0 + sqrt(1 - abar) eps`, elementwise.
    pub fn forward_diffuse(&self, z0: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>> {
        self.check_t(t)?;
        if z0.len() != eps.len() {
            return Err(Error::Config(format!(
                "noise has {} values, clean input {}",
                eps.len(),
                z0.len()
            )));
        }
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z0
            .iter()
            .zip(eps)
            .map(|(&z, &e)| (a * z as f64 + b * e as f64) as f32)
            .collect())
    }

    /// Keeps the first `f_p` frames clean and corrupts the rest with `eps`
    /// (which holds exactly `f_g` frames).
    pub fn masked_forward(&self, z0: &LatentVideo, spec: ChunkSpec, t: usize, eps: &LatentVideo) -> Result<LatentVideo> {
        spec.validate()?;
        if z0.len() != spec.total() {
            return Err(Error::FrameCount {
                got: z0.len(),
                expected: spec.total(),
            });
        }
        if eps.len() != spec.f_g || eps.frame_len() != z0.frame_len() {
            return Err(Error::FrameCount {
                got: eps.len(),
                expected: spec.f_g,
            });
        }
        let mut out = z0.slice(0, spec.f_p);
        let noisy = self.forward_diffuse(z0.slice(spec.f_p, spec.f_g).data(), t, eps.data())?;
        out.append(&LatentVideo::new(spec.f_g, z0.height(), z0.width(), noisy)?);
        Ok(out)
    }
}

/// One training item: `clean` frames whose first `cond` frames stay clean.
#[derive(Clone, Debug)]
pub struct DiffusionExample {
    pub clean: LatentVideo,
    pub cond: usize,
    pub action: Action,
    pub t: usize,
    /// Noise for the `clean.len() - cond` corrupted frames.
    pub noise: LatentVideo,
}

impl DiffusionExample {
    /// Draws `t` uniformly from `1..=T` and standard normal noise.
    pub fn draw(clean: LatentVideo, cond: usize, action: Action, schedule: &NoiseSchedule, rng: &mut impl rand::Rng) -> Self {
        let t = rng.random_range(1..=schedule.steps());
        let n = clean.len() - cond;
        let noise = rng::gaussian::<f32>(rng, &[n, 3, clean.height(), clean.width()]);
        Self {
            noise: LatentVideo::from_tensor(&noise).expect("gaussian video shape"),
            clean,
            cond,
            action,
            t,
        }
    }
}

pub struct LossOutput {
    pub loss: Var,
    pub prediction: Var,
    pub input: Var,
}

/// Mean squared error between true and predicted noise over the corrupted
/// frames only. All examples must share frame counts.
pub fn masked_loss(
    tape: &mut Tape<f32>,
    net: &Denoiser,
    params: &Bound,
    lora: Option<&LoraBinding>,
    schedule: &NoiseSchedule,
    batch: &[DiffusionExample],
) -> Result<LossOutput> {
    let first = batch.first().ok_or(Error::Empty("empty batch"))?;
    let (f, cond) = (first.clean.len(), first.cond);
    if cond >= f {
        return Err(Error::Config(format!("{cond} conditioning frames leave nothing to denoise in {f}")));
    }
    let (h, w) = (first.clean.height(), first.clean.width());
    let mut input = LatentVideo::empty(h, w);
    let mut noise = LatentVideo::empty(h, w);
    let mut indicator = Vec::with_capacity(batch.len() * f);
    for ex in batch {
        if ex.clean.len() != f || ex.cond != cond || ex.noise.len() != f - cond {
            return Err(Error::FrameCount {
                got: ex.clean.len(),
                expected: f,
            });
        }
        input.append(&ex.clean.slice(0, cond));
        let noisy = schedule.forward_diffuse(ex.clean.slice(cond, f - cond).data(), ex.t, ex.noise.data())?;
        input.append(&LatentVideo::new(f - cond, h, w, noisy)?);
        noise.append(&ex.noise);
        indicator.extend((0..f).map(|i| if i < cond { 1.0 } else { 0.0 }));
    }
    let b = batch.len();
    let x = tape.constant(Tensor::new(&[b, f, 3, h, w], input.data().to_vec())?);
    let timesteps: Vec<usize> = batch.iter().map(|e| e.t).collect();
    let actions: Vec<Action> = batch.iter().map(|e| e.action).collect();
    let alpha_bars: Vec<f64> = timesteps.iter().map(|&t| schedule.alpha_bar(t)).collect();
    let pred = net.forward(
        tape,
        params,
        lora,
        x,
        &Conditioning {
            indicator: &indicator,
            timesteps: &timesteps,
            alpha_bars: &alpha_bars,
            actions: &actions,
        },
    )?;
    let gen = tape.slice(pred, 1, cond, f - cond)?;
    let target = tape.constant(Tensor::new(&[b, f - cond, 3, h, w], noise.data().to_vec())?);
    let loss = tape.mse(gen, target)?;
    Ok(LossOutput {
        loss,
        prediction: pred,
        input: x,
    })
}

/// Parameters used for generation: frozen base weights plus an optional adapter.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub net: &'a Denoiser,
    pub params: &'a ParamStore<f32>,
    pub lora: Option<&'a LoraAdapter>,
    pub schedule: &'a NoiseSchedule,
}

impl Generator<'_> {
    /// Noise prediction for a single stack `[F, 3, H, W]`.
    pub fn predict_noise(&self, frames: &LatentVideo, indicator: &[f32], t: usize, action: Action) -> Result<LatentVideo> {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, self.params);
        let lb = self.lora.map(|a| Bound::new(&mut tape, &a.factors));
        let binding = self.lora.zip(lb.as_ref()).map(|(a, b)| LoraBinding {
            bound: b,
            scale: a.scale,
        });
        if t == 0 || t > self.schedule.steps() {
            return Err(Error::Config(format!("timestep {t} outside 1..={}", self.schedule.steps())));
        }
        let [f, c, h, w] = frames.shape();
        let x = tape.constant(Tensor::new(&[1, f, c, h, w], frames.data().to_vec())?);
        let y = self.net.forward(
            &mut tape,
            &p,
            binding.as_ref(),
            x,
            &Conditioning {
                indicator,
                timesteps: &[t],
                alpha_bars: &[self.schedule.alpha_bar(t)],
                actions: &[action],
            },
        )?;
        LatentVideo::new(f, h, w, tape.value(y).data().to_vec())
    }

    /// Generates `f_g` frames following the clean conditioning frames.
    /// Predictions at conditioning positions are discarded and the clean
    /// frames are re-inserted at every step.
    pub fn sample_chunk(&self, cond: &LatentVideo, action: Action, f_g: usize, seed: u64) -> Result<LatentVideo> {
        let spec = ChunkSpec::new(cond.len(), f_g)?;
        let (h, w) = (cond.height(), cond.width());
        let mut rng = rng::stream(seed, &[tags::SAMPLE]);
        let mut z = LatentVideo::from_tensor(&rng::gaussian::<f32>(&mut rng, &[f_g, 3, h, w]))?;
        let indicator: Vec<f32> = (0..spec.total()).map(|i| if i < spec.f_p { 1.0 } else { 0.0 }).collect();
        let steps = self.schedule.sampling_timesteps();
        let eta = self.schedule.config.eta;
        for (k, &t) in steps.iter().enumerate() {
            let input = cond.concat(&z);
            let eps = self.predict_noise(&input, &indicator, t, action)?.slice(spec.f_p, f_g);
            let ab = self.schedule.alpha_bar(t);
            let ab_prev = steps.get(k + 1).map_or(1.0, |&tp| self.schedule.alpha_bar(tp));
            let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
            let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
            let extra = (sigma > 0.0).then(|| rng::gaussian::<f32>(&mut rng, &[f_g, 3, h, w]));
            let clip = self.schedule.config.clip_denoised;
            for (i, (zv, &ev)) in z.data_mut().iter_mut().zip(eps.data()).enumerate() {
                let (zf, mut ef) = (*zv as f64, ev as f64);
                let mut x0 = (zf - (1.0 - ab).sqrt() * ef) / ab.sqrt();
                if clip && !(-1.0..=1.0).contains(&x0) {
                    x0 = x0.clamp(-1.0, 1.0);
                    ef = (zf - ab.sqrt() * x0) / (1.0 - ab).sqrt();
                }
                let mut next = ab_prev.sqrt() * x0 + dir * ef;
                if let Some(n) = &extra {
                    next += sigma * n.data()[i] as f64;
                }
                *zv = next as f32;
            }
            if !z.data().iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteLatent { step: k });
            }
        }
        z.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        Ok(z)
    }
}
