//! Pre-training of the base weights with the masked diffusion loss.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use slowfast_tensor::{Adam, AdamConfig, Bound, ParamStore, Tape, Tensor};

use crate::diffusion::{masked_loss, DiffusionExample};
use crate::error::{Error, Result};
use crate::gridworld::{Action, Dataset};
use crate::metrics;
use crate::model::Model;
use crate::persist::Checkpoint;
use crate::rng::{self, tags};
use crate::video::LatentVideo;

pub const TRAIN_STATE_ROLE: &str = "train_state";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlowConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Conditioning lengths drawn per batch.
    pub f_p_choices: Vec<usize>,
    pub log_every: u64,
    /// Fraction of batches trained without conditioning: every frame noised,
    /// zero indicator and the null action, as in a Temp-LoRA update.
    #[serde(default)]
    pub p_uncond: f64,
}

impl Default for SlowConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            steps: 20_000,
            seed: 0,
            f_p_choices: vec![1, 2, 4],
            log_every: 100,
            p_uncond: 0.1,
        }
    }
}

impl SlowConfig {
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.batch_size == 0 || self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("p_uncond {} must lie in [0, 1]", self.p_uncond)));
        }
        let max_past = dataset.samples.iter().map(|s| s.f_p()).max().unwrap_or(0);
        if self.f_p_choices.is_empty() || self.f_p_choices.iter().any(|&f| f == 0 || f > max_past) {
            return Err(Error::Config(format!(
                "f_p choices {:?} must lie in 1..={max_past}",
                self.f_p_choices
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
}

pub fn write_loss_csv(path: &Path, points: &[LossPoint]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::from("step,loss\n");
    for p in points {
        body.push_str(&format!("{},{}\n", p.step, p.loss));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Resumable training state. Each step draws its batch from a stream keyed
/// by `(seed, step)`, so resuming needs only weights, moments and the step.
pub struct SlowTrainer<'a> {
    pub model: Model,
    pub config: SlowConfig,
    dataset: &'a Dataset,
    optimizer: Adam<f32>,
    step: u64,
    losses: Vec<f32>,
}

impl<'a> SlowTrainer<'a> {
    pub fn new(model: Model, dataset: &'a Dataset, config: SlowConfig) -> Result<Self> {
        config.validate(dataset)?;
        if dataset.is_empty() {
            return Err(Error::Empty("training dataset"));
        }
        if dataset.frame_size() != model.frame_size() {
            return Err(Error::Config(format!(
                "dataset frames are {}px, model expects {}px",
                dataset.frame_size(),
                model.frame_size()
            )));
        }
        let mut model = model;
        model.params.set_trainable(true);
        let optimizer = Adam::new(AdamConfig::with_lr(config.lr), &model.params);
        Ok(Self {
            model,
            config,
            dataset,
            optimizer,
            step: 0,
            losses: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Per-step training losses so far.
    pub fn losses(&self) -> &[f32] {
        &self.losses
    }

    /// Window means of the loss, one point per `log_every` steps (and one
    /// for the first step).
    pub fn loss_curve(&self) -> Vec<LossPoint> {
        let every = self.config.log_every.max(1) as usize;
        let mut out = Vec::new();
        if let Some(&first) = self.losses.first() {
            out.push(LossPoint { step: 0, loss: first as f64 });
        }
        for end in (every..=self.losses.len()).step_by(every) {
            let w = &self.losses[end - every..end];
            out.push(LossPoint {
                step: end as u64,
                loss: w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64,
            });
        }
        out
    }

    fn batch(&self) -> (Vec<DiffusionExample>, Vec<usize>) {
        let mut r = rng::stream(self.config.seed, &[tags::BATCH, self.step]);
        let f_p = self.config.f_p_choices[r.random_range(0..self.config.f_p_choices.len())];
        let uncond = self.config.p_uncond > 0.0 && r.random_bool(self.config.p_uncond);
        let mut ids = Vec::with_capacity(self.config.batch_size);
        while ids.len() < self.config.batch_size {
            let i = r.random_range(0..self.dataset.len());
            if self.dataset.samples[i].f_p() >= f_p {
                ids.push(i);
            }
        }
        let batch = ids
            .iter()
            .map(|&i| {
                let s = &self.dataset.samples[i];
                let frames = self.dataset.frames(i);
                let past = frames.slice(s.f_p() - f_p, f_p + s.future.len());
                if uncond {
                    DiffusionExample::draw(past, 0, Action::Null, &self.model.schedule, &mut r)
                } else {
                    DiffusionExample::draw(past, f_p, s.action, &self.model.schedule, &mut r)
                }
            })
            .collect();
        (batch, ids)
    }

    /// One optimiser step; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f32> {
        let (batch, ids) = self.batch();
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &self.model.params);
        let out = masked_loss(&mut tape, &self.model.net, &p, None, &self.model.schedule, &batch)?;
        let loss = tape.value(out.loss).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                samples: ids,
            });
        }
        tape.backward(out.loss)?;
        self.model.params.accumulate_grads(&tape)?;
        self.optimizer.step(&mut self.model.params)?;
        self.model.params.zero_grads();
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    /// Trains until `config.steps`, calling `on_step` after every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            self.train_step()?;
            on_step(self)?;
        }
        Ok(())
    }

    /// Weights, Adam moments, step counter and loss history.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = self.model.to_checkpoint()?;
        c.header.role = TRAIN_STATE_ROLE.into();
        let params = &self.model.params;
        for (i, id) in params.ids().enumerate() {
            let shape = params.value(id).shape().to_vec();
            let name = params.name(id);
            c.push(format!("adam.m.{name}"), Tensor::new(&shape, self.optimizer.first_moments()[i].clone())?);
            c.push(format!("adam.v.{name}"), Tensor::new(&shape, self.optimizer.second_moments()[i].clone())?);
        }
        if !self.losses.is_empty() {
            c.push("history.loss", Tensor::new(&[self.losses.len()], self.losses.clone())?);
        }
        c.set_meta("step", self.step)?;
        c.set_meta("adam_step", self.optimizer.step_count())?;
        c.set_meta("slow_config", &self.config)?;
        Ok(c)
    }

    pub fn resume(c: &Checkpoint, dataset: &'a Dataset) -> Result<Self> {
        c.expect_role(TRAIN_STATE_ROLE)?;
        let mut as_model = c.clone();
        as_model.header.role = crate::model::MODEL_ROLE.into();
        let keep: Vec<bool> = as_model
            .header
            .tensors
            .iter()
            .map(|e| !e.name.starts_with("adam.") && !e.name.starts_with("history."))
            .collect();
        let mut it = keep.iter();
        as_model.header.tensors.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        as_model.tensors.retain(|_| *it.next().unwrap());
        let model = Model::from_checkpoint(&as_model)?;
        let config: SlowConfig = c.meta("slow_config")?;
        let mut t = Self::new(model, dataset, config)?;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for id in t.model.params.ids() {
            let name = t.model.params.name(id);
            let get = |k: &str| {
                c.get(&format!("adam.{k}.{name}"))
                    .map(|x| x.data().to_vec())
                    .ok_or_else(|| Error::Checkpoint(format!("missing Adam state for `{name}`")))
            };
            m.push(get("m")?);
            v.push(get("v")?);
        }
        t.optimizer = Adam::from_parts(AdamConfig::with_lr(t.config.lr), c.meta("adam_step")?, m, v);
        t.step = c.meta("step")?;
        t.losses = c.get("history.loss").map(|x| x.data().to_vec()).unwrap_or_default();
        Ok(t)
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

/// Convenience wrapper: trains from `model` and returns the trained model
/// with its loss curve.
pub fn train_slow(model: Model, dataset: &Dataset, config: SlowConfig) -> Result<(Model, Vec<LossPoint>)> {
    let mut t = SlowTrainer::new(model, dataset, config)?;
    t.run(|_| Ok(()))?;
    let curve = t.loss_curve();
    Ok((t.into_model(), curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub masked_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Constant mid-grey prediction.
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    /// Repeating the last conditioning frame.
    pub copy_last_psnr: f64,
}

/// One-chunk generation quality on held-out samples with `f_p` conditioning
/// frames, plus the masked loss at fixed random timesteps.
pub fn eval_validation(model: &Model, heldout: &Dataset, f_p: usize, max_samples: usize, seed: u64) -> Result<ValidationReport> {
    let ids: Vec<usize> = (0..heldout.len())
        .filter(|&i| heldout.samples[i].f_p() >= f_p)
        .take(max_samples)
        .collect();
    if ids.is_empty() {
        return Err(Error::Empty("validation samples"));
    }
    let gen = model.generator(None);
    let size = heldout.frame_size();
    let mut acc = [0.0f64; 6];
    let mut r = rng::stream(seed, &[tags::EVAL]);
    for &i in &ids {
        let s = &heldout.samples[i];
        let frames = heldout.frames(i);
        let cond = frames.slice(s.f_p() - f_p, f_p);
        let target = frames.slice(s.f_p(), s.future.len());
        let pred = gen.sample_chunk(&cond, s.action, target.len(), rng::derive(seed, &[i as u64]))?;
        let (p, q) = metrics::video_psnr_ssim(&pred, &target)?;
        let gray = LatentVideo::zeros(target.len(), size, size);
        let (bp, bq) = metrics::video_psnr_ssim(&gray, &target)?;
        let mut last = LatentVideo::empty(size, size);
        for _ in 0..target.len() {
            last.push_frame(cond.frame(f_p - 1));
        }
        let (cp, _) = metrics::video_psnr_ssim(&last, &target)?;
        let ex = DiffusionExample::draw(cond.concat(&target), f_p, s.action, &model.schedule, &mut r);
        let mut tape = Tape::new();
        let p_b = Bound::new(&mut tape, &model.params);
        let out = masked_loss(&mut tape, &model.net, &p_b, None, &model.schedule, &[ex])?;
        acc[0] += tape.value(out.loss).data()[0] as f64;
        for (a, v) in acc[1..].iter_mut().zip([p, q, bp, bq, cp]) {
            *a += v;
        }
    }
    let n = ids.len() as f64;
    Ok(ValidationReport {
        samples: ids.len(),
        masked_loss: acc[0] / n,
        psnr: acc[1] / n,
        ssim: acc[2] / n,
        baseline_psnr: acc[3] / n,
        baseline_ssim: acc[4] / n,
        copy_last_psnr: acc[5] / n,
    })
}

/// Hash of the base weights, for reproducibility checks.
pub fn params_hash(p: &ParamStore<f32>) -> u64 {
    p.content_hash()
}
