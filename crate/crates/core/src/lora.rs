//! Low-rank adapters: `W' = W + s * A B^T`. Convolution kernels
//! `[out, in, kh, kw]` are adapted as `[out, in * kh * kw]` matrices.

use slowfast_tensor::{Adam, AdamConfig, Bound, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::{self, tags};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Defaults to `rank`, giving a scale of one.
    pub alpha: Option<f64>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 32,
            alpha: None,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64) / self.rank as f64
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraPoint {
    /// Base layer name; the weight is `{name}.w`, viewed as `[rows, cols]`.
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

pub fn factor_a(point: &str) -> String {
    format!("{point}.lora_a")
}

pub fn factor_b(point: &str) -> String {
    format!("{point}.lora_b")
}

/// Adapter factors for a set of injection points. `A` is `[rows, rank]`,
/// `B` is `[cols, rank]`.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scale: f64,
    pub points: Vec<LoraPoint>,
    pub factors: ParamStore<f32>,
}

impl LoraAdapter {
    /// `A` is fan-in uniform, `B` is zero, so the adapter starts as identity.
    pub fn init(base: &ParamStore<f32>, points: &[String], config: LoraConfig, seed: u64) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        let mut resolved = Vec::with_capacity(points.len());
        for name in points {
            let w = base
                .get(&format!("{name}.w"))
                .map_err(|_| Error::NotInjectionPoint(name.clone()))?;
            let (rows, cols) = match *w.shape() {
                [rows, cols] => (rows, cols),
                [rows, ci, kh, kw] => (rows, ci * kh * kw),
                _ => return Err(Error::NotInjectionPoint(name.clone())),
            };
            if config.rank > rows.min(cols) {
                return Err(Error::RankTooLarge {
                    point: name.clone(),
                    rank: config.rank,
                    m: rows,
                    n: cols,
                });
            }
            resolved.push(LoraPoint {
                name: name.clone(),
                rows,
                cols,
            });
        }
        let mut factors = ParamStore::new();
        let bound = 1.0 / (config.rank as f64).sqrt();
        for (i, p) in resolved.iter().enumerate() {
            let mut r = rng::stream(seed, &[tags::LORA, i as u64]);
            factors.insert(factor_a(&p.name), rng::uniform(&mut r, &[p.rows, config.rank], bound))?;
            factors.insert(factor_b(&p.name), Tensor::zeros(&[p.cols, config.rank]))?;
        }
        Ok(Self {
            rank: config.rank,
            scale: config.scale(),
            points: resolved,
            factors,
        })
    }

    pub fn point_names(&self) -> Vec<String> {
        self.points.iter().map(|p| p.name.clone()).collect()
    }

    pub fn a(&self, point: &str) -> Result<&Tensor<f32>> {
        Ok(self.factors.get(&factor_a(point))?)
    }

    pub fn b(&self, point: &str) -> Result<&Tensor<f32>> {
        Ok(self.factors.get(&factor_b(point))?)
    }

    /// `s * A B^T` for one point, accumulated in f64.
    pub fn delta(&self, point: &LoraPoint) -> Result<Vec<f64>> {
        let a = self.a(&point.name)?.data();
        let b = self.b(&point.name)?.data();
        let r = self.rank;
        let mut out = vec![0.0f64; point.rows * point.cols];
        for i in 0..point.rows {
            for j in 0..point.cols {
                let mut acc = 0.0f64;
                for k in 0..r {
                    acc += a[i * r + k] as f64 * b[j * r + k] as f64;
                }
                out[i * point.cols + j] = self.scale * acc;
            }
        }
        Ok(out)
    }

    fn fold(&self, base: &ParamStore<f32>, sign: f64) -> Result<ParamStore<f32>> {
        let mut out = base.clone();
        for p in &self.points {
            let d = self.delta(p)?;
            let id = out.id(&format!("{}.w", p.name))?;
            for (w, dv) in out.value_mut(id).data_mut().iter_mut().zip(d) {
                *w = (*w as f64 + sign * dv) as f32;
            }
        }
        Ok(out)
    }

    /// Base weights with the adapter folded in.
    pub fn merge(&self, base: &ParamStore<f32>) -> Result<ParamStore<f32>> {
        self.fold(base, 1.0)
    }

    pub fn unmerge(&self, merged: &ParamStore<f32>) -> Result<ParamStore<f32>> {
        self.fold(merged, -1.0)
    }

    /// Whether two adapters target the same points with the same shapes.
    pub fn compatible(&self, other: &LoraAdapter) -> bool {
        self.rank == other.rank && self.points == other.points
    }

    /// Dense layer output for a batch `x` of shape `[N, cols]`.
    pub fn apply_dense(&self, base: &ParamStore<f32>, point: &str, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let bb = Bound::new(&mut tape, base);
        let lb = Bound::new(&mut tape, &self.factors);
        let binding = LoraBinding {
            bound: &lb,
            scale: self.scale,
        };
        let xv = tape.constant(x.clone());
        let y = dense(&mut tape, &bb, Some(&binding), point, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// Adapter factors bound onto a tape.
pub struct LoraBinding<'a> {
    pub bound: &'a Bound,
    pub scale: f64,
}

/// `x W^T + b` plus the adapter term when `point` is adapted. `x` is `[N, cols]`.
pub fn dense<F: slowfast_tensor::Element>(
    tape: &mut Tape<F>,
    params: &Bound,
    lora: Option<&LoraBinding>,
    point: &str,
    x: Var,
) -> Result<Var> {
    let w = params.get(&format!("{point}.w"))?;
    let b = params.get(&format!("{point}.b"))?;
    let mut y = tape.matmul_t(x, w, false, true)?;
    y = tape.add(y, b)?;
    if let Some(l) = lora {
        let an = factor_a(point);
        if l.bound.contains(&an) {
            let a = l.bound.get(&an)?;
            let bf = l.bound.get(&factor_b(point))?;
            let xb = tape.matmul(x, bf)?;
            let mut d = tape.matmul_t(xb, a, false, true)?;
            if l.scale != 1.0 {
                d = tape.scale(d, F::from_f64_lossy(l.scale))?;
            }
            y = tape.add(y, d)?;
        }
    }
    Ok(y)
}

/// The weight of `point` with the adapter folded in on the tape, reshaped to
/// the base weight's shape. Without an adapter for `point` this is the base
/// weight itself.
pub fn adapted_weight<F: slowfast_tensor::Element>(
    tape: &mut Tape<F>,
    params: &Bound,
    lora: Option<&LoraBinding>,
    point: &str,
) -> Result<Var> {
    let w = params.get(&format!("{point}.w"))?;
    let Some(l) = lora else { return Ok(w) };
    let an = factor_a(point);
    if !l.bound.contains(&an) {
        return Ok(w);
    }
    let a = l.bound.get(&an)?;
    let bf = l.bound.get(&factor_b(point))?;
    let mut d = tape.matmul_t(a, bf, false, true)?;
    if l.scale != 1.0 {
        d = tape.scale(d, F::from_f64_lossy(l.scale))?;
    }
    let shape = tape.shape(w).to_vec();
    let d = tape.reshape(d, &shape)?;
    Ok(tape.add(w, d)?)
}

/// Temp-LoRA parameters together with their optimiser state.
#[derive(Clone, Debug)]
pub struct TempLoraState {
    pub adapter: LoraAdapter,
    pub optimizer: Adam<f32>,
    pub steps: u64,
}

impl TempLoraState {
    pub fn new(adapter: LoraAdapter, lr: f64) -> Self {
        let optimizer = Adam::new(AdamConfig::with_lr(lr), &adapter.factors);
        Self {
            adapter,
            optimizer,
            steps: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.config.lr
    }

    /// Replaces the factors, keeping the learning rate and clearing moments.
    pub fn restore_factors(&mut self, adapter: LoraAdapter) -> Result<()> {
        if !self.adapter.compatible(&adapter) {
            return Err(Error::Checkpoint(
                "Temp-LoRA snapshot targets different injection points or rank".into(),
            ));
        }
        let lr = self.lr();
        *self = Self::new(adapter, lr);
        Ok(())
    }
}

pub const TEMPLORA_ROLE: &str = "templora";

impl LoraAdapter {
    /// Factors plus rank, scale and point list; optimiser state is not kept.
    pub fn to_checkpoint(&self) -> Result<crate::persist::Checkpoint> {
        let mut c = crate::persist::Checkpoint::new(TEMPLORA_ROLE);
        c.push_store("", &self.factors);
        c.set_meta("rank", self.rank)?;
        c.set_meta("scale", self.scale)?;
        c.set_meta("points", &self.points)?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &crate::persist::Checkpoint) -> Result<Self> {
        c.expect_role(TEMPLORA_ROLE)?;
        let rank: usize = c.meta("rank")?;
        let points: Vec<LoraPoint> = c.meta("points")?;
        let factors = c.store("")?;
        for p in &points {
            let a = factors.get(&factor_a(&p.name))?;
            let b = factors.get(&factor_b(&p.name))?;
            if a.shape() != [p.rows, rank] || b.shape() != [p.cols, rank] {
                return Err(Error::Checkpoint(format!("factor shapes of `{}` do not match", p.name)));
            }
        }
        Ok(Self {
            rank,
            scale: c.meta("scale")?,
            points,
            factors,
        })
    }
}
