use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Reject non-finite gradients instead of applying them.
    pub checked: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checked: true,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Moment buffers are indexed like the store the
/// optimiser was created for.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Element> Adam<F> {
    pub fn new(config: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros: Vec<Vec<F>> = store
            .ids()
            .map(|id| vec![F::zero(); store.value(id).numel()])
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Rebuilds an optimiser from saved moments, e.g. when resuming training.
    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<Vec<F>>, v: Vec<Vec<F>>) -> Self {
        Self { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<F>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<F>] {
        &self.v
    }

    /// Applies one update to every trainable parameter that holds a gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if !(self.config.lr >= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "adam_step",
                msg: format!("learning rate {} must be non-negative", self.config.lr),
            });
        }
        if self.m.len() != store.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam_step",
                msg: format!("optimiser tracks {} tensors, store has {}", self.m.len(), store.len()),
            });
        }
        if self.config.checked {
            for id in store.ids() {
                if let Some(g) = store.grad(id) {
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(TensorError::NonFiniteGradient(store.name(id).to_string()));
                    }
                }
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64_lossy(c.beta1), F::from_f64_lossy(c.beta2));
        let (ob1, ob2) = (F::one() - b1, F::one() - b2);
        let lr = F::from_f64_lossy(c.lr);
        let (bc1, bc2) = (F::from_f64_lossy(bc1), F::from_f64_lossy(bc2));
        let eps = F::from_f64_lossy(c.eps);
        for idx in 0..store.len() {
            let id = ParamId(idx);
            if !store.requires_grad(id) {
                continue;
            }
            let Some(g) = store.grad_mut(id).take() else { continue };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            {
                let p = store.value_mut(id).data_mut();
                if p.len() != g.len() || m.len() != g.len() {
                    return Err(TensorError::InvalidArgument {
                        op: "adam_step",
                        msg: format!("gradient length mismatch for parameter {idx}"),
                    });
                }
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + ob1 * g[i];
                    v[i] = b2 * v[i] + ob2 * g[i] * g[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    p[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
            *store.grad_mut(id) = Some(g);
        }
        Ok(())
    }
}
