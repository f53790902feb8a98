use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};

const GRAD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Elements probed per parameter tensor; larger tensors are subsampled.
    pub max_elems_per_param: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_elems_per_param: usize::MAX,
            seed: 0,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub rel_err: f64,
    pub probed: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

fn eval_loss<B>(store: &ParamStore<f64>, build: &B) -> Result<f64>
where
    B: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, store);
    let loss = build(&mut tape, &bound)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares reverse-mode gradients with central finite differences.
///
/// For every trainable parameter the error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-5)` with `|.|` the
/// Euclidean norm over the probed elements. The floor turns the ratio into an
/// absolute test for gradients that vanish identically (a key bias under
/// softmax, say), where both sides are pure rounding noise. Parameters the loss does not reach must have a
/// zero numeric gradient and are otherwise reported with error 1.
pub fn grad_check<B>(store: &mut ParamStore<f64>, build: B, config: GradCheckConfig) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, store);
    let loss = build(&mut tape, &bound)?;
    tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = store
        .ids()
        .map(|id| tape.grad(bound.var(id)).map(|g| g.to_vec()))
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::new();
    for idx in 0..store.len() {
        let id = ParamId(idx);
        if !store.requires_grad(id) {
            continue;
        }
        let name = store.name(id).to_string();
        let n = store.value(id).numel();
        let probe: Vec<usize> = if n <= config.max_elems_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, config.max_elems_per_param).into_vec();
            v.sort_unstable();
            v
        };
        let mut num = Vec::with_capacity(probe.len());
        for &e in &probe {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + config.h;
            let lp = eval_loss(store, &build)?;
            store.value_mut(id).data_mut()[e] = orig - config.h;
            let lm = eval_loss(store, &build)?;
            store.value_mut(id).data_mut()[e] = orig;
            num.push((lp - lm) / (2.0 * config.h));
        }
        let ana: Vec<f64> = match &analytic[idx] {
            Some(g) => probe.iter().map(|&e| g[e]).collect(),
            None => {
                if num.iter().all(|&x| x == 0.0) {
                    continue;
                }
                vec![0.0; probe.len()]
            }
        };
        if ana.iter().chain(&num).any(|x| !x.is_finite()) {
            return Err(TensorError::NonFiniteGradient(name));
        }
        let diff = ana.iter().zip(&num).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm = num.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ana_norm = ana.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel_err = if analytic[idx].is_none() {
            1.0
        } else {
            diff / norm.max(ana_norm).max(GRAD_FLOOR)
        };
        entries.push(GradCheckEntry {
            name,
            rel_err,
            probed: probe.len(),
        });
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_err,
        tolerance: config.tolerance,
    })
}
