use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct Param<F> {
    name: String,
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
}

/// Named trainable tensors with gradient slots, in insertion order.
#[derive(Debug)]
pub struct ParamStore<F> {
    id: u64,
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Element> Clone for ParamStore<F> {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl<F: Element> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            requires_grad: true,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .map(ParamId)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        Ok(self.value(self.id(name)?))
    }

    pub fn grad(&self, id: ParamId) -> Option<&[F]> {
        self.params[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: ParamId) -> bool {
        self.params[id.0].requires_grad
    }

    /// Marks every parameter trainable or frozen. Frozen parameters enter
    /// tapes as constants, so no gradient is ever computed for them.
    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.requires_grad = trainable;
            if !trainable {
                p.grad = None;
            }
        }
    }

    pub fn set_param_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.requires_grad = trainable;
        if !trainable {
            p.grad = None;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds the gradients a finished backward pass computed for this store's
    /// leaves into the parameter gradient slots.
    pub fn accumulate_grads(&mut self, tape: &Tape<F>) -> Result<()> {
        for (pid, grad) in tape.param_grads(self.id)? {
            let p = &mut self.params[pid];
            if !p.requires_grad {
                continue;
            }
            match &mut p.grad {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(grad) {
                        *a += *b;
                    }
                }
                None => p.grad = Some(grad.to_vec()),
            }
        }
        Ok(())
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Option<Vec<F>> {
        &mut self.params[id.0].grad
    }

    /// FNV-1a over names, shapes and raw value bits.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for d in p.value.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                eat(&x.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<G: Element>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let id = out
                .insert(p.name.clone(), p.value.cast())
                .expect("names are unique");
            out.set_param_trainable(id, p.requires_grad);
        }
        out
    }
}

/// Tape handles for every parameter of one store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    names: HashMap<String, usize>,
}

impl Bound {
    pub fn new<F: Element>(tape: &mut Tape<F>, store: &ParamStore<F>) -> Self {
        let vars = store.ids().map(|id| tape.param(store, id)).collect();
        let names = store
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Self { vars, names }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains_key(name)
    }
}
