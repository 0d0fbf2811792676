//! Named parameter storage and the per-pass forward context.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::cell::RefCell;
use std::collections::HashMap;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Trainable parameters receive optimizer updates; non-trainable entries
    /// are buffers (batch-norm running statistics).
    pub trainable: bool,
}

/// All tensors of one model, keyed by stable hierarchical names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "parameter {} shape change",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in registration order (stable across runs for a fixed config).
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Standard normal via Box-Muller; deterministic given the RNG stream.
pub(crate) fn normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Registration helper used while building a network: owns the init RNG and
/// writes Kaiming fan-in weights, zero biases, unit norm scales.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha12Rng,
}

impl Init<'_> {
    /// He-normal fan-in initialization with an extra scale factor. Residual
    /// branch tails and the output head use a reduced scale so that stacked
    /// blocks keep unit-scale activations and the output sigmoid starts
    /// unsaturated; everything else uses scale 1.
    pub fn conv_weight_scaled(
        &mut self,
        name: String,
        c_out: usize,
        c_g: usize,
        k: usize,
        scale: f64,
    ) -> ParamId {
        let fan_in = (c_g * k * k) as f64;
        let std = (2.0 / fan_in).sqrt() * scale;
        let t = Tensor::from_fn([c_out, c_g, k, k], |_| normal(self.rng) * std);
        self.store.register(name, t, true)
    }

    pub fn zeros(&mut self, name: String, shape: Shape, trainable: bool) -> ParamId {
        self.store.register(name, Tensor::zeros(shape), trainable)
    }

    pub fn ones(&mut self, name: String, shape: Shape, trainable: bool) -> ParamId {
        self.store.register(name, Tensor::ones(shape), trainable)
    }
}

/// One forward pass: binds parameters onto the tape (once each), carries the
/// training flag, collects batch-norm running-stat updates and hands out
/// dropout masks.
pub struct Forward<'t, 's> {
    pub tape: &'t Tape,
    store: &'s ParamStore,
    training: bool,
    bindings: RefCell<Vec<(ParamId, Var<'t>)>>,
    bound: RefCell<HashMap<ParamId, Var<'t>>>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor)>>,
    dropout_rng: Option<RefCell<ChaCha12Rng>>,
}

impl<'t, 's> Forward<'t, 's> {
    /// Inference context: eval-mode normalization, no dropout.
    pub fn inference(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Forward {
            tape,
            store,
            training: false,
            bindings: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
            dropout_rng: None,
        }
    }

    /// Training context; `dropout_rng` drives mask sampling when dropout_p > 0.
    pub fn training(tape: &'t Tape, store: &'s ParamStore, dropout_rng: ChaCha12Rng) -> Self {
        Forward {
            tape,
            store,
            training: true,
            bindings: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
            dropout_rng: Some(RefCell::new(dropout_rng)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Var bound to this parameter, creating the leaf on first use.
    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let var = self.tape.leaf(self.store.get(id).clone());
        self.bound.borrow_mut().insert(id, var);
        self.bindings.borrow_mut().push((id, var));
        var
    }

    /// Raw parameter value (for eval-mode statistics).
    pub fn param_value(&self, id: ParamId) -> Tensor {
        self.store.get(id).clone()
    }

    /// All (parameter, leaf) bindings in first-use order.
    pub fn bindings(&self) -> Vec<(ParamId, Var<'t>)> {
        self.bindings.borrow().clone()
    }

    /// Queue a buffer write to apply after the step (running statistics).
    pub fn queue_buffer_update(&self, id: ParamId, value: Tensor) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    /// Inverted-dropout mask, or `None` when inactive (eval mode or p = 0).
    pub fn dropout_mask(&self, shape: Shape, p: f64) -> Option<Tensor> {
        if !self.training || p <= 0.0 {
            return None;
        }
        let rng_cell = self
            .dropout_rng
            .as_ref()
            .expect("training context requires a dropout rng");
        let mut rng = rng_cell.borrow_mut();
        let keep = 1.0 - p;
        Some(Tensor::from_fn(shape, |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        }))
    }

    /// Apply dropout to `x` if active.
    pub fn dropout(&self, x: Var<'t>, p: f64) -> Var<'t> {
        match self.dropout_mask(x.shape(), p) {
            Some(mask) => x.mul(self.tape.leaf(mask)),
            None => x,
        }
    }
}

pub(crate) fn contract(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::ContractViolation(msg()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registration_order_is_stable() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::scalar(1.0), true);
        let b = store.register("b", Tensor::scalar(2.0), false);
        let names: Vec<&str> = store.iter().map(|(_, e)| e.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(store.id_of("a"), Some(a));
        assert_eq!(store.id_of("b"), Some(b));
        assert!(!store.entry(b).trainable);
    }

    #[test]
    fn param_binds_once() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::scalar(3.0), true);
        let tape = Tape::new();
        let ctx = Forward::inference(&tape, &store);
        let v1 = ctx.param(id);
        let v2 = ctx.param(id);
        assert_eq!(v1.value().item(), 3.0);
        assert_eq!(ctx.bindings().len(), 1);
        // both handles point at the same node
        let sum = v1.add(v2);
        let grads = tape.backward(sum.sum_all());
        assert_eq!(grads.wrt(v1).item(), 2.0);
    }

    #[test]
    fn dropout_inactive_in_inference() {
        let store = ParamStore::new();
        let tape = Tape::new();
        let ctx = Forward::inference(&tape, &store);
        assert!(ctx.dropout_mask([1, 1, 4, 4], 0.5).is_none());
    }

    #[test]
    fn dropout_mask_is_inverted_scale() {
        let store = ParamStore::new();
        let tape = Tape::new();
        let ctx = Forward::training(&tape, &store, ChaCha12Rng::seed_from_u64(1));
        let mask = ctx.dropout_mask([1, 1, 32, 32], 0.25).unwrap();
        for &v in mask.data() {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12);
        }
        let zeros = mask.data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 100 && zeros < 500, "zeros {zeros}");
    }

    #[test]
    fn normal_moments_sane() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
