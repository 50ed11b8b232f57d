//! Named parameter storage and per-forward binding onto a tape.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered map from parameter name to value. Insertion order is the
/// canonical order for checkpoints and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let (index, _) = self.entries.insert_full(name.into(), value);
        ParamId(index)
    }

    /// Glorot-uniform initialised matrix-like parameter; fan-in/out are the
    /// last two extents.
    pub fn glorot(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut ChaCha8Rng) -> ParamId {
        let r = shape.len();
        let (fan_in, fan_out) = if r >= 2 {
            let receptive: usize = shape[..r - 2].iter().product();
            (shape[r - 2] * receptive, shape[r - 1] * receptive)
        } else {
            (shape[0], shape[0])
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::dim("set_param", format!("{:?} vs {:?}", slot.shape(), value.shape())));
        }
        *slot = value;
        Ok(())
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.values_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Replaces every value by the entry of the same name in `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, slot) in self.entries.iter_mut() {
            let src = other
                .entries
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if src.shape() != slot.shape() {
                return Err(Error::dim(
                    "load_params",
                    format!("{name}: {:?} vs {:?}", slot.shape(), src.shape()),
                ));
            }
            *slot = src.clone();
        }
        Ok(())
    }

    /// Puts every parameter on `tape` as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding { vars: self.entries.values().map(|t| tape.variable(t.clone())).collect() }
    }

    /// Puts every parameter on `tape` as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        Binding { vars: self.entries.values().map(|t| tape.constant(t.clone())).collect() }
    }
}

/// Tape handles for one forward pass, aligned with the store order.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order; parameters that did not reach the loss get
    /// zeros.
    pub fn collect_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.entries.values())
            .map(|(&v, p)| grads.get_or_zeros(v, p))
            .collect()
    }
}
