use std::collections::HashMap;

use brau_tensor::{Element, SplitMix64, Tensor};

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    NormAffine,
    /// Non-trainable state such as running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    /// Normal with std `1/sqrt(fan_in)`.
    FanIn(usize),
}

/// Named tensors in registration order.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            kinds: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Panics on a duplicate name.
    pub fn push(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let id = self.values.len();
        let prev = self.index.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.kinds.push(kind);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> std::ops::Range<ParamId> {
        0..self.values.len()
    }

    /// Scalar count of trainable entries.
    pub fn num_trainable(&self) -> usize {
        self.ids()
            .filter(|&i| self.kinds[i].trainable())
            .map(|i| self.values[i].numel())
            .sum()
    }

    /// Sum of trainable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.ids()
            .filter(|&i| self.kinds[i].trainable() && self.names[i].starts_with(prefix))
            .map(|i| self.values[i].numel())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Bitwise equality of names, kinds and values.
    pub fn bit_eq(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self.kinds == other.kinds
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.bit_eq(b))
    }
}

/// Registers parameters under a dotted name prefix, drawing initial values
/// from one seeded stream.
pub struct Builder<'a, T: Element> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut SplitMix64,
    prefix: String,
}

impl<'a, T: Element> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut SplitMix64) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn child(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = self.join(name);
        Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], kind: ParamKind, init: Init) -> ParamId {
        let rng = &mut *self.rng;
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::TruncNormal(std) => {
                Tensor::from_fn(shape, |_| T::from_f64_lossy(std * rng.truncated_normal()))
            }
            Init::FanIn(fan_in) => {
                let std = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::from_f64_lossy(std * rng.normal()))
            }
        };
        let full = self.join(name);
        self.store.push(full, kind, value)
    }
}
