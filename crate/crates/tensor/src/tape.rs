use std::cell::RefCell;
use std::fmt;

use crate::error::{Result, TensorError};
use crate::scalar::Element;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Every operation the tape can record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddBias,
    Affine,
    Square,
    Log,
    Relu,
    Gelu,
    Sigmoid,
    Clamp,
    SumAll,
    MeanAll,
    SumLeading,
    Reshape,
    Permute,
    Concat,
    Gather,
    MatMul,
    MatMulT,
    Softmax,
    LayerNorm,
    BatchNorm,
    BatchNormInfer,
    Conv2d,
    Custom,
}

impl OpKind {
    /// Differentiable kinds with a built-in backward.
    pub const DIFFERENTIABLE: [OpKind; 26] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::AddBias,
        OpKind::Affine,
        OpKind::Square,
        OpKind::Log,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::Clamp,
        OpKind::SumAll,
        OpKind::MeanAll,
        OpKind::SumLeading,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::Gather,
        OpKind::MatMul,
        OpKind::MatMulT,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::BatchNorm,
        OpKind::BatchNormInfer,
        OpKind::Conv2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::AddBias => "add_bias",
            OpKind::Affine => "affine",
            OpKind::Square => "square",
            OpKind::Log => "log",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Clamp => "clamp",
            OpKind::SumAll => "sum_all",
            OpKind::MeanAll => "mean_all",
            OpKind::SumLeading => "sum_leading",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Gather => "gather",
            OpKind::MatMul => "matmul",
            OpKind::MatMulT => "matmul_t",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::BatchNorm => "batch_norm",
            OpKind::BatchNormInfer => "batch_norm_infer",
            OpKind::Conv2d => "conv2d",
            OpKind::Custom => "custom",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Receives the output gradient and which inputs need one; returns one entry per input.
pub type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    kind: OpKind,
    parents: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<T>>,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Append-only record of operations. A tape created with [`Tape::no_grad`]
/// records nothing and every value it produces is untracked.
pub struct Tape<T> {
    inner: RefCell<Inner<T>>,
    enabled: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
            enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            enabled: false,
            ..Self::new()
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Kinds of all recorded nodes in id order.
    pub fn kinds(&self) -> Vec<OpKind> {
        self.inner.borrow().nodes.iter().map(|n| n.kind).collect()
    }

    /// Trainable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self
            .enabled
            .then(|| self.push(OpKind::Leaf, Vec::new(), None));
        Var {
            tape: self,
            id,
            value,
        }
    }

    /// Untracked input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var {
            tape: self,
            id: None,
            value,
        }
    }

    fn push(
        &self,
        kind: OpKind,
        parents: Vec<Option<NodeId>>,
        backward: Option<BackwardFn<T>>,
    ) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            kind,
            parents,
            backward,
        });
        inner.nodes.len() - 1
    }

    /// Records `value` as the output of `kind` applied to `inputs`. Nothing is
    /// recorded when no input is tracked.
    pub fn record<'t>(
        &'t self,
        kind: OpKind,
        inputs: &[&Var<'t, T>],
        value: Tensor<T>,
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var<'t, T> {
        let parents: Vec<Option<NodeId>> = inputs.iter().map(|v| v.id).collect();
        let id = (self.enabled && parents.iter().any(Option::is_some))
            .then(|| self.push(kind, parents, Some(Box::new(backward))));
        Var {
            tape: self,
            id,
            value,
        }
    }

    /// User-defined op with an explicit backward.
    pub fn custom<'t>(
        &'t self,
        inputs: &[&Var<'t, T>],
        value: Tensor<T>,
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var<'t, T> {
        self.record(OpKind::Custom, inputs, value, backward)
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the recorded closures.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.value.shape().to_vec()));
        }
        let Some(root) = loss.id else {
            return Err(TensorError::Detached);
        };
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        inner.consumed = true;
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[root] = Some(Tensor::ones(loss.value.shape()));
        for id in (0..=root).rev() {
            let node = &mut inner.nodes[id];
            if node.kind == OpKind::Leaf {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let Some(f) = node.backward.take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = f(&g, &needs)?;
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(p), Some(pg)) = (p, pg) else {
                    continue;
                };
                match &mut grads[*p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients keyed by node id after [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.id
            .and_then(|id| self.grads.get(id))
            .and_then(Option::as_ref)
    }

    /// Gradient for `var`, zeros when it did not influence the loss.
    pub fn wrt(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }
}

/// A tensor value together with its (optional) node on a tape.
#[derive(Clone)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: Option<NodeId>,
    pub(crate) value: Tensor<T>,
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value)
            .finish()
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> Option<NodeId> {
        self.id
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Self {
        self.tape.constant(self.value.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_never_enter_the_tape() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::ones(&[3]));
        let d = c.add(&c).unwrap();
        assert!(!d.is_tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let tape = Tape::<f32>::no_grad();
        let x = tape.leaf(Tensor::ones(&[2]));
        let y = x.square().sum_all();
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn ids_are_topological() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let y = x.square();
        let z = y.add(&x).unwrap().sum_all();
        assert!(x.id().unwrap() < y.id().unwrap());
        assert!(y.id().unwrap() < z.id().unwrap());
        assert_eq!(
            tape.kinds(),
            vec![OpKind::Leaf, OpKind::Square, OpKind::Add, OpKind::SumAll]
        );
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let l = x.sum_all();
        tape.backward(&l).unwrap();
        assert_eq!(tape.backward(&l).err(), Some(TensorError::TapeConsumed));
    }

    #[test]
    fn unused_leaf_gets_zeros() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let unused = tape.leaf(Tensor::ones(&[4]));
        let g = tape.backward(&x.sum_all()).unwrap();
        assert!(g.get(&unused).is_none());
        assert_eq!(g.wrt(&unused).data(), &[0.0; 4]);
    }
}
