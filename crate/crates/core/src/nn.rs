//! Forward context and the basic parameterized layers.

use std::cell::RefCell;

use brau_tensor::{lit, BatchStats, Conv2dSpec, Element, Gradients, Tape, Tensor, Var};

use crate::bra::AttentionCapture;
use crate::error::Result;
use crate::params::{Builder, Init, ParamId, ParamKind, ParamStore};

/// Truncated-normal std for affine and attention weights.
pub const LINEAR_INIT_STD: f64 = 0.02;

struct BnUpdate<T> {
    mean: ParamId,
    var: ParamId,
    momentum: f64,
    stats: BatchStats<T>,
}

/// Binds a parameter store to a tape for one forward pass.
pub struct Ctx<'t, T: Element> {
    vars: Vec<Var<'t, T>>,
    trainable: Vec<bool>,
    train: bool,
    bn_updates: RefCell<Vec<BnUpdate<T>>>,
    capture_at: Option<(usize, usize)>,
    captured: RefCell<Option<AttentionCapture<T>>>,
}

impl<'t, T: Element> Ctx<'t, T> {
    /// `train` selects batch statistics in batch norm.
    pub fn new(tape: &'t Tape<T>, store: &ParamStore<T>, train: bool) -> Self {
        let mut vars = Vec::with_capacity(store.len());
        let mut trainable = Vec::with_capacity(store.len());
        for id in store.ids() {
            let t = store.kind(id).trainable();
            let v = store.value(id).clone();
            vars.push(if t { tape.leaf(v) } else { tape.constant(v) });
            trainable.push(t);
        }
        Self {
            vars,
            trainable,
            train,
            bn_updates: RefCell::new(Vec::new()),
            capture_at: None,
            captured: RefCell::new(None),
        }
    }

    /// Like [`Ctx::new`], but trainable entries are taken from `params` in
    /// store order instead of fresh leaves.
    pub fn with_params(
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        params: &[Var<'t, T>],
        train: bool,
    ) -> Self {
        let mut given = params.iter();
        let mut vars = Vec::with_capacity(store.len());
        let mut trainable = Vec::with_capacity(store.len());
        for id in store.ids() {
            let t = store.kind(id).trainable();
            vars.push(if t {
                given
                    .next()
                    .expect("one var per trainable parameter")
                    .clone()
            } else {
                tape.constant(store.value(id).clone())
            });
            trainable.push(t);
        }
        assert!(
            given.next().is_none(),
            "more vars than trainable parameters"
        );
        Self {
            vars,
            trainable,
            train,
            bn_updates: RefCell::new(Vec::new()),
            capture_at: None,
            captured: RefCell::new(None),
        }
    }

    /// Records routing and attention of block `block` in stage `stage` (both 0-based).
    pub fn with_capture(mut self, stage: usize, block: usize) -> Self {
        self.capture_at = Some((stage, block));
        self
    }

    pub fn var(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id]
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub(crate) fn wants_capture(&self, tag: (usize, usize)) -> bool {
        self.capture_at == Some(tag)
    }

    pub(crate) fn store_capture(&self, c: AttentionCapture<T>) {
        *self.captured.borrow_mut() = Some(c);
    }

    pub fn take_capture(&self) -> Option<AttentionCapture<T>> {
        self.captured.borrow_mut().take()
    }

    /// Gradient per store entry; `None` for buffers.
    pub fn grads(&self, g: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| t.then(|| g.wrt(v)))
            .collect()
    }

    /// Folds the batch statistics seen in this pass into the running buffers.
    pub fn apply_bn_updates(&self, store: &mut ParamStore<T>) {
        for u in self.bn_updates.borrow_mut().drain(..) {
            let m: T = lit(u.momentum);
            let keep = T::one() - m;
            let n = u.stats.count;
            let unbias: T = lit(if n > 1 {
                n as f64 / (n as f64 - 1.0)
            } else {
                1.0
            });
            for (r, &b) in store
                .value_mut(u.mean)
                .data_mut()
                .iter_mut()
                .zip(&u.stats.mean)
            {
                *r = keep * *r + m * b;
            }
            for (r, &b) in store
                .value_mut(u.var)
                .data_mut()
                .iter_mut()
                .zip(&u.stats.var)
            {
                *r = keep * *r + m * b * unbias;
            }
        }
    }
}

/// Token-wise affine map over the last axis, weight `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let mut b = b.child(name);
        let weight = b.param(
            "weight",
            &[fan_in, fan_out],
            ParamKind::Weight,
            Init::TruncNormal(LINEAR_INIT_STD),
        );
        let bias = bias.then(|| b.param("bias", &[fan_out], ParamKind::Bias, Init::Zeros));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(ctx.var(self.weight))?;
        Ok(match self.bias {
            Some(b) => y.add_bias(ctx.var(b))?,
            None => y,
        })
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + if self.bias.is_some() { self.fan_out } else { 0 }
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        (tokens * self.fan_in * self.fan_out) as u64
    }
}

/// Zero-padded square convolution with `(k - 1) / 2` padding.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub spec: Conv2dSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let mut b = b.child(name);
        let cg = cin / groups;
        let weight = b.param(
            "weight",
            &[k, k, cg, cout],
            ParamKind::Weight,
            Init::FanIn(k * k * cg),
        );
        let bias = bias.then(|| b.param("bias", &[cout], ParamKind::Bias, Init::Zeros));
        Self {
            weight,
            bias,
            k,
            cin,
            cout,
            spec: Conv2dSpec::new(stride, (k - 1) / 2, groups),
        }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.conv2d(ctx.var(self.weight), self.spec)?;
        Ok(match self.bias {
            Some(b) => y.add_bias(ctx.var(b))?,
            None => y,
        })
    }

    pub fn num_params(&self) -> usize {
        self.k * self.k * (self.cin / self.spec.groups) * self.cout
            + if self.bias.is_some() { self.cout } else { 0 }
    }

    pub fn out_side(&self, side: usize) -> usize {
        self.spec.out_extent(side, self.k)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = (self.out_side(h), self.out_side(w));
        (oh * ow * self.k * self.k * (self.cin / self.spec.groups) * self.cout) as u64
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, name: &str, dim: usize, eps: f64) -> Self {
        let mut b = b.child(name);
        Self {
            weight: b.param("weight", &[dim], ParamKind::NormAffine, Init::Ones),
            bias: b.param("bias", &[dim], ParamKind::NormAffine, Init::Zeros),
            dim,
            eps,
        }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.layer_norm(ctx.var(self.weight), ctx.var(self.bias), lit(self.eps))?)
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        dim: usize,
        eps: f64,
        momentum: f64,
    ) -> Self {
        let mut b = b.child(name);
        Self {
            weight: b.param("weight", &[dim], ParamKind::NormAffine, Init::Ones),
            bias: b.param("bias", &[dim], ParamKind::NormAffine, Init::Zeros),
            running_mean: b.param("running_mean", &[dim], ParamKind::Buffer, Init::Zeros),
            running_var: b.param("running_var", &[dim], ParamKind::Buffer, Init::Ones),
            dim,
            eps,
            momentum,
        }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (g, b) = (ctx.var(self.weight), ctx.var(self.bias));
        if ctx.train {
            let (y, stats) = x.batch_norm(g, b, lit(self.eps))?;
            ctx.bn_updates.borrow_mut().push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                momentum: self.momentum,
                stats,
            });
            Ok(y)
        } else {
            let mean = ctx.var(self.running_mean).value();
            let var = ctx.var(self.running_var).value();
            Ok(x.batch_norm_infer(mean, var, g, b, lit(self.eps))?)
        }
    }

    /// Trainable scalars only.
    pub fn num_params(&self) -> usize {
        2 * self.dim
    }
}

#[derive(Debug, Clone)]
pub enum Norm {
    Layer(LayerNorm),
    Batch(BatchNorm),
}

impl Norm {
    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Norm::Layer(n) => n.forward(ctx, x),
            Norm::Batch(n) => n.forward(ctx, x),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Norm::Layer(n) => n.num_params(),
            Norm::Batch(n) => n.num_params(),
        }
    }
}
