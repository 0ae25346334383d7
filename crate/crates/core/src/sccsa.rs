//! Skip fusion with a channel gate followed by a spatial gate.

use brau_tensor::{Element, Var};

use crate::error::{BrauError, Result};
use crate::nn::{BatchNorm, Conv, Ctx, Linear};
use crate::params::Builder;

/// Gated fusion of an encoder skip `x1` and decoder feature `x2`, both `n` channels.
#[derive(Debug, Clone)]
pub struct Sccsa {
    pub ca_fc1: Linear,
    pub ca_fc2: Linear,
    pub sa_conv1: Conv,
    pub sa_bn: BatchNorm,
    pub sa_conv2: Conv,
    pub out_fc: Linear,
    pub n: usize,
}

pub const REDUCTION: usize = 4;
pub const SPATIAL_KERNEL: usize = 7;

fn check_pair<T: Element>(x1: &Var<'_, T>, x2: &Var<'_, T>, n: usize) -> Result<()> {
    if x1.shape() != x2.shape() || x1.value().rank() != 4 || x1.shape()[3] != n {
        return Err(BrauError::Invalid(format!(
            "skip fusion expects two [N,h,w,{n}] maps, got {:?} and {:?}",
            x1.shape(),
            x2.shape()
        )));
    }
    Ok(())
}

impl Sccsa {
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        n: usize,
        bn_eps: f64,
        bn_momentum: f64,
    ) -> Self {
        let mut b = b.child(name);
        let (m, q) = (2 * n, (2 * n / REDUCTION).max(1));
        Self {
            ca_fc1: Linear::new(&mut b, "ca_fc1", m, q, true),
            ca_fc2: Linear::new(&mut b, "ca_fc2", q, m, true),
            sa_conv1: Conv::new(&mut b, "sa_conv1", SPATIAL_KERNEL, m, q, 1, 1, true),
            sa_bn: BatchNorm::new(&mut b, "sa_bn", q, bn_eps, bn_momentum),
            sa_conv2: Conv::new(&mut b, "sa_conv2", SPATIAL_KERNEL, q, m, 1, 1, true),
            out_fc: Linear::new(&mut b, "out_fc", m, n, true),
            n,
        }
    }

    /// Channel gate `σ(fc2(relu(fc1(F1))))`, position-wise.
    pub fn channel_gate<'t, T: Element>(
        &self,
        ctx: &Ctx<'t, T>,
        f1: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let hdn = self.ca_fc1.forward(ctx, f1)?.relu();
        Ok(self.ca_fc2.forward(ctx, &hdn)?.sigmoid())
    }

    /// Spatial gate `σ(conv2(relu(bn(conv1(F2)))))`.
    pub fn spatial_gate<'t, T: Element>(
        &self,
        ctx: &Ctx<'t, T>,
        f2: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let a = self.sa_conv1.forward(ctx, f2)?;
        let a = self.sa_bn.forward(ctx, &a)?.relu();
        Ok(self.sa_conv2.forward(ctx, &a)?.sigmoid())
    }

    pub fn forward<'t, T: Element>(
        &self,
        ctx: &Ctx<'t, T>,
        x1: &Var<'t, T>,
        x2: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        check_pair(x1, x2, self.n)?;
        let f1 = Var::concat(&[x1, x2])?;
        let f2 = self.channel_gate(ctx, &f1)?.mul(&f1)?;
        let f3 = self.spatial_gate(ctx, &f2)?.mul(&f2)?;
        self.out_fc.forward(ctx, &f3)
    }

    pub fn num_params(&self) -> usize {
        self.ca_fc1.num_params()
            + self.ca_fc2.num_params()
            + self.sa_conv1.num_params()
            + self.sa_bn.num_params()
            + self.sa_conv2.num_params()
            + self.out_fc.num_params()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let hw = h * w;
        self.ca_fc1.macs(hw)
            + self.ca_fc2.macs(hw)
            + self.sa_conv1.macs(h, w)
            + (hw * self.sa_bn.dim) as u64
            + self.sa_conv2.macs(h, w)
            + self.out_fc.macs(hw)
    }
}

/// Concat followed by a single affine map, the path without gates.
#[derive(Debug, Clone)]
pub struct PlainFuse {
    pub out_fc: Linear,
    pub n: usize,
}

impl PlainFuse {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, name: &str, n: usize) -> Self {
        let mut b = b.child(name);
        Self {
            out_fc: Linear::new(&mut b, "out_fc", 2 * n, n, true),
            n,
        }
    }

    pub fn forward<'t, T: Element>(
        &self,
        ctx: &Ctx<'t, T>,
        x1: &Var<'t, T>,
        x2: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        check_pair(x1, x2, self.n)?;
        self.out_fc.forward(ctx, &Var::concat(&[x1, x2])?)
    }

    pub fn num_params(&self) -> usize {
        self.out_fc.num_params()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.out_fc.macs(h * w)
    }
}
