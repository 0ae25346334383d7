//! Bi-level routing attention: region routing with row-wise top-k, then
//! token attention over the gathered regions, plus a depthwise local
//! context term on the values.

use std::cmp::Ordering;

use brau_tensor::{lit, Element, Tensor, Var};

use crate::config::{ModelConfig, ScaleMode, TopK};
use crate::error::{BrauError, Result};
use crate::nn::{Conv, Ctx, Linear};
use crate::params::Builder;

/// An `h`×`w` map cut into an `s`×`s` grid of equal regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    pub h: usize,
    pub w: usize,
    pub s: usize,
}

impl PartitionSpec {
    pub fn new(h: usize, w: usize, s: usize) -> Result<Self> {
        if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(BrauError::Invalid(format!(
                "S={s} does not divide a {h}x{w} map"
            )));
        }
        Ok(Self { h, w, s })
    }

    pub fn regions(&self) -> usize {
        self.s * self.s
    }

    pub fn region_h(&self) -> usize {
        self.h / self.s
    }

    pub fn region_w(&self) -> usize {
        self.w / self.s
    }

    pub fn tokens(&self) -> usize {
        self.region_h() * self.region_w()
    }

    /// Region id and in-region token index of pixel `(y, x)`.
    pub fn locate(&self, y: usize, x: usize) -> (usize, usize) {
        let (rh, rw) = (self.region_h(), self.region_w());
        ((y / rh) * self.s + x / rw, (y % rh) * rw + x % rw)
    }
}

/// `[N,H,W,C] -> [N,S²,HW/S²,C]`, regions row-major, tokens row-major within a region.
pub fn region_partition<'t, T: Element>(
    x: &Var<'t, T>,
    spec: &PartitionSpec,
) -> Result<Var<'t, T>> {
    let (n, c) = (x.shape()[0], x.shape()[3]);
    let (s, rh, rw) = (spec.s, spec.region_h(), spec.region_w());
    Ok(x.reshape(&[n, s, rh, s, rw, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[n, s * s, rh * rw, c])?)
}

/// Inverse of [`region_partition`].
pub fn region_merge<'t, T: Element>(x: &Var<'t, T>, spec: &PartitionSpec) -> Result<Var<'t, T>> {
    let (n, c) = (x.shape()[0], x.shape()[3]);
    let (s, rh, rw) = (spec.s, spec.region_h(), spec.region_w());
    Ok(x.reshape(&[n, s, s, rh, rw, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[n, spec.h, spec.w, c])?)
}

/// Region-level routing for a batch.
#[derive(Debug, Clone)]
pub struct RoutingResult<T: Element> {
    pub regions: usize,
    pub k: usize,
    /// `[N,R,R]` region affinities.
    pub adjacency: Tensor<T>,
    /// `[N,R,k]` routed region ids, best first.
    pub index: Vec<usize>,
    /// `[N,R,C]` per-region means.
    pub region_queries: Tensor<T>,
    pub region_keys: Tensor<T>,
}

/// Ids of the `k` largest entries of `row`, by descending score then ascending id.
pub fn top_k_indices<T: Element>(row: &[T], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..row.len()).collect();
    ids.sort_by(|&a, &b| match row[b].partial_cmp(&row[a]) {
        Some(Ordering::Equal) | None => a.cmp(&b),
        Some(o) => o,
    });
    ids.truncate(k);
    ids
}

fn region_means<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let (n, r, t, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let inv: T = lit(1.0 / t as f64);
    let d = x.data();
    let mut out = vec![T::zero(); n * r * c];
    for g in 0..n * r {
        let acc = &mut out[g * c..(g + 1) * c];
        for tok in 0..t {
            let row = &d[(g * t + tok) * c..(g * t + tok + 1) * c];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        acc.iter_mut().for_each(|a| *a = *a * inv);
    }
    Tensor::new(&[n, r, c], out).expect("shape")
}

/// Routing on `[N,R,T,C]` queries and keys. Not differentiated.
pub fn route_regions<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    top_k: usize,
) -> Result<RoutingResult<T>> {
    if q.rank() != 4 || q.shape() != k.shape() {
        return Err(BrauError::Invalid(format!(
            "routing expects equal [N,R,T,C] shapes, got {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let (n, r, c) = (q.dim(0), q.dim(1), q.dim(3));
    if top_k == 0 || top_k > r {
        return Err(BrauError::Invalid(format!("top-k {top_k} outside 1..={r}")));
    }
    let qm = region_means(q);
    let km = region_means(k);
    let mut adj = vec![T::zero(); n * r * r];
    let mut index = Vec::with_capacity(n * r * top_k);
    for b in 0..n {
        for i in 0..r {
            let qi = &qm.data()[(b * r + i) * c..(b * r + i + 1) * c];
            let row = &mut adj[(b * r + i) * r..(b * r + i + 1) * r];
            for (j, a) in row.iter_mut().enumerate() {
                let kj = &km.data()[(b * r + j) * c..(b * r + j + 1) * c];
                *a = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum();
            }
            index.extend(top_k_indices(row, top_k));
        }
    }
    Ok(RoutingResult {
        regions: r,
        k: top_k,
        adjacency: Tensor::new(&[n, r, r], adj)?,
        index,
        region_queries: qm,
        region_keys: km,
    })
}

/// Routing and post-softmax attention of one block for the first sample.
#[derive(Debug, Clone)]
pub struct AttentionCapture<T: Element> {
    pub spec: PartitionSpec,
    pub k: usize,
    pub heads: usize,
    /// `[R,k]` routed regions.
    pub index: Vec<usize>,
    /// `[R,heads,T,k*T]` attention weights.
    pub attn: Tensor<T>,
}

/// Analytic multiply-accumulate counts of the attention core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionFlops {
    pub routing: u64,
    pub token: u64,
    pub total: u64,
}

/// Routing: `S⁴·C` for the region affinity plus `HW·C` for region means.
/// Token: `2·HW·(k·HW/S²)·C` for `QKᵀ` and `AV`.
pub fn attention_flops(spec: &PartitionSpec, c: usize, top_k: usize) -> AttentionFlops {
    let hw = (spec.h * spec.w) as u64;
    let s2 = spec.regions() as u64;
    let c = c as u64;
    let routing = s2 * s2 * c + hw * c;
    let token = 2 * hw * (top_k as u64 * hw / s2) * c;
    AttentionFlops {
        routing,
        token,
        total: routing + token,
    }
}

/// One bi-level routing attention layer.
#[derive(Debug, Clone)]
pub struct Bra {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub lce: Conv,
    pub dim: usize,
    pub heads: usize,
    pub top_k: TopK,
    pub partition: usize,
    pub scale_mode: ScaleMode,
    /// `(stage, block)` used for attention capture.
    pub tag: (usize, usize),
}

impl Bra {
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        dim: usize,
        top_k: TopK,
        cfg: &ModelConfig,
        tag: (usize, usize),
    ) -> Self {
        let mut b = b.child(name);
        Self {
            wq: Linear::new(&mut b, "wq", dim, dim, cfg.qkv_bias),
            wk: Linear::new(&mut b, "wk", dim, dim, cfg.qkv_bias),
            wv: Linear::new(&mut b, "wv", dim, dim, cfg.qkv_bias),
            wo: Linear::new(&mut b, "wo", dim, dim, true),
            lce: Conv::new(&mut b, "lce", cfg.lce_kernel, dim, dim, 1, dim, false),
            dim,
            heads: cfg.heads(dim),
            top_k,
            partition: cfg.partition,
            scale_mode: cfg.scale_mode,
            tag,
        }
    }

    pub fn spec_for(&self, h: usize, w: usize) -> Result<PartitionSpec> {
        PartitionSpec::new(h, w, self.partition.min(h).min(w))
    }

    pub fn k_for(&self, spec: &PartitionSpec) -> Result<usize> {
        let k = self.top_k.resolve(spec.regions());
        if k > spec.regions() {
            return Err(BrauError::config(
                "top_k_schedule",
                format!("top-k {k} exceeds {} regions", spec.regions()),
            ));
        }
        Ok(k)
    }

    pub fn scale(&self) -> f64 {
        let d = match self.scale_mode {
            ScaleMode::PerHead => self.dim / self.heads,
            ScaleMode::PerChannel => self.dim,
        };
        1.0 / (d as f64).sqrt()
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        if x.value().rank() != 4 || x.shape()[3] != self.dim {
            return Err(BrauError::Invalid(format!(
                "attention expects [N,H,W,{}], got {:?}",
                self.dim,
                x.shape()
            )));
        }
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let spec = self.spec_for(h, w)?;
        let k = self.k_for(&spec)?;
        let (r, t, heads) = (spec.regions(), spec.tokens(), self.heads);
        let d = c / heads;

        let q = self.wq.forward(ctx, x)?;
        let kk = self.wk.forward(ctx, x)?;
        let v = self.wv.forward(ctx, x)?;
        let qr = region_partition(&q, &spec)?;
        let kr = region_partition(&kk, &spec)?;
        let vr = region_partition(&v, &spec)?;

        let routing = route_regions(qr.value(), kr.value(), k)?;
        let kg = kr.gather_regions(&routing.index, k)?;
        let vg = vr.gather_regions(&routing.index, k)?;

        let split = |z: &Var<'t, T>, len: usize| -> Result<Var<'t, T>> {
            if heads == 1 {
                Ok(z.reshape(&[n, r, 1, len, c])?)
            } else {
                Ok(z.reshape(&[n, r, len, heads, d])?
                    .permute(&[0, 1, 3, 2, 4])?)
            }
        };
        let qh = split(&qr, t)?;
        let kh = split(&kg, k * t)?;
        let vh = split(&vg, k * t)?;
        let attn = qh.matmul_t(&kh)?.softmax(lit(self.scale()));
        if ctx.wants_capture(self.tag) {
            let per = heads * t * k * t;
            ctx.store_capture(AttentionCapture {
                spec,
                k,
                heads,
                index: routing.index[..r * k].to_vec(),
                attn: Tensor::new(
                    &[r, heads, t, k * t],
                    attn.value().data()[..r * per].to_vec(),
                )?,
            });
        }
        let o = attn.matmul(&vh)?;
        let o = if heads == 1 {
            o.reshape(&[n, r, t, c])?
        } else {
            o.permute(&[0, 1, 3, 2, 4])?.reshape(&[n, r, t, c])?
        };
        let o = region_merge(&self.wo.forward(ctx, &o)?, &spec)?;
        let local = self.lce.forward(ctx, &v)?;
        Ok(o.add(&local)?)
    }

    pub fn num_params(&self) -> usize {
        self.wq.num_params()
            + self.wk.num_params()
            + self.wv.num_params()
            + self.wo.num_params()
            + self.lce.num_params()
    }

    /// Projections, attention core and local context term on an `h`×`w` map.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let spec = self.spec_for(h, w)?;
        let k = self.k_for(&spec)?;
        let hw = h * w;
        let proj = self.wq.macs(hw) + self.wk.macs(hw) + self.wv.macs(hw) + self.wo.macs(hw);
        Ok(proj + attention_flops(&spec, self.dim, k).total + self.lce.macs(h, w))
    }
}

/// Naive loop implementations used as test oracles.
pub mod reference {
    use brau_tensor::{Element, SplitMix64, Tensor};

    use super::Bra;
    use crate::config::{ModelConfig, TopK};
    use crate::error::Result;
    use crate::params::{Builder, ParamStore};

    fn linear(
        x: &[f64],
        tokens: usize,
        cin: usize,
        w: &[f64],
        b: Option<&[f64]>,
        cout: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; tokens * cout];
        for t in 0..tokens {
            for o in 0..cout {
                let mut acc = b.map_or(0.0, |b| b[o]);
                for i in 0..cin {
                    acc += x[t * cin + i] * w[i * cout + o];
                }
                out[t * cout + o] = acc;
            }
        }
        out
    }

    fn f64s<T: Element>(t: &Tensor<T>) -> Vec<f64> {
        t.data().iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// A standalone layer on an `h`×`w` map with every weight perturbed by
    /// `N(0, std)` so biases and the local term are not trivially zero.
    pub fn layer<T: Element>(
        cfg: &ModelConfig,
        dim: usize,
        top_k: TopK,
        std: f64,
        seed: u64,
    ) -> (ParamStore<T>, Bra) {
        let mut store = ParamStore::<T>::new();
        let mut rng = SplitMix64::new(seed);
        let bra = Bra::new(
            &mut Builder::new(&mut store, &mut rng),
            "bra",
            dim,
            top_k,
            cfg,
            (0, 0),
        );
        for id in store.ids() {
            for v in store.value_mut(id).data_mut() {
                *v = T::from_f64_lossy((*v).to_f64_lossy() + std * rng.normal());
            }
        }
        (store, bra)
    }

    /// Full attention of every token against all `HW` tokens with the layer's
    /// weights, plus the same local context term. Computed in f64.
    pub fn dense_attention<T: Element>(
        x: &Tensor<T>,
        store: &ParamStore<T>,
        bra: &Bra,
    ) -> Tensor<f64> {
        masked_attention(x, store, bra, |_, _, _| true)
    }

    /// Attention restricted to the tokens of the routed regions, with routing
    /// recomputed here from region means and a full sort.
    pub fn routed_attention<T: Element>(
        x: &Tensor<T>,
        store: &ParamStore<T>,
        bra: &Bra,
    ) -> Result<Tensor<f64>> {
        let (n, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let spec = bra.spec_for(h, w)?;
        let k = bra.k_for(&spec)?;
        let hw = h * w;
        let xs = f64s(x);
        let get = |id: usize| f64s(store.value(id));
        let r = spec.regions();
        let region_of = |tok: usize| spec.locate(tok / w, tok % w).0;
        let mut routed = vec![vec![false; r * r]; n];
        for b in 0..n {
            let xb = &xs[b * hw * c..(b + 1) * hw * c];
            let q = linear(
                xb,
                hw,
                c,
                &get(bra.wq.weight),
                bra.wq.bias.map(get).as_deref(),
                c,
            );
            let kk = linear(
                xb,
                hw,
                c,
                &get(bra.wk.weight),
                bra.wk.bias.map(get).as_deref(),
                c,
            );
            let mut qm = vec![0.0; r * c];
            let mut km = vec![0.0; r * c];
            for tok in 0..hw {
                let g = region_of(tok);
                for ch in 0..c {
                    qm[g * c + ch] += q[tok * c + ch] / spec.tokens() as f64;
                    km[g * c + ch] += kk[tok * c + ch] / spec.tokens() as f64;
                }
            }
            for i in 0..r {
                let row: Vec<f64> = (0..r)
                    .map(|j| (0..c).map(|ch| qm[i * c + ch] * km[j * c + ch]).sum())
                    .collect();
                let mut ids: Vec<usize> = (0..r).collect();
                ids.sort_by(|&a, &bb| row[bb].total_cmp(&row[a]).then(a.cmp(&bb)));
                for &j in &ids[..k] {
                    routed[b][i * r + j] = true;
                }
            }
        }
        Ok(masked_attention(x, store, bra, |b, i, j| {
            routed[b][region_of(i) * r + region_of(j)]
        }))
    }

    fn masked_attention<T: Element>(
        x: &Tensor<T>,
        store: &ParamStore<T>,
        bra: &Bra,
        allow: impl Fn(usize, usize, usize) -> bool,
    ) -> Tensor<f64> {
        let (n, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let hw = h * w;
        let get = |id: usize| f64s(store.value(id));
        let opt = |id: Option<usize>| id.map(get);
        let xs = f64s(x);
        let heads = bra.heads;
        let d = c / heads;
        let scale = bra.scale();
        let kern = bra.lce.k;
        let pad = (kern as isize - 1) / 2;
        let lce = get(bra.lce.weight);
        let mut out = vec![0.0; n * hw * c];
        for b in 0..n {
            let xb = &xs[b * hw * c..(b + 1) * hw * c];
            let q = linear(
                xb,
                hw,
                c,
                &get(bra.wq.weight),
                opt(bra.wq.bias).as_deref(),
                c,
            );
            let k = linear(
                xb,
                hw,
                c,
                &get(bra.wk.weight),
                opt(bra.wk.bias).as_deref(),
                c,
            );
            let v = linear(
                xb,
                hw,
                c,
                &get(bra.wv.weight),
                opt(bra.wv.bias).as_deref(),
                c,
            );
            let mut att = vec![0.0; hw * c];
            for hd in 0..heads {
                for i in 0..hw {
                    let keys: Vec<usize> = (0..hw).filter(|&j| allow(b, i, j)).collect();
                    let mut scores: Vec<f64> = keys
                        .iter()
                        .map(|&j| {
                            (0..d)
                                .map(|e| q[i * c + hd * d + e] * k[j * c + hd * d + e])
                                .sum::<f64>()
                                * scale
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    scores.iter_mut().for_each(|s| *s = (*s - mx).exp());
                    let z: f64 = scores.iter().sum();
                    for e in 0..d {
                        att[i * c + hd * d + e] = keys
                            .iter()
                            .zip(&scores)
                            .map(|(&j, s)| s / z * v[j * c + hd * d + e])
                            .sum();
                    }
                }
            }
            let o = linear(
                &att,
                hw,
                c,
                &get(bra.wo.weight),
                opt(bra.wo.bias).as_deref(),
                c,
            );
            for y in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        let mut acc = o[(y * w + xx) * c + ch];
                        for i in 0..kern {
                            for j in 0..kern {
                                let sy = y as isize + i as isize - pad;
                                let sx = xx as isize + j as isize - pad;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += v[(sy as usize * w + sx as usize) * c + ch]
                                        * lce[(i * kern + j) * c + ch];
                                }
                            }
                        }
                        out[(b * hw + y * w + xx) * c + ch] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, h, w, c], out).expect("shape")
    }
}
