//! BiFormer blocks, patch embedding/merging/expanding and the seven-stage
//! u-shaped network.

use brau_tensor::{Element, SplitMix64, Tape, Tensor, Var};

use crate::bra::Bra;
use crate::config::{EmbedNorm, ModelConfig};
use crate::error::{BrauError, Result};
use crate::nn::{BatchNorm, Conv, Ctx, LayerNorm, Linear, Norm};
use crate::params::{Builder, ParamStore};
use crate::sccsa::{PlainFuse, Sccsa};

/// `x + dw(x)`, then `+ bra(ln(x))`, then `+ mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct BiFormerBlock {
    pub dw: Conv,
    pub ln1: LayerNorm,
    pub bra: Bra,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
}

impl BiFormerBlock {
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        dim: usize,
        top_k: crate::config::TopK,
        cfg: &ModelConfig,
        tag: (usize, usize),
    ) -> Self {
        let mut b = b.child(name);
        let hidden = cfg.mlp_ratio * dim;
        Self {
            dw: Conv::new(&mut b, "dw", 3, dim, dim, 1, dim, true),
            ln1: LayerNorm::new(&mut b, "ln1", dim, cfg.ln_eps),
            bra: Bra::new(&mut b, "bra", dim, top_k, cfg, tag),
            ln2: LayerNorm::new(&mut b, "ln2", dim, cfg.ln_eps),
            fc1: Linear::new(&mut b, "fc1", dim, hidden, true),
            fc2: Linear::new(&mut b, "fc2", hidden, dim, true),
            dim,
        }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let x = x.add(&self.dw.forward(ctx, x)?)?;
        let a = self.bra.forward(ctx, &self.ln1.forward(ctx, &x)?)?;
        let x = x.add(&a)?;
        let m = self.fc1.forward(ctx, &self.ln2.forward(ctx, &x)?)?.gelu();
        Ok(x.add(&self.fc2.forward(ctx, &m)?)?)
    }

    pub fn num_params(&self) -> usize {
        self.dw.num_params()
            + self.ln1.num_params()
            + self.bra.num_params()
            + self.ln2.num_params()
            + self.fc1.num_params()
            + self.fc2.num_params()
    }

    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let hw = h * w;
        Ok(self.dw.macs(h, w)
            + 2 * (hw * self.dim) as u64
            + self.bra.macs(h, w)?
            + self.fc1.macs(hw)
            + self.fc2.macs(hw))
    }
}

/// Two stride-2 3×3 convolutions, each followed by a norm and GELU.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    pub norm2: Norm,
}

fn make_norm<T: Element>(
    b: &mut Builder<'_, T>,
    name: &str,
    dim: usize,
    cfg: &ModelConfig,
) -> Norm {
    match cfg.embed_norm {
        EmbedNorm::Layer => Norm::Layer(LayerNorm::new(b, name, dim, cfg.ln_eps)),
        EmbedNorm::Batch => Norm::Batch(BatchNorm::new(b, name, dim, cfg.bn_eps, cfg.bn_momentum)),
    }
}

impl PatchEmbed {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, name: &str, cfg: &ModelConfig) -> Self {
        let mut b = b.child(name);
        let (c, mid) = (cfg.base_channels, cfg.base_channels / 2);
        Self {
            conv1: Conv::new(&mut b, "conv1", 3, cfg.in_channels, mid, 2, 1, true),
            norm1: make_norm(&mut b, "norm1", mid, cfg),
            conv2: Conv::new(&mut b, "conv2", 3, mid, c, 2, 1, true),
            norm2: make_norm(&mut b, "norm2", c, cfg),
        }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(BrauError::Invalid(format!(
                "patch embedding needs sides divisible by 4, got {h}x{w}"
            )));
        }
        let y = self
            .norm1
            .forward(ctx, &self.conv1.forward(ctx, x)?)?
            .gelu();
        Ok(self
            .norm2
            .forward(ctx, &self.conv2.forward(ctx, &y)?)?
            .gelu())
    }

    pub fn num_params(&self) -> usize {
        self.conv1.num_params()
            + self.norm1.num_params()
            + self.conv2.num_params()
            + self.norm2.num_params()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (h1, w1) = (self.conv1.out_side(h), self.conv1.out_side(w));
        let (h2, w2) = (self.conv2.out_side(h1), self.conv2.out_side(w1));
        self.conv1.macs(h, w)
            + (h1 * w1 * self.conv1.cout) as u64
            + self.conv2.macs(h1, w1)
            + (h2 * w2 * self.conv2.cout) as u64
    }
}

/// Stride-2 3×3 convolution doubling channels, then layer norm.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub conv: Conv,
    pub norm: LayerNorm,
}

impl PatchMerge {
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        dim: usize,
        cfg: &ModelConfig,
    ) -> Self {
        let mut b = b.child(name);
        Self {
            conv: Conv::new(&mut b, "conv", 3, dim, 2 * dim, 2, 1, true),
            norm: LayerNorm::new(&mut b, "norm", 2 * dim, cfg.ln_eps),
        }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(BrauError::Invalid(format!(
                "patch merging needs even sides, got {h}x{w}"
            )));
        }
        self.norm.forward(ctx, &self.conv.forward(ctx, x)?)
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.norm.num_params()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv.macs(h, w)
            + (self.conv.out_side(h) * self.conv.out_side(w) * self.conv.cout) as u64
    }
}

/// Bias-free token affine to `factor²·out` channels, sub-pixel rearrangement
/// (row-major within each `factor`×`factor` block), then layer norm.
#[derive(Debug, Clone)]
pub struct PatchExpand {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub factor: usize,
    pub out: usize,
}

/// `[N,H,W,f²·c] -> [N,fH,fW,c]`.
pub fn pixel_shuffle<'t, T: Element>(x: &Var<'t, T>, f: usize) -> Result<Var<'t, T>> {
    let (n, h, w, cc) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if cc % (f * f) != 0 {
        return Err(BrauError::Invalid(format!(
            "{cc} channels not divisible by {}",
            f * f
        )));
    }
    let c = cc / (f * f);
    Ok(x.reshape(&[n, h, w, f, f, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[n, h * f, w * f, c])?)
}

impl PatchExpand {
    /// `factor` 2 halves the channels; `factor` 4 keeps them.
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        dim: usize,
        factor: usize,
        cfg: &ModelConfig,
    ) -> Self {
        let mut b = b.child(name);
        let out = if factor == 2 { dim / 2 } else { dim };
        Self {
            proj: Linear::new(&mut b, "proj", dim, factor * factor * out, false),
            norm: LayerNorm::new(&mut b, "norm", out, cfg.ln_eps),
            factor,
            out,
        }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = pixel_shuffle(&self.proj.forward(ctx, x)?, self.factor)?;
        self.norm.forward(ctx, &y)
    }

    pub fn num_params(&self) -> usize {
        self.proj.num_params() + self.norm.num_params()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.proj.macs(h * w) + (h * w * self.factor * self.factor * self.out) as u64
    }
}

#[derive(Debug, Clone)]
pub enum Fuse {
    Sccsa(Sccsa),
    Plain(PlainFuse),
}

impl Fuse {
    pub fn forward<'t, T: Element>(
        &self,
        ctx: &Ctx<'t, T>,
        skip: &Var<'t, T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        match self {
            Fuse::Sccsa(s) => s.forward(ctx, skip, x),
            Fuse::Plain(p) => p.forward(ctx, skip, x),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Fuse::Sccsa(s) => s.num_params(),
            Fuse::Plain(p) => p.num_params(),
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            Fuse::Sccsa(s) => s.macs(h, w),
            Fuse::Plain(p) => p.macs(h, w),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub expand: PatchExpand,
    /// `None` when the skip at this scale is disabled.
    pub fuse: Option<Fuse>,
    pub blocks: Vec<BiFormerBlock>,
}

/// Layer structure of the network; weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    pub embed: PatchEmbed,
    pub encoders: [Vec<BiFormerBlock>; 3],
    pub merges: [PatchMerge; 3],
    pub bottleneck: Vec<BiFormerBlock>,
    pub decoders: [DecoderStage; 3],
    pub final_expand: PatchExpand,
    pub head: Linear,
}

/// One named row of a parameter or MAC report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleCount {
    pub name: String,
    pub params: usize,
    pub macs: u64,
}

fn blocks<T: Element>(
    b: &mut Builder<'_, T>,
    name: &str,
    stage: usize,
    dim: usize,
    cfg: &ModelConfig,
) -> Vec<BiFormerBlock> {
    let mut b = b.child(name);
    (0..cfg.stage_depths[stage])
        .map(|i| {
            BiFormerBlock::new(
                &mut b,
                &i.to_string(),
                dim,
                cfg.top_k_schedule[stage],
                cfg,
                (stage, i),
            )
        })
        .collect()
}

fn run_blocks<'t, T: Element>(
    ctx: &Ctx<'t, T>,
    blocks: &[BiFormerBlock],
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    blocks.iter().try_fold(x, |x, blk| blk.forward(ctx, &x))
}

fn blocks_macs(blocks: &[BiFormerBlock], h: usize, w: usize) -> Result<u64> {
    blocks.iter().map(|b| b.macs(h, w)).sum()
}

impl Network {
    pub fn build<T: Element>(cfg: &ModelConfig, store: &mut ParamStore<T>) -> Self {
        let mut rng = SplitMix64::new(cfg.init_seed);
        let mut b = Builder::new(store, &mut rng);
        let dims = cfg.stage_dims();
        let embed = PatchEmbed::new(&mut b, "embed", cfg);
        let enc1 = blocks(&mut b, "encoder1", 0, dims[0], cfg);
        let m1 = PatchMerge::new(&mut b, "merge1", dims[0], cfg);
        let enc2 = blocks(&mut b, "encoder2", 1, dims[1], cfg);
        let m2 = PatchMerge::new(&mut b, "merge2", dims[1], cfg);
        let enc3 = blocks(&mut b, "encoder3", 2, dims[2], cfg);
        let m3 = PatchMerge::new(&mut b, "merge3", dims[2], cfg);
        let bottleneck = blocks(&mut b, "bottleneck", 3, dims[3], cfg);
        let decoder = |b: &mut Builder<'_, T>, i: usize| {
            let stage = 4 + i;
            let name = format!("decoder{}", i + 1);
            let mut b = b.child(&name);
            let expand = PatchExpand::new(&mut b, "expand", dims[stage - 1], 2, cfg);
            let n = dims[stage];
            let fuse = cfg.skip_mask[2 - i].then(|| {
                if cfg.sccsa_enabled {
                    Fuse::Sccsa(Sccsa::new(&mut b, "sccsa", n, cfg.bn_eps, cfg.bn_momentum))
                } else {
                    Fuse::Plain(PlainFuse::new(&mut b, "fuse", n))
                }
            });
            let blocks = blocks(&mut b, "blocks", stage, n, cfg);
            DecoderStage {
                expand,
                fuse,
                blocks,
            }
        };
        let d1 = decoder(&mut b, 0);
        let d2 = decoder(&mut b, 1);
        let d3 = decoder(&mut b, 2);
        let final_expand = PatchExpand::new(&mut b, "final_expand", dims[6], 4, cfg);
        let head = Linear::new(&mut b, "head", dims[6], cfg.num_classes, true);
        Self {
            cfg: cfg.clone(),
            embed,
            encoders: [enc1, enc2, enc3],
            merges: [m1, m2, m3],
            bottleneck,
            decoders: [d1, d2, d3],
            final_expand,
            head,
        }
    }

    /// `[N,H,W,in_channels]` images to `[N,H,W,K]` logits.
    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.cfg.in_channels {
            return Err(BrauError::Invalid(format!(
                "expected [N,H,W,{}] input, got {s:?}",
                self.cfg.in_channels
            )));
        }
        self.cfg.check_input(s[1], s[2])?;
        let mut x = self.embed.forward(ctx, x)?;
        let mut skips = Vec::with_capacity(3);
        for (blocks, merge) in self.encoders.iter().zip(&self.merges) {
            x = run_blocks(ctx, blocks, x)?;
            skips.push(x.clone());
            x = merge.forward(ctx, &x)?;
        }
        x = run_blocks(ctx, &self.bottleneck, x)?;
        for dec in &self.decoders {
            x = dec.expand.forward(ctx, &x)?;
            let skip = skips.pop().expect("three skips");
            if let Some(f) = &dec.fuse {
                x = f.forward(ctx, &skip, &x)?;
            }
            x = run_blocks(ctx, &dec.blocks, x)?;
        }
        let x = self.final_expand.forward(ctx, &x)?;
        self.head.forward(ctx, &x)
    }

    /// Per-module trainable parameter and MAC counts on an `h`×`w` input.
    pub fn report(&self, h: usize, w: usize) -> Result<Vec<ModuleCount>> {
        self.cfg.check_input(h, w)?;
        let mut rows = Vec::new();
        let mut push =
            |name: String, params: usize, macs: u64| rows.push(ModuleCount { name, params, macs });
        push(
            "embed".into(),
            self.embed.num_params(),
            self.embed.macs(h, w),
        );
        let side = |st: usize| (h / st, w / st);
        for i in 0..3 {
            let (sh, sw) = side(4 << i);
            let blocks = &self.encoders[i];
            push(
                format!("encoder{}.blocks", i + 1),
                blocks.iter().map(BiFormerBlock::num_params).sum(),
                blocks_macs(blocks, sh, sw)?,
            );
            let m = &self.merges[i];
            let (oh, ow) = (m.conv.out_side(sh), m.conv.out_side(sw));
            push(
                format!("merge{}.conv", i + 1),
                m.conv.num_params(),
                m.conv.macs(sh, sw),
            );
            push(
                format!("merge{}.norm", i + 1),
                m.norm.num_params(),
                (oh * ow * m.norm.dim) as u64,
            );
        }
        let (bh, bw) = side(32);
        push(
            "bottleneck.blocks".into(),
            self.bottleneck.iter().map(BiFormerBlock::num_params).sum(),
            blocks_macs(&self.bottleneck, bh, bw)?,
        );
        for (i, dec) in self.decoders.iter().enumerate() {
            let (ih, iw) = side(32 >> i);
            let (oh, ow) = (2 * ih, 2 * iw);
            push(
                format!("decoder{}.expand", i + 1),
                dec.expand.num_params(),
                dec.expand.macs(ih, iw),
            );
            if let Some(f) = &dec.fuse {
                let kind = match f {
                    Fuse::Sccsa(_) => "sccsa",
                    Fuse::Plain(_) => "fuse",
                };
                push(
                    format!("decoder{}.{kind}", i + 1),
                    f.num_params(),
                    f.macs(oh, ow),
                );
            }
            push(
                format!("decoder{}.blocks", i + 1),
                dec.blocks.iter().map(BiFormerBlock::num_params).sum(),
                blocks_macs(&dec.blocks, oh, ow)?,
            );
        }
        let (fh, fw) = side(4);
        push(
            "final_expand".into(),
            self.final_expand.num_params(),
            self.final_expand.macs(fh, fw),
        );
        push("head".into(), self.head.num_params(), self.head.macs(h * w));
        Ok(rows)
    }

    /// Every BRA layer with the map side it runs on for an `h`×`w` input.
    pub fn attention_layers(&self, h: usize, w: usize) -> Vec<(&Bra, usize, usize)> {
        let mut out = Vec::new();
        for (i, blocks) in self.encoders.iter().enumerate() {
            out.extend(blocks.iter().map(|b| (&b.bra, h >> (2 + i), w >> (2 + i))));
        }
        out.extend(self.bottleneck.iter().map(|b| (&b.bra, h >> 5, w >> 5)));
        for (i, dec) in self.decoders.iter().enumerate() {
            out.extend(
                dec.blocks
                    .iter()
                    .map(|b| (&b.bra, h >> (4 - i), w >> (4 - i))),
            );
        }
        out
    }
}

/// A network together with its weights.
#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Element> Model<T> {
    /// Validates `cfg` and initializes weights from `cfg.init_seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let net = Network::build(cfg, &mut params);
        Ok(Self { net, params })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    /// Eval-mode logits without recording a tape.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &self.params, false);
        let x = tape.constant(images.clone());
        Ok(self.net.forward(&ctx, &x)?.into_value())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }
}

/// Sum of a report's parameter and MAC columns.
pub fn totals(rows: &[ModuleCount]) -> (usize, u64) {
    rows.iter()
        .fold((0, 0), |(p, m), r| (p + r.params, m + r.macs))
}
