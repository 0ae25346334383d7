//! Finite-difference checks of composite layers, the hybrid loss and a
//! small end-to-end network, in f64.

use brau_tensor::{grad_check, GradCheckOptions, GradCheckReport, SplitMix64, Tensor, TensorError};

use crate::bra::Bra;
use crate::config::{LossConfig, ModelConfig, TopK};
use crate::error::{BrauError, Result};
use crate::labels::LabelMap;
use crate::loss::hybrid_loss;

use crate::model::{BiFormerBlock, Model};
use crate::nn::Ctx;
use crate::params::{Builder, ParamStore};
use crate::sccsa::Sccsa;

/// Relative error bound for composites.
pub const COMPOSITE_TOL: f64 = 1e-3;

fn lower(e: BrauError) -> TensorError {
    match e {
        BrauError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "composite",
            msg: other.to_string(),
        },
    }
}

fn opts(seed: u64, max_coords: usize) -> GradCheckOptions {
    GradCheckOptions {
        tol: COMPOSITE_TOL,
        max_coords: Some(max_coords),
        seed,
        skip_kinks: true,
        ..GradCheckOptions::default()
    }
}

fn trainable(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store
        .ids()
        .filter(|&i| store.kind(i).trainable())
        .map(|i| store.value(i).clone())
        .collect()
}

/// Replaces every trainable tensor with normal noise of std `std`, so that
/// zero-initialized biases and unit norm gains do not hide gradient paths.
fn jitter(store: &mut ParamStore<f64>, std: f64, rng: &mut SplitMix64) {
    for id in store.ids() {
        if store.kind(id).trainable() {
            let shape = store.value(id).shape().to_vec();
            let base = store.value(id).clone();
            let noise = Tensor::randn(&shape, std, rng);
            *store.value_mut(id) = base.zip_map(&noise, |a, b| a + b).expect("same shape");
        }
    }
}

/// Block and model configuration shared by the micro checks.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        num_classes: 3,
        base_channels: 8,
        stage_depths: [1; 7],
        top_k_schedule: [
            TopK::Count(2),
            TopK::Count(2),
            TopK::Count(3),
            TopK::Full,
            TopK::Count(3),
            TopK::Count(2),
            TopK::Count(2),
        ],
        partition: 2,
        input_hw: 32,
        ..ModelConfig::default()
    }
}

/// One BiFormer block at C=8 on an 8×8 map with S=2, top-2 routing.
pub fn check_block(seed: u64) -> Result<GradCheckReport> {
    let cfg = micro_config();
    let mut store = ParamStore::<f64>::new();
    let mut rng = SplitMix64::new(seed);
    let block = BiFormerBlock::new(
        &mut Builder::new(&mut store, &mut rng),
        "block",
        8,
        TopK::Count(2),
        &cfg,
        (0, 0),
    );
    jitter(&mut store, 0.1, &mut rng);
    let mut inputs = vec![Tensor::randn(&[1, 8, 8, 8], 1.0, &mut rng)];
    inputs.extend(trainable(&store));
    Ok(grad_check(
        "biformer_block",
        &inputs,
        opts(seed, 24),
        |v| {
            let ctx = Ctx::with_params(v[0].tape(), &store, &v[1..], true);
            block.forward(&ctx, &v[0]).map_err(lower)
        },
    )?)
}

/// A lone attention layer, useful when isolating failures inside a block.
pub fn check_bra(seed: u64) -> Result<GradCheckReport> {
    let cfg = micro_config();
    let mut store = ParamStore::<f64>::new();
    let mut rng = SplitMix64::new(seed);
    let bra = Bra::new(
        &mut Builder::new(&mut store, &mut rng),
        "bra",
        8,
        TopK::Count(2),
        &cfg,
        (0, 0),
    );
    jitter(&mut store, 0.1, &mut rng);
    let mut inputs = vec![Tensor::randn(&[2, 4, 4, 8], 1.0, &mut rng)];
    inputs.extend(trainable(&store));
    Ok(grad_check("bra", &inputs, opts(seed, 24), |v| {
        let ctx = Ctx::with_params(v[0].tape(), &store, &v[1..], true);
        bra.forward(&ctx, &v[0]).map_err(lower)
    })?)
}

/// Gated skip fusion with n=4 on 6×6 maps, batch statistics in train mode.
pub fn check_sccsa(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = SplitMix64::new(seed);
    let s = Sccsa::new(
        &mut Builder::new(&mut store, &mut rng),
        "sccsa",
        4,
        1e-5,
        0.1,
    );
    jitter(&mut store, 0.1, &mut rng);
    let mut inputs = vec![
        Tensor::randn(&[2, 6, 6, 4], 1.0, &mut rng),
        Tensor::randn(&[2, 6, 6, 4], 1.0, &mut rng),
    ];
    inputs.extend(trainable(&store));
    Ok(grad_check("sccsa", &inputs, opts(seed, 24), |v| {
        let ctx = Ctx::with_params(v[0].tape(), &store, &v[2..], true);
        s.forward(&ctx, &v[0], &v[1]).map_err(lower)
    })?)
}

/// Hybrid loss with respect to logits at the default mix.
pub fn check_hybrid_loss(seed: u64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::new(seed);
    let logits = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng);
    let labels = LabelMap::new(&[2, 3, 3], (0..18).map(|_| rng.below(3) as u8).collect())?;
    let cfg = LossConfig::default();
    Ok(grad_check("hybrid_loss", &[logits], opts(seed, 54), |v| {
        Ok(hybrid_loss(&v[0], &labels, &cfg).map_err(lower)?.total)
    })?)
}

/// Whole network at 32×32, C=8, every depth 1, S=2, under the hybrid loss.
pub fn check_network(seed: u64) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::new(&micro_config())?;
    let mut rng = SplitMix64::new(seed);
    jitter(&mut model.params, 0.05, &mut rng);
    let labels = LabelMap::new(
        &[1, 32, 32],
        (0..1024).map(|_| rng.below(3) as u8).collect(),
    )?;
    let mut inputs = vec![Tensor::randn(&[1, 32, 32, 3], 1.0, &mut rng)];
    inputs.extend(trainable(&model.params));
    let loss_cfg = LossConfig::default();
    Ok(grad_check("micro_network", &inputs, opts(seed, 6), |v| {
        let ctx = Ctx::with_params(v[0].tape(), &model.params, &v[1..], true);
        let logits = model.net.forward(&ctx, &v[0]).map_err(lower)?;
        Ok(hybrid_loss(&logits, &labels, &loss_cfg)
            .map_err(lower)?
            .total)
    })?)
}

/// Every composite check in a fixed order.
pub fn composite_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        check_bra(seed)?,
        check_block(seed)?,
        check_sccsa(seed)?,
        check_hybrid_loss(seed)?,
        check_network(seed)?,
    ])
}
