//! Soft dice, per-class binary cross-entropy and their convex mix, built from
//! tape ops so gradients reach the logits.

use brau_tensor::{lit, Element, Tensor, Var};

use crate::config::LossConfig;
use crate::error::{BrauError, Result};
use crate::labels::LabelMap;

#[derive(Clone)]
pub struct LossParts<'t, T: Element> {
    pub total: Var<'t, T>,
    pub dice: Var<'t, T>,
    pub ce: Var<'t, T>,
}

/// Softmax over the class axis.
pub fn probabilities<'t, T: Element>(logits: &Var<'t, T>) -> Var<'t, T> {
    logits.softmax(T::one())
}

fn targets<'t, T: Element>(p: &Var<'t, T>, g: &LabelMap) -> Result<Var<'t, T>> {
    let k = p.value().last_dim();
    if p.shape()[..p.shape().len() - 1] != *g.dims() {
        return Err(BrauError::Invalid(format!(
            "probabilities {:?} do not match labels {:?}",
            p.shape(),
            g.dims()
        )));
    }
    g.check_classes(k)?;
    Ok(p.tape().constant(g.one_hot(k)))
}

/// `1 - Σ_k ω_k (2Σpg + eps) / (Σp² + Σg² + eps)`, sums over every pixel of
/// the batch. `weights` defaults to `1/K` each.
pub fn dice_loss<'t, T: Element>(
    p: &Var<'t, T>,
    g: &LabelMap,
    weights: Option<&[f64]>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let k = p.value().last_dim();
    let w = match weights {
        Some(w) => {
            let s: f64 = w.iter().sum();
            if w.len() != k || (s - 1.0).abs() > 1e-6 {
                return Err(BrauError::Invalid(format!(
                    "dice weights must be {k} values summing to 1, sum is {s}"
                )));
            }
            w.to_vec()
        }
        None => vec![1.0 / k as f64; k],
    };
    if eps <= 0.0 {
        return Err(BrauError::Invalid("dice eps must be positive".into()));
    }
    let gv = targets(p, g)?;
    let tape = p.tape();
    let eps: T = lit(eps);
    let inter = p.mul(&gv)?.sum_leading().affine(lit(2.0), eps);
    // one-hot targets square to themselves, so Σg² is the class count
    let mut counts = vec![T::zero(); k];
    for &c in g.data() {
        counts[c as usize] = counts[c as usize] + T::one();
    }
    let g_sum = tape.constant(Tensor::new(&[k], counts)?);
    let den = p.square().sum_leading().add(&g_sum)?.affine(T::one(), eps);
    let ratio = inter.div(&den)?;
    let wv = tape.constant(Tensor::new(&[k], w.iter().map(|&x| lit(x)).collect())?);
    Ok(ratio.mul(&wv)?.sum_all().affine(-T::one(), T::one()))
}

/// `-(g·ln p + (1-g)·ln(1-p))` per class, averaged over pixels and classes,
/// with `p` clamped to `[clamp, 1-clamp]`.
pub fn ce_loss<'t, T: Element>(p: &Var<'t, T>, g: &LabelMap, clamp: f64) -> Result<Var<'t, T>> {
    let gv = targets(p, g)?;
    let pc = p.clamp(lit(clamp), lit(1.0 - clamp));
    let pos = gv.mul(&pc.log())?;
    let not_g = p.tape().constant(gv.value().map(|x| T::one() - x));
    let neg = not_g.mul(&pc.affine(-T::one(), T::one()).log())?;
    Ok(pos.add(&neg)?.mean_all().neg())
}

/// `λ·dice + (1-λ)·ce` on softmax probabilities of `logits`.
pub fn hybrid_loss<'t, T: Element>(
    logits: &Var<'t, T>,
    g: &LabelMap,
    cfg: &LossConfig,
) -> Result<LossParts<'t, T>> {
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(BrauError::Invalid(format!(
            "loss lambda {} outside [0,1]",
            cfg.lambda
        )));
    }
    let p = probabilities(logits);
    let dice = dice_loss(&p, g, None, cfg.dice_eps)?;
    let ce = ce_loss(&p, g, cfg.ce_clamp)?;
    let total = dice
        .scale(lit(cfg.lambda))
        .add(&ce.scale(lit(1.0 - cfg.lambda)))?;
    Ok(LossParts { total, dice, ce })
}
