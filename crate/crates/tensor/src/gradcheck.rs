//! Central-difference gradient verification.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::kernels::Conv2dSpec;
use crate::rng::SplitMix64;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator.
pub const REL_ERR_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Checks at most this many coordinates per input, spread by a seeded shuffle.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Skips a failing coordinate when the analytic value matches one of the
    /// one-sided differences instead: the step then straddles a kink (a relu
    /// crossing zero), where central differences average two slopes.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 0x5eed,
            skip_kinks: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordError {
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub tol: f64,
    /// Worst coordinate for each input, `None` for empty inputs.
    pub worst: Vec<Option<CoordError>>,
    pub checked: usize,
    /// Coordinates excluded as kinks.
    pub skipped: usize,
}

impl GradCheckReport {
    /// Also fails when more than a tenth of the coordinates were skipped.
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol && self.skipped * 10 <= self.checked
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<20} {} max_rel_err={:.3e} tol={:.0e}",
            self.op,
            if self.passed() { "ok  " } else { "FAIL" },
            self.max_rel_err,
            self.tol
        )?;
        if self.skipped > 0 {
            write!(f, " kinks={}/{}", self.skipped, self.checked)?;
        }
        if let Some((i, w)) = self
            .worst
            .iter()
            .enumerate()
            .filter_map(|(i, w)| w.map(|w| (i, w)))
            .max_by(|a, b| a.1.rel_err.total_cmp(&b.1.rel_err))
        {
            write!(
                f,
                " worst=input{i}[{}] analytic={:.6e} numeric={:.6e}",
                w.coord, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(REL_ERR_EPS)
}

/// Compares the tape gradient of `f(inputs)` with central differences.
/// Non-scalar outputs are reduced with a fixed random projection.
pub fn grad_check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let mut rng = SplitMix64::new(opts.seed);
    let mut projection: Option<Tensor<f64>> = None;

    let mut run =
        |vals: &[Tensor<f64>], tape: &Tape<f64>| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
            let vars: Vec<Var<'_, f64>> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let out = f(&vars)?;
            out.value().check_finite(name)?;
            let loss = if out.value().numel() == 1 {
                out.reshape(&[])?
            } else {
                let p = projection
                    .get_or_insert_with(|| Tensor::randn(out.shape(), 1.0, &mut rng))
                    .clone();
                if p.shape() != out.shape() {
                    return Err(TensorError::InvalidArgument {
                        op: "grad_check",
                        msg: "output shape changed between evaluations".into(),
                    });
                }
                out.mul(&tape.constant(p))?.sum_all()
            };
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(TensorError::NonFinite(name.to_string()));
            }
            if !tape.is_enabled() {
                return Ok((value, None));
            }
            let grads = tape.backward(&loss)?;
            Ok((value, Some(vars.iter().map(|v| grads.wrt(v)).collect())))
        };

    let tape = Tape::new();
    let (f0, analytic) = run(inputs, &tape)?;
    let analytic = analytic.expect("tracked tape");

    let mut coord_rng = SplitMix64::new(opts.seed ^ 0x9e37_79b9);
    let mut worst = Vec::with_capacity(inputs.len());
    let mut max_rel = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for (i, input) in inputs.iter().enumerate() {
        let mut coords: Vec<usize> = (0..input.numel()).collect();
        if let Some(m) = opts.max_coords {
            if coords.len() > m {
                coord_rng.shuffle(&mut coords);
                coords.truncate(m);
                coords.sort_unstable();
            }
        }
        let mut w: Option<CoordError> = None;
        for c in coords {
            let mut vals = inputs.to_vec();
            let orig = input.data()[c];
            vals[i].data_mut()[c] = orig + opts.step;
            let (fp, _) = run(&vals, &Tape::no_grad())?;
            vals[i].data_mut()[c] = orig - opts.step;
            let (fm, _) = run(&vals, &Tape::no_grad())?;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[i].data()[c];
            let e = rel_err(a, numeric);
            checked += 1;
            if opts.skip_kinks && e >= opts.tol {
                let fwd = (fp - f0) / opts.step;
                let bwd = (f0 - fm) / opts.step;
                if rel_err(a, fwd) < opts.tol || rel_err(a, bwd) < opts.tol {
                    skipped += 1;
                    continue;
                }
            }
            if w.is_none_or(|w| e > w.rel_err) {
                w = Some(CoordError {
                    coord: c,
                    analytic: a,
                    numeric,
                    rel_err: e,
                });
            }
            max_rel = max_rel.max(e);
        }
        worst.push(w);
    }
    Ok(GradCheckReport {
        op: name.to_string(),
        max_rel_err: max_rel,
        tol: opts.tol,
        worst,
        checked,
        skipped,
    })
}

/// Values with magnitude in `[margin, 1 + margin)` and random sign, away from kinks at zero.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = margin + rng.next_f64();
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| 0.5 + rng.next_f64())
}

/// Gradient check of one op kind at small randomized shapes.
pub fn check_op(kind: OpKind, seed: u64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::derived(seed, kind as u64, 0);
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let d = |rng: &mut SplitMix64| rng.range_inclusive(2, 4);
    let (a, b, c) = (d(&mut rng), d(&mut rng), d(&mut rng));
    let name = kind.name();
    let randn = |shape: &[usize], rng: &mut SplitMix64| Tensor::<f64>::randn(shape, 1.0, rng);
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let x = randn(&[a, b], &mut rng);
            let y = if kind == OpKind::Div {
                away_from_zero(&[a, b], 0.5, &mut rng)
            } else {
                randn(&[a, b], &mut rng)
            };
            grad_check(name, &[x, y], opts, move |v| match kind {
                OpKind::Add => v[0].add(&v[1]),
                OpKind::Sub => v[0].sub(&v[1]),
                OpKind::Mul => v[0].mul(&v[1]),
                _ => v[0].div(&v[1]),
            })
        }
        OpKind::AddBias => grad_check(
            name,
            &[randn(&[a, b, c], &mut rng), randn(&[c], &mut rng)],
            opts,
            |v| v[0].add_bias(&v[1]),
        ),
        OpKind::Affine => grad_check(name, &[randn(&[a, b], &mut rng)], opts, |v| {
            Ok(v[0].affine(-1.7, 0.3))
        }),
        OpKind::Square => grad_check(name, &[randn(&[a, b], &mut rng)], opts, |v| {
            Ok(v[0].square())
        }),
        OpKind::Log => grad_check(name, &[positive(&[a, b], &mut rng)], opts, |v| {
            Ok(v[0].log())
        }),
        OpKind::Relu => grad_check(
            name,
            &[away_from_zero(&[a, b], 0.05, &mut rng)],
            opts,
            |v| Ok(v[0].relu()),
        ),
        OpKind::Gelu => grad_check(name, &[randn(&[a, b], &mut rng).scale(2.0)], opts, |v| {
            Ok(v[0].gelu())
        }),
        OpKind::Sigmoid => grad_check(name, &[randn(&[a, b], &mut rng).scale(2.0)], opts, |v| {
            Ok(v[0].sigmoid())
        }),
        OpKind::Clamp => {
            // keep samples away from the clamp edges at +-0.5
            let x = Tensor::from_fn(&[a, b], |i| [-0.9, -0.2, 0.1, 0.35, 0.8, -0.4, 1.3][i % 7]);
            grad_check(name, &[x], opts, |v| Ok(v[0].clamp(-0.5, 0.5)))
        }
        OpKind::SumAll => grad_check(name, &[randn(&[a, b], &mut rng)], opts, |v| {
            Ok(v[0].sum_all())
        }),
        OpKind::MeanAll => grad_check(name, &[randn(&[a, b], &mut rng)], opts, |v| {
            Ok(v[0].mean_all())
        }),
        OpKind::SumLeading => grad_check(name, &[randn(&[a, b, c], &mut rng)], opts, |v| {
            Ok(v[0].sum_leading())
        }),
        OpKind::Reshape => grad_check(name, &[randn(&[a, b, c], &mut rng)], opts, move |v| {
            v[0].reshape(&[a * b, c])
        }),
        OpKind::Permute => grad_check(name, &[randn(&[a, b, c], &mut rng)], opts, |v| {
            v[0].permute(&[2, 0, 1])
        }),
        OpKind::Concat => grad_check(
            name,
            &[
                randn(&[a, b], &mut rng),
                randn(&[a, c], &mut rng),
                randn(&[a, 1], &mut rng),
            ],
            opts,
            |v| Var::concat(&[&v[0], &v[1], &v[2]]),
        ),
        OpKind::Gather => {
            let (n, r, k) = (2, 4, 2);
            let index: Vec<usize> = (0..n * r * k)
                .map(|_| rng.below(r as u64) as usize)
                .collect();
            grad_check(name, &[randn(&[n, r, a, b], &mut rng)], opts, move |v| {
                v[0].gather_regions(&index, k)
            })
        }
        OpKind::MatMul => grad_check(
            name,
            &[randn(&[2, a, b], &mut rng), randn(&[2, b, c], &mut rng)],
            opts,
            |v| v[0].matmul(&v[1]),
        ),
        OpKind::MatMulT => grad_check(
            name,
            &[randn(&[a, b], &mut rng), randn(&[c, b], &mut rng)],
            opts,
            |v| v[0].matmul_t(&v[1]),
        ),
        OpKind::Softmax => grad_check(name, &[randn(&[a, b, c], &mut rng)], opts, |v| {
            Ok(v[0].softmax(0.7))
        }),
        OpKind::LayerNorm => grad_check(
            name,
            &[
                randn(&[a, b, c + 1], &mut rng),
                randn(&[c + 1], &mut rng),
                randn(&[c + 1], &mut rng),
            ],
            opts,
            |v| v[0].layer_norm(&v[1], &v[2], 1e-6),
        ),
        OpKind::BatchNorm => grad_check(
            name,
            &[
                randn(&[2, a, b, c], &mut rng),
                randn(&[c], &mut rng),
                randn(&[c], &mut rng),
            ],
            opts,
            |v| Ok(v[0].batch_norm(&v[1], &v[2], 1e-5)?.0),
        ),
        OpKind::BatchNormInfer => {
            let mean = randn(&[c], &mut rng);
            let var = positive(&[c], &mut rng);
            grad_check(
                name,
                &[
                    randn(&[a, b, c], &mut rng),
                    randn(&[c], &mut rng),
                    randn(&[c], &mut rng),
                ],
                opts,
                move |v| v[0].batch_norm_infer(&mean, &var, &v[1], &v[2], 1e-5),
            )
        }
        OpKind::Conv2d => {
            let mut worst: Option<GradCheckReport> = None;
            // dense strided, grouped, and depthwise geometries
            for (k, cin, cout, spec) in [
                (3, 2, 3, Conv2dSpec::new(2, 1, 1)),
                (3, 4, 6, Conv2dSpec::new(1, 1, 2)),
                (5, 3, 3, Conv2dSpec::new(1, 2, 3)),
            ] {
                let r = grad_check(
                    name,
                    &[
                        randn(&[2, a + 3, b + 3, cin], &mut rng),
                        randn(&[k, k, cin / spec.groups, cout], &mut rng),
                    ],
                    opts,
                    move |v| v[0].conv2d(&v[1], spec),
                )?;
                if worst.as_ref().is_none_or(|w| r.max_rel_err > w.max_rel_err) {
                    worst = Some(r);
                }
            }
            Ok(worst.expect("three geometries"))
        }
        OpKind::Leaf | OpKind::Custom => Err(TensorError::InvalidArgument {
            op: "grad_check",
            msg: format!("{kind} has no built-in backward"),
        }),
    }
}

/// One report per differentiable op kind.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    OpKind::DIFFERENTIABLE
        .iter()
        .map(|&k| check_op(k, seed))
        .collect()
}

/// `y = x²` recorded as a custom op whose backward is scaled by `factor`.
pub fn scaled_square_check(factor: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::new(seed);
    let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    grad_check(
        "custom_square",
        &[x],
        GradCheckOptions::default(),
        move |v| {
            let x = v[0].value().clone();
            let y = x.map(|t| t * t);
            Ok(v[0].tape().custom(&[&v[0]], y, move |g, _| {
                Ok(vec![Some(g.zip_map(&x, |g, x| 2.0 * x * g * factor)?)])
            }))
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_passes_tight() {
        let mut rng = SplitMix64::new(9);
        let a = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[4, 1], 1.0, &mut rng);
        let opts = GradCheckOptions {
            tol: 1e-6,
            ..Default::default()
        };
        let r = grad_check("quadratic", &[x], opts, move |v| {
            let a = v[0].tape().constant(a.clone());
            let ax = a.matmul(&v[0])?;
            let xt = v[0].permute(&[1, 0])?;
            xt.matmul(&ax)
        })
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn corrupted_backward_fails() {
        let good = scaled_square_check(1.0, 1).unwrap();
        assert!(good.passed(), "{good}");
        let bad = scaled_square_check(1.01, 1).unwrap();
        assert!(!bad.passed(), "{bad}");
        assert!(bad.max_rel_err > 5e-3);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::<f64>::from_f64(&[2], &[-1.0, 2.0]).unwrap();
        let r = grad_check("log", &[x], GradCheckOptions::default(), |v| Ok(v[0].log()));
        assert!(matches!(r, Err(TensorError::NonFinite(_))));
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.01) - 0.01 / 1.01).abs() < 1e-15);
    }
}
