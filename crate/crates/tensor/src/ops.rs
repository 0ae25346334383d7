//! Differentiable operations on [`Var`].

use crate::error::{invalid, mismatch, Result};
use crate::kernels::{self, BatchStats, Conv2dSpec};
use crate::scalar::{lit, Element};
use crate::tape::{OpKind, Var};
use crate::tensor::Tensor;

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    a.zip_map(b, f).expect("shapes checked at record time")
}

impl<'t, T: Element> Var<'t, T> {
    fn unary(
        &self,
        kind: OpKind,
        value: Tensor<T>,
        backward: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>> + 'static,
    ) -> Var<'t, T> {
        self.tape.record(kind, &[self], value, move |g, _| {
            Ok(vec![Some(backward(g)?)])
        })
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("add", &self.value, &other.value)?;
        let v = zip(&self.value, &other.value, |a, b| a + b);
        Ok(self.tape.record(OpKind::Add, &[self, other], v, |g, _| {
            Ok(vec![Some(g.clone()), Some(g.clone())])
        }))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("sub", &self.value, &other.value)?;
        let v = zip(&self.value, &other.value, |a, b| a - b);
        Ok(self.tape.record(OpKind::Sub, &[self, other], v, |g, _| {
            Ok(vec![Some(g.clone()), Some(g.map(|x| -x))])
        }))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("mul", &self.value, &other.value)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        let v = zip(&a, &b, |x, y| x * y);
        Ok(self
            .tape
            .record(OpKind::Mul, &[self, other], v, move |g, need| {
                Ok(vec![
                    need[0].then(|| zip(g, &b, |g, y| g * y)),
                    need[1].then(|| zip(g, &a, |g, x| g * x)),
                ])
            }))
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("div", &self.value, &other.value)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        let v = zip(&a, &b, |x, y| x / y);
        Ok(self
            .tape
            .record(OpKind::Div, &[self, other], v, move |g, need| {
                let da = need[0].then(|| zip(g, &b, |g, y| g / y));
                let db = need[1].then(|| {
                    let t = zip(g, &a, |g, x| g * x);
                    zip(&t, &b, |t, y| -t / (y * y))
                });
                Ok(vec![da, db])
            }))
    }

    /// Adds a `[C]` vector along the last axis.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let c = self.value.last_dim();
        if bias.shape() != [c] {
            return Err(mismatch("add_bias", self.shape(), bias.shape()));
        }
        let b = bias.value.data();
        let mut out = self.value.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v + b[i % c];
        }
        let v = Tensor::new(self.shape(), out)?;
        Ok(self
            .tape
            .record(OpKind::AddBias, &[self, bias], v, move |g, need| {
                let db = need[1].then(|| column_sums(g, c));
                Ok(vec![need[0].then(|| g.clone()), db])
            }))
    }

    /// `a * x + b` with scalar constants.
    pub fn affine(&self, a: T, b: T) -> Var<'t, T> {
        let v = self.value.map(|x| a * x + b);
        self.unary(OpKind::Affine, v, move |g| Ok(g.scale(a)))
    }

    pub fn scale(&self, a: T) -> Var<'t, T> {
        self.affine(a, T::zero())
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.affine(-T::one(), T::zero())
    }

    pub fn square(&self) -> Var<'t, T> {
        let x = self.value.clone();
        let v = x.map(|v| v * v);
        self.unary(OpKind::Square, v, move |g| {
            Ok(zip(g, &x, |g, x| lit::<T>(2.0) * g * x))
        })
    }

    pub fn log(&self) -> Var<'t, T> {
        let x = self.value.clone();
        let v = x.map(|v| v.ln());
        self.unary(OpKind::Log, v, move |g| Ok(zip(g, &x, |g, x| g / x)))
    }

    pub fn relu(&self) -> Var<'t, T> {
        let x = self.value.clone();
        let v = x.map(|v| v.max(T::zero()));
        self.unary(OpKind::Relu, v, move |g| {
            Ok(zip(g, &x, |g, x| if x > T::zero() { g } else { T::zero() }))
        })
    }

    pub fn gelu(&self) -> Var<'t, T> {
        let x = self.value.clone();
        let v = x.map(kernels::gelu);
        self.unary(OpKind::Gelu, v, move |g| {
            Ok(zip(g, &x, |g, x| g * kernels::gelu_grad(x)))
        })
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let y = self.value.map(kernels::sigmoid);
        let saved = y.clone();
        self.unary(OpKind::Sigmoid, y, move |g| {
            Ok(zip(g, &saved, |g, y| g * y * (T::one() - y)))
        })
    }

    /// Gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&self, lo: T, hi: T) -> Var<'t, T> {
        let x = self.value.clone();
        let v = x.map(|v| v.max(lo).min(hi));
        self.unary(OpKind::Clamp, v, move |g| {
            Ok(zip(
                g,
                &x,
                |g, x| if x > lo && x < hi { g } else { T::zero() },
            ))
        })
    }

    pub fn sum_all(&self) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        let v = Tensor::scalar(self.value.sum());
        self.unary(OpKind::SumAll, v, move |g| {
            Ok(Tensor::full(&shape, g.item()))
        })
    }

    pub fn mean_all(&self) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        let n: T = lit(self.value.numel().max(1) as f64);
        let v = Tensor::scalar(self.value.sum() / n);
        self.unary(OpKind::MeanAll, v, move |g| {
            Ok(Tensor::full(&shape, g.item() / n))
        })
    }

    /// Sums over every axis but the last: `[.., C] -> [C]`.
    pub fn sum_leading(&self) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        let c = self.value.last_dim();
        let v = column_sums(&self.value, c);
        self.unary(OpKind::SumLeading, v, move |g| {
            let gd = g.data();
            Ok(Tensor::from_fn(&shape, |i| gd[i % c]))
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let orig = self.shape().to_vec();
        let v = self.value.reshape(shape)?;
        Ok(self.unary(OpKind::Reshape, v, move |g| g.reshape(&orig)))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value.permute(axes)?;
        let mut inv = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        Ok(self.unary(OpKind::Permute, v, move |g| g.permute(&inv)))
    }

    /// Concatenation along the last axis.
    pub fn concat(parts: &[&Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let lead = &first.shape()[..first.value.rank().saturating_sub(1)];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let r = p.value.rank();
            if r == 0 || &p.shape()[..r - 1] != lead {
                return Err(mismatch("concat", first.shape(), p.shape()));
            }
            widths.push(p.value.last_dim());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let v = Tensor::new(&shape, out)?;
        let tape = first.tape;
        Ok(tape.record(OpKind::Concat, parts, v, move |g, need| {
            let gd = g.data();
            let mut grads = Vec::with_capacity(widths.len());
            let mut off = 0;
            for (i, &w) in widths.iter().enumerate() {
                if need[i] {
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                    }
                    let mut s = shape[..shape.len() - 1].to_vec();
                    s.push(w);
                    grads.push(Some(Tensor::new(&s, part)?));
                } else {
                    grads.push(None);
                }
                off += w;
            }
            Ok(grads)
        }))
    }

    /// `x: [N,R,T,C]`, `index: [N,R,k]` region ids -> `[N,R,k*T,C]`, the
    /// selected regions' tokens stacked in index order.
    pub fn gather_regions(&self, index: &[usize], k: usize) -> Result<Var<'t, T>> {
        if self.value.rank() != 4 {
            return Err(invalid(
                "gather",
                format!("expected rank 4, got {:?}", self.shape()),
            ));
        }
        let (n, r, t, c) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        if index.len() != n * r * k {
            return Err(invalid(
                "gather",
                format!("index length {} != {n}*{r}*{k}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(invalid(
                "gather",
                format!("region id {bad} out of range {r}"),
            ));
        }
        let block = t * c;
        let src = self.value.data();
        let mut out = Vec::with_capacity(n * r * k * block);
        for b in 0..n {
            for q in 0..r {
                for j in 0..k {
                    let s = (b * r + index[(b * r + q) * k + j]) * block;
                    out.extend_from_slice(&src[s..s + block]);
                }
            }
        }
        let v = Tensor::new(&[n, r, k * t, c], out)?;
        let index = index.to_vec();
        let in_shape = self.shape().to_vec();
        Ok(self.unary(OpKind::Gather, v, move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); n * r * block];
            for b in 0..n {
                for q in 0..r {
                    for j in 0..k {
                        let d = (b * r + index[(b * r + q) * k + j]) * block;
                        let s = ((b * r + q) * k + j) * block;
                        for e in 0..block {
                            dx[d + e] = dx[d + e] + gd[s + e];
                        }
                    }
                }
            }
            Tensor::new(&in_shape, dx)
        }))
    }

    pub fn matmul(&self, b: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(b, false)
    }

    /// `self · bᵀ` over the last two axes.
    pub fn matmul_t(&self, b: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(b, true)
    }

    fn matmul_impl(&self, b: &Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        let v = kernels::matmul_forward(&self.value, &b.value, trans_b)?;
        let (av, bv) = (self.value.clone(), b.value.clone());
        let kind = if trans_b {
            OpKind::MatMulT
        } else {
            OpKind::MatMul
        };
        Ok(self.tape.record(kind, &[self, b], v, move |g, need| {
            let (da, db) = kernels::matmul_backward(&av, &bv, trans_b, g, need[0], need[1])?;
            Ok(vec![da, db])
        }))
    }

    /// Softmax of `scale * x` along the last axis.
    pub fn softmax(&self, scale: T) -> Var<'t, T> {
        let y = kernels::softmax_forward(&self.value, scale);
        let saved = y.clone();
        self.unary(OpKind::Softmax, y, move |g| {
            Ok(kernels::softmax_backward(&saved, g, scale))
        })
    }

    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (y, cache) = kernels::layer_norm_forward(&self.value, &gamma.value, &beta.value, eps)?;
        let gv = gamma.value.clone();
        Ok(self.tape.record(
            OpKind::LayerNorm,
            &[self, gamma, beta],
            y,
            move |g, need| {
                let (dx, dg, db) = kernels::layer_norm_backward(&cache, &gv, g);
                Ok(vec![
                    need[0].then_some(dx),
                    need[1].then_some(dg),
                    need[2].then_some(db),
                ])
            },
        ))
    }

    /// Training-mode batch norm over all axes but the last; also returns the batch statistics.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        eps: T,
    ) -> Result<(Var<'t, T>, BatchStats<T>)> {
        let (y, cache, stats) =
            kernels::batch_norm_train_forward(&self.value, &gamma.value, &beta.value, eps)?;
        let gv = gamma.value.clone();
        let out = self.tape.record(
            OpKind::BatchNorm,
            &[self, gamma, beta],
            y,
            move |g, need| {
                let (dx, dg, db) = kernels::batch_norm_train_backward(&cache, &gv, g);
                Ok(vec![
                    need[0].then_some(dx),
                    need[1].then_some(dg),
                    need[2].then_some(db),
                ])
            },
        );
        Ok((out, stats))
    }

    /// Batch norm with fixed statistics.
    pub fn batch_norm_infer(
        &self,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        eps: T,
    ) -> Result<Var<'t, T>> {
        let (y, cache) = kernels::batch_norm_infer_forward(
            &self.value,
            mean,
            var,
            &gamma.value,
            &beta.value,
            eps,
        )?;
        let gv = gamma.value.clone();
        let c = gv.numel();
        Ok(self.tape.record(
            OpKind::BatchNormInfer,
            &[self, gamma, beta],
            y,
            move |g, need| {
                let dx = need[0].then(|| {
                    let gd = gv.data();
                    let mut d = g.data().to_vec();
                    for (i, v) in d.iter_mut().enumerate() {
                        *v = *v * gd[i % c] * cache.rstd[i % c];
                    }
                    Tensor::new(g.shape(), d).expect("shape")
                });
                let dg = need[1].then(|| column_sums(&zip(g, &cache.xhat, |a, b| a * b), c));
                let db = need[2].then(|| column_sums(g, c));
                Ok(vec![dx, dg, db])
            },
        ))
    }

    /// Bias-free convolution, `w: [kh,kw,Cin/groups,Cout]`.
    pub fn conv2d(&self, w: &Var<'t, T>, spec: Conv2dSpec) -> Result<Var<'t, T>> {
        let y = kernels::conv2d_forward(&self.value, &w.value, spec)?;
        let (xv, wv) = (self.value.clone(), w.value.clone());
        Ok(self
            .tape
            .record(OpKind::Conv2d, &[self, w], y, move |g, need| {
                let (dx, dw) = kernels::conv2d_backward(&xv, &wv, g, spec, need[0], need[1])?;
                Ok(vec![dx, dw])
            }))
    }
}

/// `[.., C] -> [C]` column sums.
fn column_sums<T: Element>(x: &Tensor<T>, c: usize) -> Tensor<T> {
    let mut s = vec![T::zero(); c];
    if c > 0 {
        for row in x.data().chunks(c) {
            for (a, &v) in s.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
    }
    Tensor::new(&[c], s).expect("shape")
}

#[cfg(test)]
mod tests {
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[3], &[1., -2., 5.]).unwrap());
        let g = tape.backward(&x.sum_all()).unwrap();
        assert_eq!(g.wrt(&x).data(), &[1., 1., 1.]);
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[3], &[1., -2., 5.]).unwrap());
        let l = x.mul(&x).unwrap().sum_all();
        let g = tape.backward(&l).unwrap();
        assert_eq!(g.wrt(&x).data(), &[2., -4., 10.]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[3., -1.]).unwrap());
        let l = x.sum_all().add(&x.mul(&x).unwrap().sum_all()).unwrap();
        let g = tape.backward(&l).unwrap();
        assert_eq!(g.wrt(&x).data(), &[7., -1.]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(tape.backward(&x.square()).is_err());
    }

    #[test]
    fn concat_and_gather_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::ones(&[2, 3, 2]));
        let b = tape.leaf(Tensor::zeros(&[2, 3, 5]));
        let c = super::Var::concat(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 7]);
        let x = tape.leaf(Tensor::from_fn(&[1, 4, 2, 3], |i| i as f32));
        let y = x.gather_regions(&[3, 0, 1, 1, 2, 2, 0, 3], 2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 3]);
        assert_eq!(y.value().at(&[0, 0, 0, 0]), 18.0);
        assert!(x.gather_regions(&[4; 8], 2).is_err());
    }

    #[test]
    fn batch_norm_infer_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2, 2], &[0.3, -1.0, 2.0, 4.0]).unwrap());
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = x
            .batch_norm_infer(&Tensor::zeros(&[2]), &Tensor::ones(&[2]), &g, &b, 0.0)
            .unwrap();
        assert!(y.value().bit_eq(x.value()));
    }
}
