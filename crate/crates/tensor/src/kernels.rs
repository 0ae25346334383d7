//! Forward and backward kernels on plain tensors. All reductions run in a
//! fixed sequential order, so results do not depend on threading.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{invalid, mismatch, Result};
use crate::scalar::{lit, Element};
use crate::tensor::Tensor;

/// `c = op(a) · op(b) + beta · c` with `op(a)` of shape `[m, k]` and `op(b)` of `[k, n]`.
/// A transposed operand is stored row-major in its transposed shape.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    let av = if trans_a {
        ArrayView2::from_shape((k, m), a)
            .expect("gemm a")
            .reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm a")
    };
    let bv = if trans_b {
        ArrayView2::from_shape((n, k), b)
            .expect("gemm b")
            .reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm b")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    general_mat_mul(T::one(), &av, &bv, beta, &mut cv);
}

/// Geometry of a (batched) matrix product.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single matrix shared by every batch entry.
    pub b_shared: bool,
    pub out_shape: Vec<usize>,
}

/// `a: [.., M, K]`, `b: [.., K, N]` (or `[.., N, K]` when `trans_b`), or
/// `b` rank 2 and broadcast over the batch of `a`.
pub fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != bk {
        return Err(mismatch("matmul", a, b));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let b_shared = b_batch.is_empty();
    if !b_shared && a_batch != b_batch {
        return Err(mismatch("matmul", a, b));
    }
    let mut out_shape = a_batch.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulDims {
        batch: a_batch.iter().product(),
        m,
        k,
        n,
        b_shared,
        out_shape,
    })
}

pub fn matmul_forward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_b: bool,
) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape(), trans_b)?;
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    if d.b_shared {
        gemm(
            d.batch * d.m,
            d.k,
            d.n,
            a.data(),
            false,
            b.data(),
            trans_b,
            T::zero(),
            &mut out,
        );
    } else {
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            gemm(
                d.m,
                d.k,
                d.n,
                &a.data()[i * sa..(i + 1) * sa],
                false,
                &b.data()[i * sb..(i + 1) * sb],
                trans_b,
                T::zero(),
                &mut out[i * sc..(i + 1) * sc],
            );
        }
    }
    Tensor::new(&d.out_shape, out)
}

/// Gradients of `c = a · op(b)`: `dA = dC · op(b)ᵀ`, `dB = op(a)ᵀ · dC`
/// (summed over the batch when `b` is shared).
pub fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_b: bool,
    dc: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let d = matmul_dims(a.shape(), b.shape(), trans_b)?;
    let mut da = None;
    let mut db = None;
    if d.b_shared {
        let rows = d.batch * d.m;
        if need_a {
            let mut g = vec![T::zero(); rows * d.k];
            gemm(
                rows,
                d.n,
                d.k,
                dc.data(),
                false,
                b.data(),
                !trans_b,
                T::zero(),
                &mut g,
            );
            da = Some(Tensor::new(a.shape(), g)?);
        }
        if need_b {
            let mut g = vec![T::zero(); d.k * d.n];
            if trans_b {
                gemm(
                    d.n,
                    rows,
                    d.k,
                    dc.data(),
                    true,
                    a.data(),
                    false,
                    T::zero(),
                    &mut g,
                );
            } else {
                gemm(
                    d.k,
                    rows,
                    d.n,
                    a.data(),
                    true,
                    dc.data(),
                    false,
                    T::zero(),
                    &mut g,
                );
            }
            db = Some(Tensor::new(b.shape(), g)?);
        }
    } else {
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        if need_a {
            let mut g = vec![T::zero(); d.batch * sa];
            for i in 0..d.batch {
                gemm(
                    d.m,
                    d.n,
                    d.k,
                    &dc.data()[i * sc..(i + 1) * sc],
                    false,
                    &b.data()[i * sb..(i + 1) * sb],
                    !trans_b,
                    T::zero(),
                    &mut g[i * sa..(i + 1) * sa],
                );
            }
            da = Some(Tensor::new(a.shape(), g)?);
        }
        if need_b {
            let mut g = vec![T::zero(); d.batch * sb];
            for i in 0..d.batch {
                let (ai, ci) = (
                    &a.data()[i * sa..(i + 1) * sa],
                    &dc.data()[i * sc..(i + 1) * sc],
                );
                let gi = &mut g[i * sb..(i + 1) * sb];
                if trans_b {
                    gemm(d.n, d.m, d.k, ci, true, ai, false, T::zero(), gi);
                } else {
                    gemm(d.k, d.m, d.n, ai, true, ci, false, T::zero(), gi);
                }
            }
            db = Some(Tensor::new(b.shape(), g)?);
        }
    }
    Ok((da, db))
}

/// Stride, symmetric zero padding and channel groups of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1 with `(k - 1) / 2` padding.
    pub fn same(k: usize) -> Self {
        Self::new(1, (k - 1) / 2, 1)
    }

    pub fn out_extent(&self, extent: usize, k: usize) -> usize {
        (extent + 2 * self.padding - k) / self.stride + 1
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cg: usize,
    cout: usize,
    cog: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn depthwise(&self) -> bool {
        self.cg == 1 && self.cog == 1
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cg
    }

    /// Input coordinate for output `o` and tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let p = (o * self.spec.stride + t) as isize - self.spec.padding as isize;
        if p >= 0 && (p as usize) < extent {
            Some(p as usize)
        } else {
            None
        }
    }
}

fn conv_geom(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 {
        return Err(mismatch("conv2d", x, w));
    }
    let (n, h, wd, cin) = (x[0], x[1], x[2], x[3]);
    let (kh, kw, cg, cout) = (w[0], w[1], w[2], w[3]);
    if n == 0 {
        return Err(invalid("conv2d", "zero-size batch"));
    }
    if spec.groups == 0 || spec.stride == 0 {
        return Err(invalid("conv2d", "groups and stride must be positive"));
    }
    if cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(invalid(
            "conv2d",
            format!(
                "channels {cin}->{cout} not divisible by groups {}",
                spec.groups
            ),
        ));
    }
    if cg != cin / spec.groups {
        return Err(mismatch("conv2d", x, w));
    }
    if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
        return Err(invalid(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
        ));
    }
    Ok(ConvGeom {
        n,
        h,
        w: wd,
        cin,
        kh,
        kw,
        cg,
        cout,
        cog: cout / spec.groups,
        ho: spec.out_extent(h, kh),
        wo: spec.out_extent(wd, kw),
        spec,
    })
}

/// Patch matrix `[rows, kh*kw*cg]` for channel group `g`.
fn im2col<T: Element>(x: &[T], geo: &ConvGeom, g: usize) -> Vec<T> {
    let patch = geo.patch();
    let mut cols = vec![T::zero(); geo.rows() * patch];
    let c0 = g * geo.cg;
    for b in 0..geo.n {
        for oy in 0..geo.ho {
            for ox in 0..geo.wo {
                let row = (b * geo.ho + oy) * geo.wo + ox;
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for i in 0..geo.kh {
                    let Some(iy) = geo.src(oy, i, geo.h) else {
                        continue;
                    };
                    for j in 0..geo.kw {
                        let Some(ix) = geo.src(ox, j, geo.w) else {
                            continue;
                        };
                        let s = ((b * geo.h + iy) * geo.w + ix) * geo.cin + c0;
                        let d = (i * geo.kw + j) * geo.cg;
                        dst[d..d + geo.cg].copy_from_slice(&x[s..s + geo.cg]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Element>(cols: &[T], geo: &ConvGeom, g: usize, dx: &mut [T]) {
    let patch = geo.patch();
    let c0 = g * geo.cg;
    for b in 0..geo.n {
        for oy in 0..geo.ho {
            for ox in 0..geo.wo {
                let row = (b * geo.ho + oy) * geo.wo + ox;
                let src = &cols[row * patch..(row + 1) * patch];
                for i in 0..geo.kh {
                    let Some(iy) = geo.src(oy, i, geo.h) else {
                        continue;
                    };
                    for j in 0..geo.kw {
                        let Some(ix) = geo.src(ox, j, geo.w) else {
                            continue;
                        };
                        let d = ((b * geo.h + iy) * geo.w + ix) * geo.cin + c0;
                        let s = (i * geo.kw + j) * geo.cg;
                        for c in 0..geo.cg {
                            dx[d + c] = dx[d + c] + src[s + c];
                        }
                    }
                }
            }
        }
    }
}

/// Columns `[g*cog, (g+1)*cog)` of a row-major `[rows, cols]` matrix.
fn column_block<T: Element>(
    m: &[T],
    rows: usize,
    cols: usize,
    start: usize,
    width: usize,
) -> Vec<T> {
    if start == 0 && width == cols {
        return m.to_vec();
    }
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&m[r * cols + start..r * cols + start + width]);
    }
    out
}

fn scatter_column_block<T: Element>(
    dst: &mut [T],
    cols: usize,
    start: usize,
    block: &[T],
    width: usize,
) {
    for (r, chunk) in block.chunks(width).enumerate() {
        dst[r * cols + start..r * cols + start + width].copy_from_slice(chunk);
    }
}

/// `x: [N,H,W,Cin]`, `w: [kh,kw,Cin/groups,Cout]`; no bias.
pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let geo = conv_geom(x.shape(), w.shape(), spec)?;
    let out_shape = [geo.n, geo.ho, geo.wo, geo.cout];
    let mut out = vec![T::zero(); geo.rows() * geo.cout];
    if geo.depthwise() {
        depthwise_forward(x.data(), w.data(), &geo, &mut out);
        return Tensor::new(&out_shape, out);
    }
    let patch = geo.patch();
    for g in 0..spec.groups {
        let cols = im2col(x.data(), &geo, g);
        let wg = column_block(w.data(), patch, geo.cout, g * geo.cog, geo.cog);
        if spec.groups == 1 {
            gemm(
                geo.rows(),
                patch,
                geo.cout,
                &cols,
                false,
                &wg,
                false,
                T::zero(),
                &mut out,
            );
        } else {
            let mut og = vec![T::zero(); geo.rows() * geo.cog];
            gemm(
                geo.rows(),
                patch,
                geo.cog,
                &cols,
                false,
                &wg,
                false,
                T::zero(),
                &mut og,
            );
            scatter_column_block(&mut out, geo.cout, g * geo.cog, &og, geo.cog);
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: Conv2dSpec,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let geo = conv_geom(x.shape(), w.shape(), spec)?;
    if dy.shape() != [geo.n, geo.ho, geo.wo, geo.cout] {
        return Err(mismatch(
            "conv2d_backward",
            dy.shape(),
            &[geo.n, geo.ho, geo.wo, geo.cout],
        ));
    }
    let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.numel()]);
    if geo.depthwise() {
        depthwise_backward(
            x.data(),
            w.data(),
            dy.data(),
            &geo,
            dx.as_deref_mut(),
            dw.as_deref_mut(),
        );
    } else {
        let patch = geo.patch();
        for g in 0..spec.groups {
            let dyg = column_block(dy.data(), geo.rows(), geo.cout, g * geo.cog, geo.cog);
            if let Some(dx) = dx.as_deref_mut() {
                let wg = column_block(w.data(), patch, geo.cout, g * geo.cog, geo.cog);
                let mut dcols = vec![T::zero(); geo.rows() * patch];
                gemm(
                    geo.rows(),
                    geo.cog,
                    patch,
                    &dyg,
                    false,
                    &wg,
                    true,
                    T::zero(),
                    &mut dcols,
                );
                col2im_add(&dcols, &geo, g, dx);
            }
            if let Some(dw) = dw.as_deref_mut() {
                let cols = im2col(x.data(), &geo, g);
                let mut dwg = vec![T::zero(); patch * geo.cog];
                gemm(
                    patch,
                    geo.rows(),
                    geo.cog,
                    &cols,
                    true,
                    &dyg,
                    false,
                    T::zero(),
                    &mut dwg,
                );
                scatter_column_block(dw, geo.cout, g * geo.cog, &dwg, geo.cog);
            }
        }
    }
    Ok((
        dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
    ))
}

fn depthwise_forward<T: Element>(x: &[T], w: &[T], geo: &ConvGeom, out: &mut [T]) {
    let c = geo.cin;
    for b in 0..geo.n {
        for oy in 0..geo.ho {
            for ox in 0..geo.wo {
                let o = ((b * geo.ho + oy) * geo.wo + ox) * c;
                let acc = &mut out[o..o + c];
                for i in 0..geo.kh {
                    let Some(iy) = geo.src(oy, i, geo.h) else {
                        continue;
                    };
                    for j in 0..geo.kw {
                        let Some(ix) = geo.src(ox, j, geo.w) else {
                            continue;
                        };
                        let s = ((b * geo.h + iy) * geo.w + ix) * c;
                        let k = (i * geo.kw + j) * c;
                        for ch in 0..c {
                            acc[ch] = acc[ch] + x[s + ch] * w[k + ch];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    geo: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let c = geo.cin;
    for b in 0..geo.n {
        for oy in 0..geo.ho {
            for ox in 0..geo.wo {
                let o = ((b * geo.ho + oy) * geo.wo + ox) * c;
                let g = &dy[o..o + c];
                for i in 0..geo.kh {
                    let Some(iy) = geo.src(oy, i, geo.h) else {
                        continue;
                    };
                    for j in 0..geo.kw {
                        let Some(ix) = geo.src(ox, j, geo.w) else {
                            continue;
                        };
                        let s = ((b * geo.h + iy) * geo.w + ix) * c;
                        let k = (i * geo.kw + j) * c;
                        if let Some(dx) = dx.as_deref_mut() {
                            for ch in 0..c {
                                dx[s + ch] = dx[s + ch] + g[ch] * w[k + ch];
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            for ch in 0..c {
                                dw[k + ch] = dw[k + ch] + g[ch] * x[s + ch];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cached values from a normalization forward pass.
#[derive(Clone)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    /// One reciprocal standard deviation per normalized group.
    pub rstd: Vec<T>,
}

/// Normalizes each last-axis slice, then applies `gamma`, `beta`.
pub fn layer_norm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let c = x.last_dim();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(mismatch("layer_norm", x.shape(), gamma.shape()));
    }
    let rows = x.numel() / c.max(1);
    let cn: T = lit(c as f64);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &x.data()[r * c..(r + 1) * c];
        let mean = xs.iter().copied().sum::<T>() / cn;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for i in 0..c {
            let h = (xs[i] - mean) * rs;
            xhat[r * c + i] = h;
            y[r * c + i] = h * gamma.data()[i] + beta.data()[i];
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        NormCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            rstd,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Element>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.numel();
    let rows = dy.numel() / c.max(1);
    let cn: T = lit(c as f64);
    let xh = cache.xhat.data();
    let g = dy.data();
    let mut dx = vec![T::zero(); dy.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for r in 0..rows {
        let o = r * c;
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for i in 0..c {
            let d = g[o + i] * gamma.data()[i];
            sum_d = sum_d + d;
            sum_dx = sum_dx + d * xh[o + i];
            dgamma[i] = dgamma[i] + g[o + i] * xh[o + i];
            dbeta[i] = dbeta[i] + g[o + i];
        }
        let (md, mdx) = (sum_d / cn, sum_dx / cn);
        for i in 0..c {
            let d = g[o + i] * gamma.data()[i];
            dx[o + i] = cache.rstd[r] * (d - md - xh[o + i] * mdx);
        }
    }
    (
        Tensor::new(dy.shape(), dx).expect("shape"),
        Tensor::new(&[c], dgamma).expect("shape"),
        Tensor::new(&[c], dbeta).expect("shape"),
    )
}

/// Batch statistics of a training-mode batch-norm pass.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    pub count: usize,
}

/// Normalizes every channel (last axis) over all other axes using batch statistics.
pub fn batch_norm_train_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>, BatchStats<T>)> {
    let c = x.last_dim();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(mismatch("batch_norm", x.shape(), gamma.shape()));
    }
    let rows = x.numel() / c.max(1);
    if rows == 0 {
        return Err(invalid("batch_norm", "zero-size batch"));
    }
    let m: T = lit(rows as f64);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    for r in 0..rows {
        for i in 0..c {
            mean[i] = mean[i] + xd[r * c + i];
        }
    }
    mean.iter_mut().for_each(|v| *v = *v / m);
    let mut var = vec![T::zero(); c];
    for r in 0..rows {
        for i in 0..c {
            let d = xd[r * c + i] - mean[i];
            var[i] = var[i] + d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = *v / m);
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for r in 0..rows {
        for i in 0..c {
            let h = (xd[r * c + i] - mean[i]) * rstd[i];
            xhat[r * c + i] = h;
            y[r * c + i] = h * gamma.data()[i] + beta.data()[i];
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        NormCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            rstd,
        },
        BatchStats {
            mean,
            var,
            count: rows,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)` including the gradient through batch statistics.
pub fn batch_norm_train_backward<T: Element>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.numel();
    let rows = dy.numel() / c.max(1);
    let m: T = lit(rows as f64);
    let xh = cache.xhat.data();
    let g = dy.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for r in 0..rows {
        for i in 0..c {
            dgamma[i] = dgamma[i] + g[r * c + i] * xh[r * c + i];
            dbeta[i] = dbeta[i] + g[r * c + i];
        }
    }
    let mut dx = vec![T::zero(); dy.numel()];
    for r in 0..rows {
        for i in 0..c {
            let k = r * c + i;
            dx[k] = gamma.data()[i] * cache.rstd[i] / m * (m * g[k] - dbeta[i] - xh[k] * dgamma[i]);
        }
    }
    (
        Tensor::new(dy.shape(), dx).expect("shape"),
        Tensor::new(&[c], dgamma).expect("shape"),
        Tensor::new(&[c], dbeta).expect("shape"),
    )
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta` per channel with fixed statistics.
pub fn batch_norm_infer_forward<T: Element>(
    x: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let c = x.last_dim();
    for t in [mean, var, gamma, beta] {
        if t.shape() != [c] {
            return Err(mismatch("batch_norm_infer", x.shape(), t.shape()));
        }
    }
    let rstd: Vec<T> = var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let xd = x.data();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for (k, (&v, (h, o))) in xd.iter().zip(xhat.iter_mut().zip(y.iter_mut())).enumerate() {
        let i = k % c;
        *h = (v - mean.data()[i]) * rstd[i];
        *o = *h * gamma.data()[i] + beta.data()[i];
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        NormCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            rstd,
        },
    ))
}

/// Softmax of `scale * x` along the last axis with max subtraction.
pub fn softmax_forward<T: Element>(x: &Tensor<T>, scale: T) -> Tensor<T> {
    let c = x.last_dim();
    let mut out = vec![T::zero(); x.numel()];
    if c == 0 {
        return Tensor::new(x.shape(), out).expect("shape");
    }
    for (src, dst) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        let mx = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v * scale));
        let mut sum = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s * scale - mx).exp();
            sum = sum + *d;
        }
        dst.iter_mut().for_each(|d| *d = *d / sum);
    }
    Tensor::new(x.shape(), out).expect("shape")
}

/// `dx = scale * y * (dy - sum(dy * y))` per row.
pub fn softmax_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>, scale: T) -> Tensor<T> {
    let c = y.last_dim();
    let mut dx = vec![T::zero(); y.numel()];
    if c == 0 {
        return Tensor::new(y.shape(), dx).expect("shape");
    }
    for ((ys, gs), out) in y
        .data()
        .chunks(c)
        .zip(dy.data().chunks(c))
        .zip(dx.chunks_mut(c))
    {
        let dot = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum::<T>();
        for ((o, &yv), &gv) in out.iter_mut().zip(ys).zip(gs) {
            *o = scale * yv * (gv - dot);
        }
    }
    Tensor::new(y.shape(), dx).expect("shape")
}

const GELU_C: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu<T: Element>(x: T) -> T {
    let k: T = lit((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + lit::<T>(GELU_C) * x * x * x);
    lit::<T>(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let k: T = lit((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + lit::<T>(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + lit::<T>(3.0 * GELU_C) * x * x);
    lit::<T>(0.5) * (T::one() + t) + lit::<T>(0.5) * x * (T::one() - t * t) * du
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_two_by_two() {
        let c = matmul_forward(
            &t(&[2, 2], &[1., 2., 3., 4.]),
            &t(&[2, 2], &[5., 6., 7., 8.]),
            false,
        )
        .unwrap();
        assert_eq!(c.data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_identity() {
        let mut rng = SplitMix64::new(1);
        let a = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert!(matmul_forward(&a, &eye, false).unwrap().bit_eq(&a));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let e = matmul_forward(
            &Tensor::<f32>::zeros(&[2, 3]),
            &Tensor::zeros(&[2, 3]),
            false,
        )
        .unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_transposed_matches_explicit() {
        let mut rng = SplitMix64::new(2);
        let a = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 5, 4], 1.0, &mut rng);
        let bt = b.permute(&[0, 2, 1]).unwrap();
        let x = matmul_forward(&a, &b, true).unwrap();
        let y = matmul_forward(&a, &bt, false).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() < 1e-12);
    }

    #[test]
    fn conv_ones_kernel_counts_neighbours() {
        let x = Tensor::<f64>::ones(&[1, 3, 3, 1]);
        let w = Tensor::<f64>::ones(&[3, 3, 1, 1]);
        let y = conv2d_forward(&x, &w, Conv2dSpec::new(1, 1, 1)).unwrap();
        assert_eq!(y.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = SplitMix64::new(3);
        let x = Tensor::<f64>::randn(&[2, 5, 4, 3], 1.0, &mut rng);
        let mut w = vec![0.0; 9 * 3 * 3];
        for c in 0..3 {
            w[(4 * 3 + c) * 3 + c] = 1.0;
        }
        let w = Tensor::new(&[3, 3, 3, 3], w).unwrap();
        let y = conv2d_forward(&x, &w, Conv2dSpec::same(3)).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn conv_output_extent_and_group_errors() {
        let x = Tensor::<f32>::zeros(&[1, 7, 7, 4]);
        let w = Tensor::<f32>::zeros(&[3, 3, 4, 8]);
        let y = conv2d_forward(&x, &w, Conv2dSpec::new(2, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 8]);
        let bad = conv2d_forward(&x, &Tensor::zeros(&[3, 3, 1, 6]), Conv2dSpec::new(1, 1, 3));
        assert!(bad.is_err());
        assert!(conv2d_forward(
            &Tensor::<f32>::zeros(&[0, 7, 7, 4]),
            &w,
            Conv2dSpec::same(3)
        )
        .is_err());
    }

    #[test]
    fn odd_kernels_preserve_extent() {
        for k in [3, 5, 7] {
            let x = Tensor::<f32>::zeros(&[1, 9, 6, 2]);
            let w = Tensor::<f32>::zeros(&[k, k, 2, 3]);
            let y = conv2d_forward(&x, &w, Conv2dSpec::same(k)).unwrap();
            assert_eq!(y.shape(), &[1, 9, 6, 3]);
        }
    }

    #[test]
    fn depthwise_matches_per_channel_loop() {
        let mut rng = SplitMix64::new(4);
        let (h, w, c) = (6, 5, 3);
        let x = Tensor::<f64>::randn(&[2, h, w, c], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[5, 5, 1, c], 1.0, &mut rng);
        let y = conv2d_forward(&x, &k, Conv2dSpec::new(1, 2, c)).unwrap();
        // each channel convolved independently as a single-channel dense conv
        for ch in 0..c {
            let xc = Tensor::from_fn(&[2, h, w, 1], |i| x.data()[i * c + ch]);
            let kc = Tensor::from_fn(&[5, 5, 1, 1], |i| k.data()[i * c + ch]);
            let yc = conv2d_forward(&xc, &kc, Conv2dSpec::new(1, 2, 1)).unwrap();
            for i in 0..yc.numel() {
                assert!((yc.data()[i] - y.data()[i * c + ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_extremes() {
        let y = softmax_forward(&t(&[2], &[0., 0.]), 1.0);
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_forward(&Tensor::<f32>::from_f64(&[2], &[1000., 0.]).unwrap(), 1.0);
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[1], 0.0);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let (y, _) = layer_norm_forward(
            &Tensor::<f64>::full(&[2, 4], 3.0),
            &Tensor::ones(&[4]),
            &Tensor::zeros(&[4]),
            1e-5,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let err = layer_norm_forward(
            &Tensor::<f64>::zeros(&[2, 4]),
            &Tensor::ones(&[3]),
            &Tensor::zeros(&[4]),
            1e-5,
        );
        assert!(err.is_err());
    }

    #[test]
    fn gelu_and_sigmoid_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64).is_finite());
    }
}
