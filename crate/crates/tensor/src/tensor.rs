use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, mismatch, Result, TensorError};
use crate::rng::SplitMix64;
use crate::scalar::{lit, Element};

/// Dense row-major tensor. The buffer is shared between clones and
/// reshapes; mutation goes through copy-on-write.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .field("head", &preview)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(invalid(
                "tensor",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel(shape),
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel(shape)]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = numel(shape);
        Self {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(&mut f).collect()),
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| lit(v)).collect())
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Self {
        Self::from_fn(shape, |_| lit(rng.normal() * std))
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SplitMix64) -> Self {
        Self::from_fn(shape, |_| lit(lo + (hi - lo) * rng.next_f64()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn shares_buffer(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank());
        let st = strides(&self.shape);
        let off: usize = index.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    /// Same buffer, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(mismatch("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        if axes.len() != rank {
            return Err(invalid("permute", format!("{axes:?} for rank {rank}")));
        }
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(invalid("permute", format!("{axes:?} is not a permutation")));
            }
            seen[a] = true;
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        // stride in the source buffer for each output axis
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut out = Vec::with_capacity(n);
        if n > 0 {
            let last = rank - 1;
            let inner = out_shape[last];
            let inner_stride = src_strides[last];
            let mut idx = vec![0usize; rank];
            let mut base = 0usize;
            let src = self.data();
            loop {
                for j in 0..inner {
                    out.push(src[base + j * inner_stride]);
                }
                // advance all but the innermost axis
                let mut ax = last;
                loop {
                    if ax == 0 {
                        return Ok(Self {
                            shape: out_shape,
                            data: Arc::new(out),
                        });
                    }
                    ax -= 1;
                    idx[ax] += 1;
                    base += src_strides[ax];
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    base -= src_strides[ax] * out_shape[ax];
                    idx[ax] = 0;
                }
            }
        }
        Ok(Self {
            shape: out_shape,
            data: Arc::new(out),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(mismatch("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(mismatch("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(mismatch("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// Finite-value diagnostic; `what` names the tensor in the error.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(what.to_string()))
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                    .collect(),
            ),
        }
    }

    /// Bitwise equality of shape and payload.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        if self.shape != other.shape {
            return false;
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (&x, &y) in self.data.iter().zip(other.data.iter()) {
            a.clear();
            b.clear();
            x.write_le(&mut a);
            y.write_le(&mut b);
            if a != b {
                return false;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_ok());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }

    #[test]
    fn reshape_shares_buffer() {
        let t = Tensor::<f64>::from_fn(&[2, 6], |i| i as f64);
        let r = t.reshape(&[3, 4]).unwrap();
        assert!(r.shares_buffer(&t));
        assert!(t.reshape(&[5]).is_err());
    }

    #[test]
    fn permute_transposes() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1., 4., 2., 5., 3., 6.]);
        assert!(t.permute(&[0, 0]).is_err());
    }

    #[test]
    fn check_finite_flags_nan() {
        let t = Tensor::<f32>::from_f64(&[2], &[1.0, f64::NAN]).unwrap();
        assert!(matches!(
            t.check_finite("x"),
            Err(TensorError::NonFinite(_))
        ));
    }

    proptest! {
        #[test]
        fn permute_then_inverse_is_identity(
            dims in proptest::collection::vec(1usize..4, 1..5),
            seed in any::<u64>(),
        ) {
            let mut rng = SplitMix64::new(seed);
            let t = Tensor::<f64>::randn(&dims, 1.0, &mut rng);
            let mut axes: Vec<usize> = (0..dims.len()).collect();
            rng.shuffle(&mut axes);
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            let back = t.permute(&axes).unwrap().permute(&inv).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
