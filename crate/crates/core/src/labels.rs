use brau_tensor::{Element, Tensor};

use crate::error::{BrauError, Result};

/// Integer class map, `[H,W]` for one sample or `[N,H,W]` for a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Vec<usize>,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: &[usize], data: Vec<u8>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(BrauError::Invalid(format!(
                "label map {dims:?} needs {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max_label(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }

    pub fn check_classes(&self, k: usize) -> Result<()> {
        match self.max_label() {
            Some(m) if m as usize >= k => Err(BrauError::Invalid(format!(
                "label {m} out of range for {k} classes"
            ))),
            _ => Ok(()),
        }
    }

    /// `[.., K]` one-hot encoding.
    pub fn one_hot<T: Element>(&self, k: usize) -> Tensor<T> {
        let mut dims = self.dims.clone();
        dims.push(k);
        let mut out = Tensor::zeros(&dims);
        let d = out.data_mut();
        for (i, &c) in self.data.iter().enumerate() {
            d[i * k + c as usize] = T::one();
        }
        out
    }

    /// Per-pixel argmax over the last axis; ties go to the lower class.
    pub fn argmax<T: Element>(scores: &Tensor<T>) -> Self {
        let k = scores.last_dim();
        let dims = &scores.shape()[..scores.rank() - 1];
        let data = scores
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    /// Stacks equally sized maps along a new leading axis.
    pub fn stack(items: &[&LabelMap]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| BrauError::Invalid("cannot stack zero label maps".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for m in items {
            if m.dims != first.dims {
                return Err(BrauError::Invalid(format!(
                    "label map {:?} vs {:?}",
                    m.dims, first.dims
                )));
            }
            data.extend_from_slice(&m.data);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        Ok(Self { dims, data })
    }

    /// Sample `i` of a batched map.
    pub fn sample(&self, i: usize) -> Self {
        let dims = self.dims[1..].to_vec();
        let n: usize = dims.iter().product();
        Self {
            dims,
            data: self.data[i * n..(i + 1) * n].to_vec(),
        }
    }
}
