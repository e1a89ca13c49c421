//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array with shape metadata.
///
/// A rank-0 tensor (empty shape) holds exactly one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::shape("tensor", &[&shape], "zero-sized dimension"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                &[&shape],
                format!("shape holds {numel} values but {} were supplied", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics if `data` does not fill `shape`; for internal construction
    /// where the sizes are known to agree.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", &[], "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape("item", &[&self.shape], "tensor is not a scalar"))
        }
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut offset = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            offset = offset * d + i;
        }
        Some(self.data[offset])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &[&self.shape, &shape], "element count changes"));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn from_f64(t: &Tensor<f64>) -> Self {
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| T::of(x)).collect(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("cannot stack zero tensors".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &[&first.shape, &t.shape], "unequal shapes"));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape, data })
    }
}

/// Result shape of broadcasting two shapes with trailing-dimension alignment.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Iteration plan that walks a contiguous output of shape `out` while
/// tracking the matching offsets into operands broadcast to it.
///
/// Adjacent dimensions with the same broadcast pattern are merged, so the
/// common NCHW-against-per-channel case collapses to three loops with a
/// tight inner run.
pub(crate) struct BroadcastPlan {
    dims: Vec<usize>,
    strides: Vec<Vec<usize>>,
}

impl BroadcastPlan {
    pub(crate) fn new(out: &[usize], operands: &[&[usize]]) -> Self {
        let rank = out.len();
        // per-operand contiguous strides, zero where broadcast
        let mut raw: Vec<Vec<usize>> = Vec::with_capacity(operands.len());
        for shape in operands {
            let pad = rank - shape.len();
            let mut s = vec![0; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                let d = if i < pad { 1 } else { shape[i - pad] };
                s[i] = if d == 1 && out[i] != 1 { 0 } else { acc };
                acc *= d;
            }
            raw.push(s);
        }

        let mut dims: Vec<usize> = Vec::new();
        let mut strides: Vec<Vec<usize>> = vec![Vec::new(); operands.len()];
        for i in 0..rank {
            if out[i] == 1 {
                continue;
            }
            let mergeable = !dims.is_empty()
                && raw.iter().zip(&strides).all(|(r, s)| {
                    let prev = *s.last().unwrap();
                    (prev == 0 && r[i] == 0) || (prev != 0 && r[i] != 0 && prev == r[i] * out[i])
                });
            if mergeable {
                let last = dims.len() - 1;
                dims[last] *= out[i];
                for (r, s) in raw.iter().zip(strides.iter_mut()) {
                    s[last] = r[i];
                }
            } else {
                dims.push(out[i]);
                for (r, s) in raw.iter().zip(strides.iter_mut()) {
                    s.push(r[i]);
                }
            }
        }
        if dims.is_empty() {
            dims.push(1);
            for s in strides.iter_mut() {
                s.push(0);
            }
        }
        BroadcastPlan { dims, strides }
    }

    /// Calls `f(out_offset, operand_offsets, operand_inner_strides, run_len)`
    /// for every innermost run, in output order.
    pub(crate) fn for_each_run(&self, mut f: impl FnMut(usize, &[usize], &[usize], usize)) {
        let rank = self.dims.len();
        let inner = self.dims[rank - 1];
        let inner_strides: Vec<usize> = self.strides.iter().map(|s| s[rank - 1]).collect();
        let outer: usize = self.dims[..rank - 1].iter().product();
        let mut idx = vec![0usize; rank - 1];
        let mut offs = vec![0usize; self.strides.len()];
        for run in 0..outer {
            f(run * inner, &offs, &inner_strides, inner);
            // odometer over outer dims
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                for (o, s) in offs.iter_mut().zip(&self.strides) {
                    *o += s[d];
                }
                if idx[d] < self.dims[d] {
                    break;
                }
                for (o, s) in offs.iter_mut().zip(&self.strides) {
                    *o -= s[d] * self.dims[d];
                }
                idx[d] = 0;
            }
        }
    }
}
