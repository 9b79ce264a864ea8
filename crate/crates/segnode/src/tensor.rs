//! Dense row-major tensors.
//!
//! Layout is (N, C, H, W) wherever four axes are in play; rank 0 (scalar)
//! through rank 4 are supported. Buffers are reference-counted so clones,
//! detaches and tape-saved values share storage, and each buffer reports
//! its lifetime to the activation accountant in [`crate::memory`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::memory;
use crate::scalar::Scalar;
use crate::tape::Tracked;

pub(crate) struct Buf<T> {
    data: Vec<T>,
    bytes: usize,
    epoch: u64,
}

impl<T> Drop for Buf<T> {
    fn drop(&mut self) {
        memory::on_release(self.bytes, self.epoch);
    }
}

/// Dense n-dimensional array, optionally linked to a gradient tape.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    buf: Rc<Buf<T>>,
    pub(crate) node: Option<Tracked<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(shape.len() <= 4, "rank > 4 is not supported");
        assert!(shape.iter().all(|&d| d >= 1), "zero extent in {shape:?}");
        let bytes = data.len() * T::BYTES;
        let epoch = memory::on_alloc(bytes);
        Tensor {
            shape: shape.to_vec(),
            buf: Rc::new(Buf { data, bytes, epoch }),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        Tensor::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel])
    }

    pub fn scalar(value: T) -> Tensor<T> {
        Tensor::from_vec(&[], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.buf.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.buf.data
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.shape.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.buf.data[0]
    }

    /// Same storage, no tape linkage.
    pub fn detach(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            buf: Rc::clone(&self.buf),
            node: None,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.buf.data.clone()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.buf.data.iter().map(|&v| f(v)).collect();
        Tensor::from_vec(&self.shape, data)
    }

    pub fn max_abs(&self) -> T {
        self.buf
            .data
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.buf.data.iter().all(|v| v.is_finite())
    }

    /// Flat offset of (n, c, h, w) in a rank-4 tensor.
    #[inline]
    pub fn idx4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[cfg(test)]
    pub(crate) fn same_buffer(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.buf, &other.buf)
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())
        } else {
            write!(f, " [{} elements]", self.numel())
        }
    }
}

pub(crate) fn check_same_shape<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// True when `b` follows the bias pattern: rank-1 of length C against a
/// rank-4 (N, C, H, W) tensor `a`.
pub(crate) fn is_channel_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.rank() == 4 && b.rank() == 1 && b.shape()[0] == a.shape()[1]
}

// ---------------------------------------------------------------------------
// Raw kernels. These never touch the tape; tracked operations wrap them and
// VJP closures call them directly.
// ---------------------------------------------------------------------------

pub(crate) fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Applies `f(a[n,c,h,w], b[c])` under the bias broadcast pattern.
pub(crate) fn zip_channel<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let [n, c, h, w] = [a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]];
    let plane = h * w;
    let mut data = Vec::with_capacity(a.numel());
    let src = a.data();
    let bias = b.data();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let bv = bias[ci];
            data.extend(src[base..base + plane].iter().map(|&x| f(x, bv)));
        }
    }
    Tensor::from_vec(a.shape(), data)
}

pub(crate) fn raw_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    zip(a, b, |x, y| x + y)
}

/// Normalizes and validates reduction axes; `None` means all axes.
pub(crate) fn resolve_axes<T: Scalar>(x: &Tensor<T>, axes: Option<&[usize]>) -> Result<Vec<usize>> {
    let rank = x.rank();
    let mut resolved = match axes {
        None => (0..rank).collect::<Vec<_>>(),
        Some(list) => {
            for &a in list {
                if a >= rank {
                    return Err(Error::InvalidAxis { axis: a, rank });
                }
            }
            let mut v = list.to_vec();
            v.sort_unstable();
            v.dedup();
            v
        }
    };
    resolved.sort_unstable();
    Ok(resolved)
}

pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect()
}

/// Sum of `x` over `axes` (already validated, sorted, deduplicated).
pub(crate) fn raw_sum_axes<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let out_shape = reduced_shape(x.shape(), axes);
    let out_numel: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); out_numel];
    for (flat, &v) in x.data().iter().enumerate() {
        out[reduced_offset(x.shape(), axes, flat)] += v;
    }
    Tensor::from_vec(&out_shape, out)
}

/// Cotangent of a reduction: spreads `cot` (of the reduced shape) back over
/// `in_shape`, scaling by `k` (1 for sum, 1/count for mean).
pub(crate) fn spread_reduced<T: Scalar>(
    cot: &Tensor<T>,
    in_shape: &[usize],
    axes: &[usize],
    k: T,
) -> Tensor<T> {
    let numel: usize = in_shape.iter().product();
    let src = cot.data();
    let mut out = Vec::with_capacity(numel);
    for flat in 0..numel {
        out.push(src[reduced_offset(in_shape, axes, flat)] * k);
    }
    Tensor::from_vec(in_shape, out)
}

/// Maps a flat offset in `shape` to the flat offset in the shape with `axes` removed.
fn reduced_offset(shape: &[usize], axes: &[usize], flat: usize) -> usize {
    let mut coords = [0usize; 4];
    let mut rem = flat;
    for d in (0..shape.len()).rev() {
        coords[d] = rem % shape[d];
        rem /= shape[d];
    }
    let mut off = 0;
    for d in 0..shape.len() {
        if !axes.contains(&d) {
            off = off * shape[d] + coords[d];
        }
    }
    off
}
