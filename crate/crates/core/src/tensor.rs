//! Dense row-major tensors over f32/f64.
//!
//! Everything in the numeric stack is generic over [`Element`] so training
//! runs in f32 while gradient verification runs the same code in f64.

use std::fmt;

use num_traits::{Float, NumCast};

/// Scalar element type for tensors and network math.
pub trait Element:
    Float + NumCast + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const NAME: &'static str;
}

impl Element for f32 {
    const NAME: &'static str = "f32";
}
impl Element for f64 {
    const NAME: &'static str = "f64";
}

/// Cast an f64 constant into the working element type.
#[inline]
pub fn el<T: Element>(x: f64) -> T {
    T::from(x).expect("constant representable in element type")
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Wraps `data` with the given shape. Panics if lengths disagree; this is
    /// an internal construction path, not an input-validation boundary.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {shape:?} incompatible with {:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from(x).expect("lossless-enough numeric cast"))
                .collect(),
        }
    }

    /// Max |a - b| over all elements; tensors must share a shape.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::NAME, self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.numel())
        }
    }
}

/// c += a * b for equal-length slices (axpy over contiguous memory).
#[inline]
pub fn axpy<T: Element>(c: &mut [T], a: T, b: &[T]) {
    debug_assert_eq!(c.len(), b.len());
    for (cj, &bj) in c.iter_mut().zip(b) {
        *cj = bj.mul_add(a, *cj);
    }
}

/// Dot product of equal-length slices. Eight independent accumulator lanes
/// keep the FMA chain out of the latency-bound path; the lane order is fixed,
/// so results are deterministic.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let base = i * LANES;
        for l in 0..LANES {
            acc[l] = a[base + l].mul_add(b[base + l], acc[l]);
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    let mut total = tail;
    for l in 0..LANES {
        total = total + acc[l];
    }
    total
}

/// c[m x n] += a[m x k] . b[k x n], all row-major contiguous.
pub fn matmul_acc<T: Element>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            axpy(crow, aik, &b[kk * n..(kk + 1) * n]);
        }
    }
}

/// c[k x n] += a[m x k]^T . b[m x n].
pub fn matmul_tn_acc<T: Element>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            axpy(&mut c[kk * n..(kk + 1) * n], aik, brow);
        }
    }
}

/// c[m x k] += a[m x n] . b[k x n]^T (rows of both operands are contiguous).
pub fn matmul_nt_acc<T: Element>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for kk in 0..k {
            crow[kk] = crow[kk] + dot(arow, &b[kk * n..(kk + 1) * n]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] . [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        matmul_acc(&mut c, &a, &b, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transpose_variants_agree() {
        let m = 3;
        let k = 4;
        let n = 5;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.17 + 0.5).collect();
        let mut c = vec![0.0; m * n];
        matmul_acc(&mut c, &a, &b, m, k, n);

        // a^T . c should equal (a^T a) b; instead check matmul_tn against naive.
        let mut tn = vec![0.0; k * n];
        matmul_tn_acc(&mut tn, &a, &c, m, k, n);
        for kk in 0..k {
            for j in 0..n {
                let mut want = 0.0;
                for i in 0..m {
                    want += a[i * k + kk] * c[i * n + j];
                }
                assert!((tn[kk * n + j] - want).abs() < 1e-9);
            }
        }

        let mut nt = vec![0.0; m * k];
        matmul_nt_acc(&mut nt, &c, &b, m, k, n);
        for i in 0..m {
            for kk in 0..k {
                let mut want = 0.0;
                for j in 0..n {
                    want += c[i * n + j] * b[kk * n + j];
                }
                assert!((nt[i * k + kk] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reshape_and_item() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]);
        let r = t.clone().reshaped(&[4]);
        assert_eq!(r.shape(), &[4]);
        assert_eq!(Tensor::scalar(7.0f64).item(), 7.0);
    }
}
