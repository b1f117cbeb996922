//! Dense row-major tensors.

use thiserror::Error;

use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}

impl TensorError {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            reason: reason.into(),
        }
    }
}

/// A dense tensor: a shape and `shape.iter().product()` values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from `f64` values, converting to `T`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(vec![n, n], |i| {
            if i / n == i % n {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Standalone matrix product used outside of graphs (oracles, inference helpers).
    pub fn matmul(&self, rhs: &Self) -> Result<Self, TensorError> {
        let (m, k) = self
            .dims2()
            .ok_or_else(|| TensorError::dim("matmul", &self.shape, &rhs.shape))?;
        let (k2, n) = rhs
            .dims2()
            .ok_or_else(|| TensorError::dim("matmul", &self.shape, &rhs.shape))?;
        if k != k2 {
            return Err(TensorError::dim("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`.
pub(crate) fn matmul_bt_into<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    n: usize,
    k: usize,
) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn matmul_at_into<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(
            err,
            TensorError::DataLength {
                expected: 6,
                actual: 5,
                ..
            }
        ));
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(vec![2, 1], &[1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn transposed_kernels_agree_with_plain_product() {
        // a: 2×3, b: 4×3 → a·bᵀ is 2×4
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let mut bt = vec![0.0; 12];
        for r in 0..4 {
            for c in 0..3 {
                bt[c * 4 + r] = b[r * 3 + c];
            }
        }
        let mut want = vec![0.0; 8];
        matmul_into(&a, &bt, &mut want, 2, 3, 4);
        let mut got = vec![0.0; 8];
        matmul_bt_into(&a, &b, &mut got, 2, 3, 4);
        for (x, y) in want.iter().zip(&got) {
            assert!((x - y).abs() < 1e-14);
        }

        // aᵀ·c with c: 2×4 → 3×4
        let c: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
        let mut at = vec![0.0; 6];
        for r in 0..2 {
            for col in 0..3 {
                at[col * 2 + r] = a[r * 3 + col];
            }
        }
        let mut want = vec![0.0; 12];
        matmul_into(&at, &c, &mut want, 3, 2, 4);
        let mut got = vec![0.0; 12];
        matmul_at_into(&a, &c, &mut got, 2, 3, 4);
        for (x, y) in want.iter().zip(&got) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
