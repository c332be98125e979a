//! Dense row-major tensors over a single real scalar type.
//!
//! Training runs in `f32`; gradient checks and Monte Carlo oracles run the
//! same code in `f64`. The [`Real`] trait is the only abstraction point.

use crate::error::{CoreError, Result};
use num_traits::Float;
use std::fmt;

/// Scalar type for tensor arithmetic. Implemented for `f32` and `f64`.
pub trait Real:
    Float + num_traits::NumAssign + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense tensor: a shape and a flat row-major value buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Build from a shape and flat data; the lengths must agree.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::InvalidArgument {
                what: "tensor data length",
                detail: format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a 0-d (or 1-element) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Number of rows / columns when viewed as a matrix. 1-d tensors are
    /// treated as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.last() {
            Some(&c) => c,
            None => 1,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|v| v.to_f64())
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|v| v.to_f64() as f32)
    }

    /// Mean over all elements.
    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        let mut s = T::zero();
        for &v in &self.data {
            s += v;
        }
        s / T::from_f64(self.data.len() as f64)
    }

    /// Population variance over all elements.
    pub fn variance(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        let m = self.mean();
        let mut s = T::zero();
        for &v in &self.data {
            let d = v - m;
            s += d * d;
        }
        s / T::from_f64(self.data.len() as f64)
    }
}

/// `out[m,n] = a[m,k] @ b[k,n]`, row-parallel above a size threshold.
/// Each output row is accumulated independently so the result does not
/// depend on the thread count.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = mat_dims(a, "matmul")?;
    let (kb, n) = mat_dims(b, "matmul")?;
    if k != kb {
        return Err(CoreError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    let run_row = |row: usize, out_row: &mut [T]| {
        let a_row = &a.data[row * k..(row + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if parallel_worthwhile(m, k * n) {
        use rayon::prelude::*;
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(row, out_row)| run_row(row, out_row));
    } else {
        for (row, out_row) in out.chunks_mut(n).enumerate() {
            run_row(row, out_row);
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// `out[m,n] = a[m,k] @ b[n,k]^T`.
pub fn matmul_transpose_b<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = mat_dims(a, "matmul_tb")?;
    let (n, kb) = mat_dims(b, "matmul_tb")?;
    if k != kb {
        return Err(CoreError::ShapeMismatch {
            op: "matmul_tb",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    let run_row = |row: usize, out_row: &mut [T]| {
        let a_row = &a.data[row * k..(row + 1) * k];
        for (col, o) in out_row.iter_mut().enumerate() {
            let b_row = &b.data[col * k..(col + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *o = s;
        }
    };
    if parallel_worthwhile(m, k * n) {
        use rayon::prelude::*;
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(row, out_row)| run_row(row, out_row));
    } else {
        for (row, out_row) in out.chunks_mut(n).enumerate() {
            run_row(row, out_row);
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// `out[m,n] = a[k,m]^T @ b[k,n]` (used by matmul backward).
pub fn matmul_transpose_a<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = mat_dims(a, "matmul_ta")?;
    let (kb, n) = mat_dims(b, "matmul_ta")?;
    if k != kb {
        return Err(CoreError::ShapeMismatch {
            op: "matmul_ta",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    for kk in 0..k {
        let a_row = &a.data[kk * m..(kk + 1) * m];
        let b_row = &b.data[kk * n..(kk + 1) * n];
        if parallel_worthwhile(m, n * k) {
            use rayon::prelude::*;
            out.par_chunks_mut(n).enumerate().for_each(|(row, o)| {
                let av = a_row[row];
                for (ov, &bv) in o.iter_mut().zip(b_row) {
                    *ov += av * bv;
                }
            });
        } else {
            for (row, o) in out.chunks_mut(n).enumerate() {
                let av = a_row[row];
                for (ov, &bv) in o.iter_mut().zip(b_row) {
                    *ov += av * bv;
                }
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

fn mat_dims<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.len() {
        2 => Ok((t.shape[0], t.shape[1])),
        1 => Ok((1, t.shape[0])),
        _ => Err(CoreError::InvalidArgument {
            what: op,
            detail: format!("expected a matrix, got shape {:?}", t.shape),
        }),
    }
}

fn parallel_worthwhile(rows: usize, work_per_row_total: usize) -> bool {
    rows >= 2 && work_per_row_total >= 1 << 16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0f32; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0f32; 5]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn transpose_variants_agree() {
        let a = Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 1.5, -1.0]).unwrap();
        let b = Tensor::from_vec(vec![4, 3], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect())
            .unwrap();
        // a @ b^T via matmul_transpose_b equals explicit transpose then matmul.
        let bt = {
            let mut data = vec![0.0; 12];
            for r in 0..4 {
                for c in 0..3 {
                    data[c * 4 + r] = b.data()[r * 3 + c];
                }
            }
            Tensor::from_vec(vec![3, 4], data).unwrap()
        };
        let via_tb = matmul_transpose_b(&a, &b).unwrap();
        let direct = matmul(&a, &bt).unwrap();
        assert_eq!(via_tb.data(), direct.data());
    }
}
