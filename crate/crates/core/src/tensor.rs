//! Dense row-major `f64` tensors and the handful of kernels a ViT forward
//! pass needs.
//!
//! Tensors are immutable values: every operation allocates its output. Two
//! dimensional operations treat the tensor as `[rows, cols]`; `layer_norm`
//! and the elementwise kernels accept any rank.

use std::fmt;

use libm::erf;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Size of the trailing dimension and the number of vectors along it.
    fn last_dim(&self) -> Result<(usize, usize)> {
        let d = *self
            .shape
            .last()
            .ok_or_else(|| Error::shape("scalar tensor has no trailing dimension"))?;
        let n = self.data.len().checked_div(d).unwrap_or(0);
        Ok((n, d))
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        if r >= rows {
            return Err(Error::shape(format!("row {r} out of range for {rows} rows")));
        }
        Tensor::new(vec![1, cols], self.data[r * cols..(r + 1) * cols].to_vec())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// `self @ other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        Ok(gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1)))
    }

    /// `self @ other^T`, with `other` stored as `[n, k]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt inner dims differ: {:?} x {:?}^T",
                self.shape, other.shape
            )));
        }
        Ok(gemm(m, k, n, &self.data, (k, 1), &other.data, (1, k)))
    }

    /// `self^T @ other`, with `self` stored as `[k, m]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_tn inner dims differ: {:?}^T x {:?}",
                self.shape, other.shape
            )));
        }
        Ok(gemm(m, k, n, &self.data, (1, m), &other.data, (n, 1)))
    }

    /// `x @ w^T + b` with `w` as `[out, in]` and `b` as `[out]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let mut y = self.matmul_nt(weight)?;
        if let Some(b) = bias {
            y = y.add_row(b)?;
        }
        Ok(y)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// Adds a vector of length `cols` to every trailing-dimension vector.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (_, d) = self.last_dim()?;
        if row.len() != d {
            return Err(Error::shape(format!(
                "broadcast vector of length {} does not match trailing dim {d}",
                row.len()
            )));
        }
        let mut data = self.data.clone();
        for chunk in data.chunks_exact_mut(d) {
            for (v, &b) in chunk.iter_mut().zip(&row.data) {
                *v += b;
            }
        }
        Tensor::new(self.shape.clone(), data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start > end || end > c {
            return Err(Error::shape(format!(
                "column range {start}..{end} out of bounds for {c} columns"
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor::new(vec![r, w], out)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let (r, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.dims2()?;
            if pr != r {
                return Err(Error::shape(format!("concat rows differ: {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Tensor::new(vec![r, total], out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, d) = self.last_dim()?;
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Tensor::new(self.shape.clone(), data)
    }

    /// Layer normalization over the trailing dimension. Returns the output
    /// together with the normalized input and per-vector `1/sigma`, which the
    /// backward rule consumes.
    pub fn layer_norm_parts(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Tensor, Vec<f64>)> {
        let (n, d) = self.last_dim()?;
        if gamma.len() != d || beta.len() != d {
            return Err(Error::shape(format!(
                "layer_norm affine params must have length {d}, got {} and {}",
                gamma.len(),
                beta.len()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidParam(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let mut xhat = vec![0.0; self.data.len()];
        let mut out = vec![0.0; self.data.len()];
        let mut inv_std = Vec::with_capacity(n);
        for (i, x) in self.data.chunks_exact(d).enumerate() {
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            inv_std.push(rs);
            for j in 0..d {
                let h = (x[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gamma.data[j] + beta.data[j];
            }
        }
        Ok((
            Tensor::new(self.shape.clone(), out)?,
            Tensor::new(self.shape.clone(), xhat)?,
            inv_std,
        ))
    }

    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(self.layer_norm_parts(gamma, beta, eps)?.0)
    }

    /// Exact-erf GELU.
    pub fn gelu(&self) -> Tensor {
        self.map(gelu_scalar)
    }

    /// Index of the largest element; ties go to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i)
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// d/dx of the exact GELU: `Phi(x) + x * phi(x)`.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Row-major output of an `m x k` by `k x n` product. Strides are
/// `(row, col)` in elements, which lets callers express transposes.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
) -> Tensor {
    let mut c = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the callers checked that `a` holds m*k and `b` holds k*n
        // elements laid out with the given strides, and `c` holds m*n.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor {
        shape: vec![m, n],
        data: c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a.at2(i, l) * b.at2(l, j);
                }
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&x).unwrap(), x);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        let expected = naive_matmul(&a, &b);
        assert_eq!(expected.data(), &[11.0]);
        assert_eq!(a.matmul(&b).unwrap(), expected);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::zeros(&[2, 3]);
        let b = Tensor::new(vec![3, 2], vec![1.0, -2.0, 3.5, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(z.matmul(&b).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64 * 0.5 - 1.0).collect()).unwrap();
        let b = Tensor::new(vec![4, 3], (0..12).map(|v| (v as f64).sin()).collect()).unwrap();
        let nt = a.matmul_nt(&b).unwrap();
        assert_eq!(nt, naive_matmul(&a, &b.transpose().unwrap()));
        let c = Tensor::new(vec![2, 4], (0..8).map(|v| (v as f64).cos()).collect()).unwrap();
        let tn = a.matmul_tn(&c).unwrap();
        let expected = naive_matmul(&a.transpose().unwrap(), &c);
        for (x, y) in tn.data().iter().zip(expected.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_rows(&[&[0.0, 0.0], &[1000.0, 1000.0], &[0.0, 3f64.ln()]]).unwrap();
        let s = t.softmax_rows().unwrap();
        assert_eq!(&s.data()[..4], &[0.5, 0.5, 0.5, 0.5]);
        // e^x / sum e^x with x = [0, ln 3] is [1/4, 3/4]
        assert_relative_eq!(s.at2(2, 0), 0.25, epsilon = 1e-15);
        assert_relative_eq!(s.at2(2, 1), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full(&[2], 1.0);
        let zero = Tensor::zeros(&[2]);
        let c = Tensor::full(&[1, 2], 7.0);
        assert_eq!(c.layer_norm(&one, &zero, 1e-6).unwrap(), Tensor::zeros(&[1, 2]));

        // mean 2, population variance 1
        let x = Tensor::from_rows(&[&[1.0, 3.0]]).unwrap();
        let y = x.layer_norm(&one, &zero, 1e-12).unwrap();
        assert_relative_eq!(y.data()[0], -1.0, epsilon = 1e-9);
        assert_relative_eq!(y.data()[1], 1.0, epsilon = 1e-9);

        let beta = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let y = x.layer_norm(&zero, &beta, 1e-6).unwrap();
        assert_eq!(y.data(), &[0.3, -0.7]);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert_relative_eq!(gelu_scalar(30.0), 30.0, epsilon = 1e-12);
        // Phi(1) = 0.5 * (1 + erf(1/sqrt 2))
        let phi1 = 0.5 * (1.0 + libm::erf(1.0 / 2f64.sqrt()));
        assert_relative_eq!(phi1, 0.841_344_746_068_542_9, epsilon = 1e-15);
        assert_relative_eq!(gelu_scalar(1.0), phi1, epsilon = 1e-15);
        let grid: Vec<f64> = (0..200).map(|i| -0.75 + i as f64 * 0.05).collect();
        assert!(grid.windows(2).all(|w| gelu_scalar(w[0]) < gelu_scalar(w[1])));
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-5;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert_relative_eq!(gelu_grad_scalar(x), fd, epsilon = 1e-9);
        }
    }

    #[test]
    fn argmax_ties_to_lowest() {
        let t = Tensor::new(vec![4], vec![1.0, 3.0, 3.0, 0.0]).unwrap();
        assert_eq!(t.argmax(), Some(1));
        assert_eq!(Tensor::zeros(&[5]).argmax(), Some(0));
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(t in matrix(3, 7).prop_map(|t| t.scale(50.0))) {
            let s = t.softmax_rows().unwrap();
            for row in s.data().chunks(7) {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 2), c in matrix(2, 5)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }

        #[test]
        fn matmul_matches_naive(a in matrix(5, 3), b in matrix(3, 6)) {
            let fast = a.matmul(&b).unwrap();
            let slow = naive_matmul(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
