//! Dense row-major tensors and the value-level numeric operations.
//!
//! Every operation here treats the last dimension as columns and all leading
//! dimensions as rows. The differentiable versions live on [`crate::autodiff::Tape`].

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![S::zero(); numel]).expect("valid zero tensor")
    }

    pub fn vector(data: Vec<S>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn scalar(x: S) -> Self {
        Self::new(vec![1], vec![x]).expect("scalar")
    }

    /// Builds a matrix from `f64` rows; all rows must have equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| S::lit(v))).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient length {} for tensor of {} values",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect()).unwrap()
    }

    /// Converts element type, e.g. `f64` to `f32`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        )
        .unwrap()
    }
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if b.shape.len() != 2 || a.cols() != b.shape[0] {
        return Err(Error::shape(format!(
            "matmul of {:?} and {:?}: inner dimensions differ",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.shape[1]);
    let mut out = vec![S::zero(); m * n];
    kernels::matmul_acc(&a.data, &b.data, m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax. `mask[i] == true` excludes position `i`; `-inf` inputs
/// are excluded as well. Excluded positions come out as exactly zero.
pub fn softmax<S: Scalar>(v: &Tensor<S>, mask: Option<&[bool]>) -> Result<Tensor<S>> {
    let mut input = v.clone();
    if let Some(mask) = mask {
        if mask.len() != v.numel() {
            return Err(Error::shape(format!(
                "mask of length {} for tensor of {} values",
                mask.len(),
                v.numel()
            )));
        }
        for (x, &m) in input.data.iter_mut().zip(mask) {
            if m {
                *x = S::neg_infinity();
            }
        }
    }
    let c = v.cols();
    let mut out = vec![S::zero(); v.numel()];
    for (x, y) in input.data.chunks(c).zip(out.chunks_mut(c)) {
        kernels::softmax_row(x, y)?;
    }
    Tensor::new(v.shape.clone(), out)
}

/// Row-wise softmin, computed as `softmax(-v)`.
pub fn softmin<S: Scalar>(v: &Tensor<S>) -> Result<Tensor<S>> {
    softmax(&v.map(|x| -x), None)
}

/// Row-wise log-softmax.
pub fn log_softmax<S: Scalar>(v: &Tensor<S>) -> Result<Tensor<S>> {
    let c = v.cols();
    let mut out = vec![S::zero(); v.numel()];
    for (x, y) in v.data.chunks(c).zip(out.chunks_mut(c)) {
        kernels::log_softmax_row(x, y)?;
    }
    Tensor::new(v.shape.clone(), out)
}

/// Layer normalization over the last dimension.
pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let d = x.cols();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::shape(format!(
            "layer_norm over width {d} with gain {:?} and bias {:?}",
            gain.shape, bias.shape
        )));
    }
    let mut out = vec![S::zero(); x.numel()];
    let mut xhat = vec![S::zero(); d];
    for (row, y) in x.data.chunks(d).zip(out.chunks_mut(d)) {
        kernels::layer_norm_row(row, &gain.data, &bias.data, y, &mut xhat);
    }
    Tensor::new(x.shape.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let i2 = Tensor::<f64>::identity(2);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[&[0.0], &[1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
        let err = matmul(&b, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 1]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let v = Tensor::<f64>::vector(vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax(&v, None).unwrap().data(), &[0.5, 0.5]);

        let v = Tensor::<f64>::vector(vec![f64::NEG_INFINITY, 0.3, 0.2]).unwrap();
        let s = softmax(&v, None).unwrap();
        assert_eq!(s.data()[0], 0.0);
        assert!((s.data()[1] - 0.5250).abs() < 1e-4);
        assert!((s.data()[2] - 0.4750).abs() < 1e-4);

        let v = Tensor::<f64>::vector(vec![7.5; 3]).unwrap();
        for p in softmax(&v, None).unwrap().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_fully_masked_is_degenerate() {
        let v = Tensor::<f64>::vector(vec![1.0, 2.0]).unwrap();
        let err = softmax(&v, Some(&[true, true])).unwrap_err();
        assert!(matches!(err, Error::DegenerateDistribution(_)));
    }

    #[test]
    fn softmin_examples() {
        let v = Tensor::<f64>::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmin(&v).unwrap();
        let expected = [0.66524, 0.24473, 0.09003];
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
        let v = Tensor::<f64>::vector(vec![0.0, 0.0]).unwrap();
        assert_eq!(softmin(&v).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::<f64>::vector(vec![1.0, 1.0]).unwrap();
        let zero = Tensor::<f64>::zeros(vec![2]);
        let x = Tensor::<f64>::vector(vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &one, &zero).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);

        let x = Tensor::<f64>::from_rows(&[&[4.0, 4.0], &[-2.0, -2.0]]).unwrap();
        assert!(layer_norm(&x, &one, &zero).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn works_in_single_precision() {
        let v = Tensor::<f32>::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmax(&v, None).unwrap();
        assert!((s.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
