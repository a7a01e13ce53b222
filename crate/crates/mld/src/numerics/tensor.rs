use crate::{Error, Result};

/// Scalar type the engine is generic over. Models train at `f32`; oracle
/// tests can instantiate the same code at `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + 'static
{
    fn of_f64(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("representable")
    }
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. Rank is almost always 1 or 2 in this crate
/// (sequences are `rows x features`).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorG<T> {
    dims: Vec<usize>,
    data: Vec<T>,
    /// Marks a parameter leaf; consulted when the tensor is bound to a graph.
    pub requires_grad: bool,
}

pub type Tensor = TensorG<f32>;

impl<T: Scalar> TensorG<T> {
    pub fn from_vec(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() || dims.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("dims {:?} (numel {}) vs data len {}", dims, numel, data.len()),
            });
        }
        Ok(TensorG {
            dims,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        TensorG {
            dims: dims.to_vec(),
            data: vec![T::zero(); numel],
            requires_grad: false,
        }
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        let numel = dims.iter().product();
        TensorG {
            dims: dims.to_vec(),
            data: vec![v; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(v: T) -> Self {
        TensorG {
            dims: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row/column view of a rank-1 or rank-2 tensor: rank-1 counts as one row.
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            1 => 1,
            _ => self.dims[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.dims.len() {
            1 => self.dims[0],
            _ => self.dims[1..].iter().product(),
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims == other.dims
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        TensorG {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                op: "zip_map",
                detail: format!("{:?} vs {:?}", self.dims, other.dims),
            });
        }
        Ok(TensorG {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// 2-D matrix product, row-major ikj loop.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.dims, other.dims),
            });
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (l, &a) in arow.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[l * n..(l + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        TensorG::from_vec(vec![m, n], out)
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        TensorG {
            dims: vec![n, m],
            data: out,
            requires_grad: false,
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in self.data.iter_mut() {
            *a = *a * s;
        }
    }

    /// Convert the element type, round-tripping through f64.
    pub fn cast<U: Scalar>(&self) -> TensorG<U> {
        TensorG {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::of_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f32(&self) -> TensorG<f32> {
        TensorG {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| v.as_f64() as f32).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f64(&self) -> TensorG<f64> {
        TensorG {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| v.as_f64()).collect(),
            requires_grad: self.requires_grad,
        }
    }

    /// Max |a - b| over all entries; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_numel() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![0], vec![]).is_err());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.dims(), &[2, 2]);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let t = a.transpose();
        assert_eq!(t.dims(), &[3, 2]);
        assert_eq!(t.at(0, 1), 4.0);
        assert_eq!(t.transpose().data(), a.data());
    }
}
