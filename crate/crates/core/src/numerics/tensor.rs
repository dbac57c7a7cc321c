use rand::Rng;

use super::scalar::Scalar;

/// Dense row-major tensor of arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {:?}", shape);
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![T::zero(); numel])
    }

    pub fn scalar(value: T) -> Tensor<T> {
        Tensor::from_vec(vec![1], vec![value])
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel])
    }

    /// Uniform init in [-bound, bound] with bound = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot<R: Rng>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Tensor::from_vec(shape, data)
    }

    pub fn with_grad(mut self) -> Tensor<T> {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix {:?}", self.shape);
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = *self.shape.last().unwrap();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar_shape(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|v| v.to_f64())
    }
}

pub fn l2_norm<T: Scalar>(tensors: &[&Tensor<T>]) -> f64 {
    let mut acc = 0.0f64;
    for t in tensors {
        for v in t.data() {
            let x = v.to_f64();
            acc += x * x;
        }
    }
    acc.sqrt()
}
