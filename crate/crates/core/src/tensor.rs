//! Dense row-major tensor value type.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use rand::Rng;

/// Dense n-dimensional array of scalars with an optional gradient buffer.
///
/// Invariants: `data.len() == shape.iter().product()`, and `grad`, when
/// present, has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::BadShape {
                op: "tensor",
                expected: "data length matching product of dimensions",
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Xavier/Glorot uniform init for a 2-D weight of shape `[fan_in, fan_out]`.
    pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| s::<S>(rng.random_range(-bound..bound)))
            .collect();
        Tensor {
            shape: vec![fan_in, fan_out],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Normal(mean, std) init via Box-Muller, any shape.
    pub fn normal(shape: Vec<usize>, mean: f64, std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| s::<S>(mean + std * std_normal(rng)))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Slice out index `i` along axis 0, e.g. `[B, L, C]` -> `[L, C]`.
    pub fn index_axis0(&self, i: usize) -> Result<Tensor<S>> {
        if self.shape.is_empty() || i >= self.shape[0] {
            return Err(Error::InvalidAxis {
                axis: i,
                shape: self.shape.clone(),
            });
        }
        let rest: usize = self.shape[1..].iter().product();
        let data = self.data[i * rest..(i + 1) * rest].to_vec();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn iter_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard normal draw via Box-Muller.
pub fn std_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = loop {
        let u = rng.random::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministic Fisher-Yates shuffle of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_checks_numel() {
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn index_axis0_slices_rows() {
        let t = Tensor::<f64>::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let r = t.index_axis0(1).unwrap();
        assert_eq!(r.shape(), &[3]);
        assert_eq!(r.data(), &[4., 5., 6.]);
        assert!(t.index_axis0(2).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::xavier_uniform(4, 4, &mut rng);
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let b = Tensor::<f64>::xavier_uniform(4, 4, &mut rng2);
        assert_eq!(a.data(), b.data());
        let bound = (6.0f64 / 8.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut idx = shuffled_indices(100, &mut rng);
        idx.sort_unstable();
        assert_eq!(idx, (0..100).collect::<Vec<_>>());
    }
}
