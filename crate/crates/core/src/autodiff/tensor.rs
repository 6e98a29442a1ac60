use crate::error::{Error, Result};
use crate::real::Real;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Independent draws from U(−bound, bound).
    pub fn uniform<R: rand::Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| F::c(rng.random_range(-bound..=bound))).collect(),
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| F::c(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts to another precision.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::c(x.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Validates that `small` broadcasts into `big` (same rank, each dim 1 or equal)
/// and returns the strides to walk `small` while iterating `big`.
pub(crate) fn broadcast_strides(op: &'static str, big: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if big.len() != small.len() {
        return Err(Error::shape(
            op,
            format!("rank mismatch {big:?} vs {small:?}; reshape explicitly"),
        ));
    }
    let st = strides(small);
    big.iter()
        .zip(small)
        .zip(st)
        .map(|((&b, &s), stride)| {
            if s == b {
                Ok(stride)
            } else if s == 1 {
                Ok(0)
            } else {
                Err(Error::shape(op, format!("{small:?} does not broadcast to {big:?}")))
            }
        })
        .collect()
}

/// Calls `f(i, j)` for every flat index `i` of `big` with the matching flat
/// index `j` into the broadcast operand.
pub(crate) fn for_each_broadcast(big: &[usize], bstrides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = big.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = big[rank - 1];
    let inner_stride = bstrides[rank - 1];
    let outer: usize = big[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for o in 0..outer {
        let start = o * inner;
        for k in 0..inner {
            f(start + k, base + k * inner_stride);
        }
        // odometer over the leading dims
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += bstrides[ax];
            if idx[ax] < big[ax] {
                break;
            }
            base -= bstrides[ax] * big[ax];
            idx[ax] = 0;
        }
    }
}
