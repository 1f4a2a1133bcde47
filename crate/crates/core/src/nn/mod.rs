//! Minimal differentiable runtime for compiled graphs.
//!
//! Forward and backward passes for every graph op, softmax cross-entropy,
//! and SGD with momentum. Training runs in 32-bit floats; the whole
//! runtime is generic over the scalar so tests can instantiate it in
//! 64-bit and compare against finite differences. One training run is
//! single-threaded and fully seeded; concurrency happens across runs.

pub mod gradcheck;
mod ops;
mod runtime;
mod train;

pub use runtime::{GraphRuntime, ParamSlot, TrainedModel};
pub use train::{train, EpochStats, TrainConfig, TrainOutcome};

use num_traits::Float;

/// Scalar types the runtime can run in. Dispatches matrix multiplication
/// to the matching BLAS-style kernel.
pub trait Scalar: Float + num_traits::NumAssign + Send + Sync + std::fmt::Debug + 'static {
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. Spatial activations are laid out
/// `[batch, channels, height, width]`, flat ones `[batch, features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims,
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(dims: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    /// Reinterprets the buffer under new dims with the same element count.
    pub fn reshaped(&self, dims: Vec<usize>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), self.data.len());
        Tensor {
            dims,
            data: self.data.clone(),
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Index of the largest value in each row of an `[n, k]` tensor; ties
    /// resolve to the first maximum.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let k = self.dims[1];
        self.data
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}
