//! Minimal layer library with explicit reverse-mode gradients.
//!
//! Each layer caches what its backward pass needs during `forward` and
//! accumulates parameter gradients in `backward`. Networks compose layers
//! by hand, which keeps skip connections and frozen sub-networks explicit.

mod conv;
mod layers;
mod optim;

pub use conv::Conv;
pub use layers::{ConvBlock, InstanceNorm, LeakyRelu, Upsample};
pub use optim::{Adam, AdamState};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

/// A trainable buffer and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
        }
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn normal<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Self {
            value: (0..n).map(|_| T::of(dist.sample(rng))).collect(),
            grad: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything owning parameters, visited in a fixed order.
pub trait Module<T: Scalar> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// All parameter values, flattened in visiting order.
    fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    fn flat_grads(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(&mut |p| out.extend_from_slice(&p.grad));
        out
    }

    /// Overwrite all parameter values from a flat buffer produced by
    /// [`Module::flat_params`]. Returns false on length mismatch.
    fn load_flat_params(&mut self, flat: &[T]) -> bool {
        if flat.len() != self.num_params() {
            return false;
        }
        let mut off = 0;
        self.visit_params_mut(&mut |p| {
            let n = p.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        true
    }

    /// SHA-256 over the little-endian bytes of every parameter value.
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        self.visit_params(&mut |p| {
            for v in &p.value {
                h.update(v.as_f64().to_le_bytes());
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central-difference checks shared by the layer tests.

    use crate::tensor::Tensor;

    /// Max relative error between `analytic` and central differences of
    /// `loss` at `x`, probing every coordinate.
    pub fn input_gradient_error(
        x: &Tensor<f64>,
        analytic: &Tensor<f64>,
        mut loss: impl FnMut(&Tensor<f64>) -> f64,
        h: f64,
    ) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (fd - a).abs() / (fd.abs().max(a.abs()).max(1e-6));
            worst = worst.max(err);
        }
        worst
    }

    /// Fixed pseudo-random upstream gradient, so the scalar probe is `sum(w * y)`.
    pub fn probe_weights(shape: [usize; 5]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64) * 0.7311).sin()).collect()).unwrap()
    }

    pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }
}
