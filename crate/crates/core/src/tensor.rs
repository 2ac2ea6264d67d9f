//! Dense 5-D activation tensor laid out `[N, C, D, H, W]` row-major.
//!
//! 2-D data uses `D = 1`; every network in the crate runs on this one
//! layout so 2-D and 3-D models share their layer code.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 5], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Elements per `(n, c)` plane.
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Contiguous data of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.len() / self.shape[0];
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.len() / self.shape[0];
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Contiguous data of channel `c` of sample `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let off = (n * self.shape[1] + c) * p;
        &self.data[off..off + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane_len();
        let off = (n * self.shape[1] + c) * p;
        &mut self.data[off..off + p]
    }

    pub fn reshape(self, shape: [usize; 5]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.data.iter().copied().sum::<T>() / T::of(self.data.len() as f64)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if a.shape[0] != b.shape[0] || a.shape[2..] != b.shape[2..] {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let mut shape = a.shape;
        shape[1] += b.shape[1];
        let mut data = Vec::with_capacity(a.len() + b.len());
        for n in 0..a.shape[0] {
            data.extend_from_slice(a.sample(n));
            data.extend_from_slice(b.sample(n));
        }
        Ok(Self { shape, data })
    }

    /// Inverse of [`Tensor::concat_channels`]: split off the first `c` channels.
    pub fn split_channels(&self, c: usize) -> (Self, Self) {
        let [n, ct, d, h, w] = self.shape;
        assert!(c <= ct);
        let p = d * h * w;
        let mut a = Vec::with_capacity(n * c * p);
        let mut b = Vec::with_capacity(n * (ct - c) * p);
        for i in 0..n {
            let s = self.sample(i);
            a.extend_from_slice(&s[..c * p]);
            b.extend_from_slice(&s[c * p..]);
        }
        (
            Self {
                shape: [n, c, d, h, w],
                data: a,
            },
            Self {
                shape: [n, ct - c, d, h, w],
                data: b,
            },
        )
    }

    /// Reinterpret a single volume `[1, C, D, H, W]` as a batch of `D`
    /// XY sections `[D, C, 1, H, W]`.
    pub fn depth_to_batch(&self) -> Self {
        let [n, c, d, h, w] = self.shape;
        assert_eq!(n, 1, "depth_to_batch expects a single sample");
        if c == 1 {
            return Self {
                shape: [d, 1, 1, h, w],
                data: self.data.clone(),
            };
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(self.len());
        for z in 0..d {
            for ch in 0..c {
                let plane = self.plane(0, ch);
                data.extend_from_slice(&plane[z * hw..(z + 1) * hw]);
            }
        }
        Self {
            shape: [d, c, 1, h, w],
            data,
        }
    }

    /// Inverse of [`Tensor::depth_to_batch`].
    pub fn batch_to_depth(&self) -> Self {
        let [d, c, one, h, w] = self.shape;
        assert_eq!(one, 1, "batch_to_depth expects 2-D samples");
        if c == 1 {
            return Self {
                shape: [1, 1, d, h, w],
                data: self.data.clone(),
            };
        }
        let hw = h * w;
        let mut out = Self::zeros([1, c, d, h, w]);
        for z in 0..d {
            for ch in 0..c {
                let src = self.plane(z, ch);
                out.plane_mut(0, ch)[z * hw..(z + 1) * hw].copy_from_slice(src);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::<f32>::from_vec([2, 1, 1, 2, 2], (0..8).map(|x| x as f32).collect()).unwrap();
        let b = Tensor::<f32>::from_vec([2, 2, 1, 2, 2], (0..16).map(|x| -(x as f32)).collect()).unwrap();
        let ab = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), [2, 3, 1, 2, 2]);
        assert_eq!(ab.plane(1, 0), a.plane(1, 0));
        let (a2, b2) = ab.split_channels(1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn depth_batch_round_trip_multichannel() {
        let t = Tensor::<f64>::from_vec([1, 2, 3, 2, 2], (0..24).map(f64::from).collect()).unwrap();
        let s = t.depth_to_batch();
        assert_eq!(s.shape(), [3, 2, 1, 2, 2]);
        // section z=1, channel 1 starts at element (1*3 + 1) * 4
        assert_eq!(s.plane(1, 1)[0], 16.0);
        assert_eq!(s.batch_to_depth(), t);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec([1, 1, 2, 2, 2], vec![0.0; 7]).is_err());
    }
}
