use rand::Rng;

use super::{Conv, Module, Param};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-sample, per-channel normalization over the spatial extent, without
/// affine parameters.
#[derive(Clone, Debug, Default)]
pub struct InstanceNorm<T> {
    output: Option<Tensor<T>>,
    inv_std: Vec<T>,
}

const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> InstanceNorm<T> {
    pub fn new() -> Self {
        Self {
            output: None,
            inv_std: Vec::new(),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        Self::normalize(x).0
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (y, inv) = Self::normalize(x);
        self.output = Some(y.clone());
        self.inv_std = inv;
        y
    }

    fn normalize(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        let mut y = x.clone();
        let p = x.plane_len();
        let np = T::of(p as f64);
        let mut inv = Vec::with_capacity(x.batch() * x.channels());
        for plane in y.data_mut().chunks_exact_mut(p) {
            let mean = plane.iter().copied().sum::<T>() / np;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / np;
            let s = T::one() / (var + T::of(NORM_EPS)).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv.push(s);
        }
        (y, inv)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let y = self.output.take().expect("InstanceNorm::backward called without forward");
        let p = y.plane_len();
        let np = T::of(p as f64);
        let mut dx = grad.clone();
        for ((dplane, yplane), &s) in dx.data_mut().chunks_exact_mut(p).zip(y.data().chunks_exact(p)).zip(&self.inv_std) {
            let mean_g = dplane.iter().copied().sum::<T>() / np;
            let mean_gy = dplane.iter().zip(yplane).map(|(&g, &v)| g * v).sum::<T>() / np;
            for (g, &v) in dplane.iter_mut().zip(yplane) {
                *g = s * (*g - mean_g - v * mean_gy);
            }
        }
        dx
    }
}

/// `max(x, 0) + slope * min(x, 0)`; `slope = 0` is a ReLU.
#[derive(Clone, Debug)]
pub struct LeakyRelu<T> {
    pub slope: T,
    output: Option<Tensor<T>>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: f64) -> Self {
        Self {
            slope: T::of(slope),
            output: None,
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = self.slope;
        x.map(|v| if v > T::zero() { v } else { s * v })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.apply(x);
        self.output = Some(y.clone());
        y
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let y = self.output.take().expect("LeakyRelu::backward called without forward");
        let mut dx = grad.clone();
        for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
            if v <= T::zero() {
                *g *= self.slope;
            }
        }
        dx
    }
}

/// Nearest-neighbour upsampling by integer factors along `[D, H, W]`.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub factor: [usize; 3],
}

impl Upsample {
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, d, h, w] = x.shape();
        let [fd, fh, fw] = self.factor;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let mut y = Tensor::zeros([n, c, od, oh, ow]);
        for i in 0..n {
            for ch in 0..c {
                let src = x.plane(i, ch);
                let dst = y.plane_mut(i, ch);
                for z in 0..od {
                    for yy in 0..oh {
                        let srow = &src[((z / fd) * h + yy / fh) * w..][..w];
                        let drow = &mut dst[(z * oh + yy) * ow..][..ow];
                        for (xx, v) in drow.iter_mut().enumerate() {
                            *v = srow[xx / fw];
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward<T: Scalar>(&self, grad: &Tensor<T>) -> Tensor<T> {
        let [n, c, od, oh, ow] = grad.shape();
        let [fd, fh, fw] = self.factor;
        let (d, h, w) = (od / fd, oh / fh, ow / fw);
        let mut dx = Tensor::zeros([n, c, d, h, w]);
        for i in 0..n {
            for ch in 0..c {
                let src = grad.plane(i, ch);
                let dst = dx.plane_mut(i, ch);
                for z in 0..od {
                    for yy in 0..oh {
                        let grow = &src[(z * oh + yy) * ow..][..ow];
                        let drow = &mut dst[((z / fd) * h + yy / fh) * w..][..w];
                        for (xx, &g) in grow.iter().enumerate() {
                            drow[xx / fw] += g;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Convolution, optional instance norm, optional leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub conv: Conv<T>,
    pub norm: Option<InstanceNorm<T>>,
    pub act: Option<LeakyRelu<T>>,
}

impl<T: Scalar> ConvBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        norm: bool,
        slope: Option<f64>,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv::new(in_channels, out_channels, kernel, stride, padding, rng),
            norm: norm.then(InstanceNorm::new),
            act: slope.map(LeakyRelu::new),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.conv.forward(x)?;
        if let Some(n) = self.norm.as_mut() {
            y = n.forward(&y);
        }
        if let Some(a) = self.act.as_mut() {
            y = a.forward(&y);
        }
        Ok(y)
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.conv.apply(x)?;
        if let Some(n) = self.norm.as_ref() {
            y = n.apply(&y);
        }
        if let Some(a) = self.act.as_ref() {
            y = a.apply(&y);
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let mut g = match self.act.as_mut() {
            Some(a) => a.backward(grad),
            None => grad.clone(),
        };
        if let Some(n) = self.norm.as_mut() {
            g = n.backward(&g);
        }
        self.conv.backward(&g, need_input_grad)
    }
}

impl<T: Scalar> Module<T> for ConvBlock<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{dot, input_gradient_error, probe_weights};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 5], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn instance_norm_output_statistics() {
        let x = random([2, 3, 2, 4, 4], 1).map(|v| 3.0 * v + 5.0);
        let y = InstanceNorm::new().apply(&x);
        for plane in y.data().chunks(32) {
            let m: f64 = plane.iter().sum::<f64>() / 32.0;
            let v: f64 = plane.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 32.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn instance_norm_gradient() {
        let x = random([1, 2, 2, 3, 3], 2);
        let mut norm = InstanceNorm::new();
        let y = norm.forward(&x);
        let w = probe_weights(y.shape());
        let dx = norm.backward(&w);
        let err = input_gradient_error(&x, &dx, |xi| dot(&InstanceNorm::new().apply(xi), &w), 1e-5);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn leaky_relu_gradient() {
        let x = random([1, 1, 2, 3, 3], 3);
        let mut act = LeakyRelu::new(0.2);
        let y = act.forward(&x);
        let w = probe_weights(y.shape());
        let dx = act.backward(&w);
        let err = input_gradient_error(&x, &dx, |xi| dot(&act.apply(xi), &w), 1e-6);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn upsample_is_adjoint_of_its_backward() {
        let up = Upsample { factor: [1, 2, 2] };
        let x = random([2, 2, 3, 2, 3], 4);
        let y = up.apply(&x);
        assert_eq!(y.shape(), [2, 2, 3, 4, 6]);
        let g = random(y.shape(), 5);
        // <up(x), g> == <x, up^T(g)>
        assert!((dot(&y, &g) - dot(&x, &up.backward(&g))).abs() < 1e-12);
    }

    #[test]
    fn conv_block_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut block = ConvBlock::<f64>::new(2, 3, [3, 3, 3], [1, 1, 1], [1, 1, 1], true, Some(0.2), &mut rng);
        let x = random([1, 2, 3, 4, 4], 7);
        let y = block.forward(&x).unwrap();
        let w = probe_weights(y.shape());
        let dx = block.backward(&w, true).unwrap();
        let err = input_gradient_error(&x, &dx, |xi| dot(&block.apply(xi).unwrap(), &w), 1e-5);
        assert!(err < 1e-5, "{err}");
    }
}
