use rand::Rng;
use serde::{Deserialize, Serialize};

use super::unet::Dims;
use crate::error::{Error, Result};
use crate::nn::{ConvBlock, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub dims: Dims,
    pub base_channels: usize,
    /// Number of stride-2 layers.
    pub n_layers: usize,
    /// Score `(y, x)` pairs instead of `y` alone.
    #[serde(default)]
    pub conditional: bool,
}

impl DiscriminatorSpec {
    pub fn new(dims: Dims) -> Self {
        Self {
            dims,
            base_channels: 64,
            n_layers: 3,
            conditional: false,
        }
    }

    /// Score-map extent for an input of `spatial` voxels.
    pub fn output_spatial(&self, spatial: [usize; 3]) -> Result<[usize; 3]> {
        let (k, p) = (self.dims.kernel(4), self.dims.pad(1));
        let s2 = self.dims.stride(2);
        let mut out = spatial;
        for a in 0..3 {
            let mut n = out[a] as isize;
            let layers = (0..self.n_layers).map(|_| s2[a]).chain([1, 1]);
            for s in layers {
                n = (n + 2 * p[a] as isize - k[a] as isize).div_euclid(s as isize) + 1;
                if n < 1 {
                    return Err(Error::Shape(format!(
                        "input {spatial:?} is too small for a {}-layer discriminator",
                        self.n_layers
                    )));
                }
            }
            out[a] = n as usize;
        }
        Ok(out)
    }
}

/// PatchGAN: a fully convolutional classifier emitting one logit per
/// receptive-field patch.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub spec: DiscriminatorSpec,
    blocks: Vec<ConvBlock<T>>,
    sliced: bool,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(spec: DiscriminatorSpec, rng: &mut R) -> Self {
        let (k4, p1) = (spec.dims.kernel(4), spec.dims.pad(1));
        let s2 = spec.dims.stride(2);
        let width = |i: usize| spec.base_channels * (1usize << i.min(3));
        let in_ch = if spec.conditional { 2 } else { 1 };
        let mut blocks = vec![ConvBlock::new(in_ch, width(0), k4, s2, p1, false, Some(0.2), rng)];
        for i in 1..spec.n_layers {
            blocks.push(ConvBlock::new(width(i - 1), width(i), k4, s2, p1, true, Some(0.2), rng));
        }
        let last = spec.n_layers.saturating_sub(1);
        let n = spec.n_layers;
        blocks.push(ConvBlock::new(width(last), width(n), k4, [1, 1, 1], p1, true, Some(0.2), rng));
        blocks.push(ConvBlock::new(width(n), 1, k4, [1, 1, 1], p1, false, None, rng));
        Self {
            spec,
            blocks,
            sliced: false,
        }
    }

    fn prepare(&self, y: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<(Tensor<T>, bool)> {
        if y.channels() != 1 {
            return Err(Error::Shape(format!("discriminator expects 1 channel, got {}", y.channels())));
        }
        let input = match (self.spec.conditional, cond) {
            (true, Some(x)) => Tensor::concat_channels(y, x)?,
            (true, None) => return Err(Error::Shape("conditional discriminator needs the input volume".into())),
            (false, _) => y.clone(),
        };
        let depth = y.spatial()[0];
        match self.spec.dims {
            Dims::D3 if depth < 2 => Err(Error::Shape(format!(
                "3-D discriminator needs a volume, got depth {depth}"
            ))),
            Dims::D2 if depth > 1 => {
                if y.batch() != 1 {
                    return Err(Error::Shape("2-D discriminator takes one volume at a time".into()));
                }
                Ok((input.depth_to_batch(), true))
            }
            _ => Ok((input, false)),
        }
    }

    /// Patch logits. A 2-D discriminator applied to a volume scores every
    /// XY section and returns the scores stacked along depth.
    pub fn forward(&mut self, y: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (mut h, sliced) = self.prepare(y, cond)?;
        for b in &mut self.blocks {
            h = b.forward(&h)?;
        }
        self.sliced = sliced;
        Ok(if sliced { h.batch_to_depth() } else { h })
    }

    pub fn apply(&self, y: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (mut h, sliced) = self.prepare(y, cond)?;
        for b in &self.blocks {
            h = b.apply(&h)?;
        }
        Ok(if sliced { h.batch_to_depth() } else { h })
    }

    /// Accumulate parameter gradients only, skipping the input gradient.
    pub fn backward_params(&mut self, grad: &Tensor<T>) {
        let mut g = if self.sliced { grad.depth_to_batch() } else { grad.clone() };
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            if let Some(next) = b.backward(&g, i > 0) {
                g = next;
            }
        }
    }

    /// Backpropagate score gradients; returns the gradient w.r.t. `y`.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = if self.sliced { grad.depth_to_batch() } else { grad.clone() };
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g, true).expect("input grad requested");
        }
        if self.sliced {
            g = g.batch_to_depth();
        }
        if self.spec.conditional {
            g = g.split_channels(1).0;
        }
        g
    }
}

impl<T: Scalar> Module<T> for Discriminator<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.blocks.iter().for_each(|b| b.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.blocks.iter_mut().for_each(|b| b.visit_params_mut(f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{dot, input_gradient_error, probe_weights};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_3d_patch_map_on_training_crop() {
        // Only shapes matter here; a narrow network keeps the test fast.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = DiscriminatorSpec {
            base_channels: 2,
            ..DiscriminatorSpec::new(Dims::D3)
        };
        let d = Discriminator::<f32>::new(spec, &mut rng);
        let s = d.apply(&Tensor::full([1, 1, 64, 128, 128], 0.5), None).unwrap();
        let [_, c, sz, sy, sx] = s.shape();
        assert_eq!(c, 1);
        assert!(sz >= 2 && sy >= 2 && sx >= 2, "{:?}", s.shape());
        assert!(sz < 64 && sy < 128 && sx < 128);
    }

    #[test]
    fn output_extent_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = DiscriminatorSpec {
            base_channels: 2,
            n_layers: 2,
            ..DiscriminatorSpec::new(Dims::D3)
        };
        let d = Discriminator::<f32>::new(spec, &mut rng);
        let s = d.apply(&Tensor::full([1, 1, 16, 24, 20], 0.5), None).unwrap();
        assert_eq!(spec.output_spatial([16, 24, 20]).unwrap(), s.spatial());
        assert!(spec.output_spatial([8, 16, 16]).is_err());
        let flat = DiscriminatorSpec { dims: Dims::D2, ..spec };
        assert_eq!(flat.output_spatial([1, 16, 16]).unwrap()[0], 1);
    }

    #[test]
    fn two_d_scores_every_section() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = DiscriminatorSpec {
            base_channels: 4,
            n_layers: 2,
            ..DiscriminatorSpec::new(Dims::D2)
        };
        let d = Discriminator::<f32>::new(spec, &mut rng);
        let s = d.apply(&Tensor::full([1, 1, 5, 32, 32], 0.5), None).unwrap();
        assert_eq!(s.shape()[2], 5);
        assert!(s.shape()[3] > 1 && s.shape()[3] < 32);
    }

    #[test]
    fn three_d_rejects_flat_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Discriminator::<f32>::new(DiscriminatorSpec { base_channels: 2, ..DiscriminatorSpec::new(Dims::D3) }, &mut rng);
        assert!(matches!(d.apply(&Tensor::zeros([1, 1, 1, 32, 32]), None), Err(Error::Shape(_))));
    }

    #[test]
    fn distinguishes_constant_inputs_and_has_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = DiscriminatorSpec {
            base_channels: 4,
            n_layers: 2,
            ..DiscriminatorSpec::new(Dims::D3)
        };
        let mut d = Discriminator::<f64>::new(spec, &mut rng);
        let lo = d.apply(&Tensor::full([1, 1, 16, 16, 16], 0.1), None).unwrap().mean();
        let hi = d.apply(&Tensor::full([1, 1, 16, 16, 16], 0.9), None).unwrap().mean();
        assert!((lo - hi).abs() > 1e-6, "{lo} vs {hi}");

        let y = Tensor::from_vec([1, 1, 16, 16, 16], (0..4096).map(|i| (i as f64 * 0.013).sin()).collect()).unwrap();
        let s = d.forward(&y, None).unwrap();
        let n = s.len() as f64;
        let g = d.backward(&Tensor::full(s.shape(), 1.0 / n));
        assert!(g.data().iter().any(|&v| v.abs() > 0.0));
    }

    #[test]
    fn conditional_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = DiscriminatorSpec {
            dims: Dims::D2,
            base_channels: 2,
            n_layers: 1,
            conditional: true,
        };
        let mut d = Discriminator::<f64>::new(spec, &mut rng);
        let y = Tensor::from_vec([1, 1, 2, 6, 6], (0..72).map(|i| (i as f64 * 0.31).sin()).collect()).unwrap();
        let x = Tensor::from_vec([1, 1, 2, 6, 6], (0..72).map(|i| (i as f64 * 0.17).cos()).collect()).unwrap();
        let s = d.forward(&y, Some(&x)).unwrap();
        let w = probe_weights(s.shape());
        let dy = d.backward(&w);
        assert_eq!(dy.shape(), y.shape());
        let err = input_gradient_error(&y, &dy, |yi| dot(&d.apply(yi, Some(&x)).unwrap(), &w), 1e-5);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn parameter_only_backward_matches_full_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = DiscriminatorSpec {
            base_channels: 2,
            n_layers: 2,
            ..DiscriminatorSpec::new(Dims::D2)
        };
        let mut d = Discriminator::<f64>::new(spec, &mut rng);
        let y = Tensor::from_vec([1, 1, 3, 16, 16], (0..768).map(|i| (i as f64 * 0.07).sin()).collect()).unwrap();
        let s = d.forward(&y, None).unwrap();
        d.backward(&probe_weights(s.shape()));
        let full = d.flat_grads();
        d.zero_grad();
        d.forward(&y, None).unwrap();
        d.backward_params(&probe_weights(s.shape()));
        assert_eq!(d.flat_grads(), full);
    }
}
