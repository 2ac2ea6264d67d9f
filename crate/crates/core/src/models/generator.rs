use rand::Rng;
use serde::{Deserialize, Serialize};

use super::unet::{Dims, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bounds on the predicted log-variance `s = log sigma^2`.
pub const LOG_VARIANCE_MIN: f64 = -14.0;
pub const LOG_VARIANCE_MAX: f64 = 14.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub dims: Dims,
    pub base_channels: usize,
    /// Number of down/up levels.
    pub depth: usize,
}

impl GeneratorSpec {
    pub fn new(dims: Dims) -> Self {
        let base_channels = match dims {
            Dims::D2 => 64,
            Dims::D3 => 32,
        };
        Self {
            dims,
            base_channels,
            depth: 4,
        }
    }

    fn unet(&self) -> UNetConfig {
        UNetConfig {
            dims: self.dims,
            in_channels: 1,
            out_channels: 2,
            base_channels: self.base_channels,
            depth: self.depth,
            convs_per_level: 1,
        }
    }

    pub fn check_input(&self, spatial: [usize; 3]) -> Result<()> {
        self.unet().check_input(spatial)
    }
}

/// Per-voxel Gaussian over the reconstruction: mean and clamped log-variance,
/// both shaped `[N, 1, D, H, W]` like the input.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconOutput<T> {
    pub mean: Tensor<T>,
    pub log_variance: Tensor<T>,
}

impl<T: Scalar> ReconOutput<T> {
    pub fn variance(&self) -> Tensor<T> {
        self.log_variance.map(|s| s.exp())
    }
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub spec: GeneratorSpec,
    net: UNet<T>,
    /// Whether each raw log-variance fell inside the clamp on the last forward.
    unclamped: Vec<bool>,
    sliced: bool,
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(spec: GeneratorSpec, rng: &mut R) -> Self {
        Self {
            spec,
            net: UNet::new(spec.unet(), rng),
            unclamped: Vec::new(),
            sliced: false,
        }
    }

    fn prepare(&self, x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
        if x.channels() != 1 {
            return Err(Error::Shape(format!("generator expects 1 channel, got {}", x.channels())));
        }
        self.spec.check_input(x.spatial())?;
        // A 2-D generator sees each XY section of a volume independently.
        let slice = self.spec.dims == Dims::D2 && x.spatial()[0] > 1;
        if slice && x.batch() != 1 {
            return Err(Error::Shape("2-D generator takes one volume at a time".into()));
        }
        Ok(if slice { (x.depth_to_batch(), true) } else { (x.clone(), false) })
    }

    fn split(&self, raw: Tensor<T>, sliced: bool) -> (ReconOutput<T>, Vec<bool>) {
        let raw = if sliced { raw.batch_to_depth() } else { raw };
        let (mean, raw_s) = raw.split_channels(1);
        let (lo, hi) = (T::of(LOG_VARIANCE_MIN), T::of(LOG_VARIANCE_MAX));
        let unclamped = raw_s.data().iter().map(|&s| s >= lo && s <= hi).collect();
        let log_variance = raw_s.map(|s| s.max(lo).min(hi));
        (ReconOutput { mean, log_variance }, unclamped)
    }

    /// Forward pass caching activations for [`Generator::backward`].
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<ReconOutput<T>> {
        let (input, sliced) = self.prepare(x)?;
        let raw = self.net.forward(&input)?;
        let (out, unclamped) = self.split(raw, sliced);
        self.unclamped = unclamped;
        self.sliced = sliced;
        Ok(out)
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<ReconOutput<T>> {
        let (input, sliced) = self.prepare(x)?;
        let raw = self.net.apply(&input)?;
        Ok(self.split(raw, sliced).0)
    }

    /// Accumulate parameter gradients from gradients w.r.t. both heads.
    pub fn backward(&mut self, grad_mean: &Tensor<T>, grad_log_variance: &Tensor<T>) {
        let mut gs = grad_log_variance.clone();
        for (g, &ok) in gs.data_mut().iter_mut().zip(&self.unclamped) {
            if !ok {
                *g = T::zero();
            }
        }
        let g = Tensor::concat_channels(grad_mean, &gs).expect("head gradients match forward shapes");
        let g = if self.sliced { g.depth_to_batch() } else { g };
        self.net.backward(&g, false);
    }
}

impl<T: Scalar> Module<T> for Generator<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.net.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.net.visit_params_mut(f);
    }
}
