//! Encoder-decoder with skip connections, shared by the generator and the
//! segmentation network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBlock, Module, Param, Upsample};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial dimensionality of a network's kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dims {
    #[serde(rename = "2d")]
    D2,
    #[serde(rename = "3d")]
    D3,
}

impl Dims {
    pub(crate) fn kernel(self, k: usize) -> [usize; 3] {
        match self {
            Dims::D2 => [1, k, k],
            Dims::D3 => [k, k, k],
        }
    }

    pub(crate) fn pad(self, p: usize) -> [usize; 3] {
        match self {
            Dims::D2 => [0, p, p],
            Dims::D3 => [p, p, p],
        }
    }

    pub(crate) fn stride(self, s: usize) -> [usize; 3] {
        self.kernel(s)
    }
}

const SLOPE: f64 = 0.2;
const AXIS_NAMES: [&str; 3] = ["Z", "Y", "X"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub dims: Dims,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub convs_per_level: usize,
}

impl UNetConfig {
    fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(3)
    }

    /// Every spatial axis the network halves must be divisible by `2^depth`.
    pub fn check_input(&self, spatial: [usize; 3]) -> Result<()> {
        let f = 1usize << self.depth;
        let first = match self.dims {
            Dims::D2 => 1,
            Dims::D3 => 0,
        };
        for a in first..3 {
            if spatial[a] % f != 0 || spatial[a] == 0 {
                return Err(Error::Shape(format!(
                    "axis {} has extent {}, not divisible by 2^{} = {f}",
                    AXIS_NAMES[a], spatial[a], self.depth
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UNet<T> {
    pub cfg: UNetConfig,
    enc: Vec<Vec<ConvBlock<T>>>,
    down: Vec<ConvBlock<T>>,
    up: Vec<ConvBlock<T>>,
    dec: Vec<Vec<ConvBlock<T>>>,
    head: Conv<T>,
    upsample: Upsample,
}

impl<T: Scalar> UNet<T> {
    pub fn new<R: Rng + ?Sized>(cfg: UNetConfig, rng: &mut R) -> Self {
        let (k3, p1) = (cfg.dims.kernel(3), cfg.dims.pad(1));
        let (k2, s2) = (cfg.dims.kernel(2), cfg.dims.stride(2));
        let block = |cin, cout, rng: &mut R| ConvBlock::new(cin, cout, k3, [1, 1, 1], p1, true, Some(SLOPE), rng);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for level in 0..=cfg.depth {
            let c = cfg.channels(level);
            if level > 0 {
                let prev = cfg.channels(level - 1);
                down.push(ConvBlock::new(prev, c, k2, s2, [0, 0, 0], true, Some(SLOPE), rng));
            }
            let cin = if level == 0 { cfg.in_channels } else { c };
            let mut blocks = vec![block(cin, c, rng)];
            for _ in 1..cfg.convs_per_level {
                blocks.push(block(c, c, rng));
            }
            enc.push(blocks);
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for level in 0..cfg.depth {
            let c = cfg.channels(level);
            up.push(block(cfg.channels(level + 1), c, rng));
            let mut blocks = vec![block(2 * c, c, rng)];
            for _ in 1..cfg.convs_per_level {
                blocks.push(block(c, c, rng));
            }
            dec.push(blocks);
        }
        // Small head so initial outputs sit near zero.
        let head = Conv::new(cfg.base_channels, cfg.out_channels, [1, 1, 1], [1, 1, 1], [0, 0, 0], rng).with_gain(0.1);
        Self {
            cfg,
            enc,
            down,
            up,
            dec,
            head,
            upsample: Upsample { factor: s2 },
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.cfg.in_channels,
                x.channels()
            )));
        }
        self.cfg.check_input(x.spatial())
    }

    /// Forward pass caching activations for [`UNet::backward`].
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let depth = self.cfg.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for level in 0..=depth {
            if level > 0 {
                h = self.down[level - 1].forward(&h)?;
            }
            for b in &mut self.enc[level] {
                h = b.forward(&h)?;
            }
            if level < depth {
                skips.push(h.clone());
            }
        }
        for level in (0..depth).rev() {
            h = self.upsample.apply(&h);
            h = self.up[level].forward(&h)?;
            h = Tensor::concat_channels(&h, &skips[level])?;
            for b in &mut self.dec[level] {
                h = b.forward(&h)?;
            }
        }
        self.head.forward(&h)
    }

    /// Inference-only forward pass; leaves the backward caches untouched.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let depth = self.cfg.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for level in 0..=depth {
            if level > 0 {
                h = self.down[level - 1].apply(&h)?;
            }
            for b in &self.enc[level] {
                h = b.apply(&h)?;
            }
            if level < depth {
                skips.push(h.clone());
            }
        }
        for level in (0..depth).rev() {
            h = self.upsample.apply(&h);
            h = self.up[level].apply(&h)?;
            h = Tensor::concat_channels(&h, &skips[level])?;
            for b in &self.dec[level] {
                h = b.apply(&h)?;
            }
        }
        self.head.apply(&h)
    }

    /// Backpropagate `grad` (shaped like the output). Parameter gradients
    /// accumulate; the input gradient is returned when requested.
    pub fn backward(&mut self, grad: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let depth = self.cfg.depth;
        let mut g = self.head.backward(grad, true).expect("input grad requested");
        let mut skip_grads = Vec::with_capacity(depth);
        for level in 0..depth {
            for b in self.dec[level].iter_mut().rev() {
                g = b.backward(&g, true).expect("input grad requested");
            }
            let (g_up, g_skip) = g.split_channels(self.cfg.channels(level));
            skip_grads.push(g_skip);
            g = self.up[level].backward(&g_up, true).expect("input grad requested");
            g = self.upsample.backward(&g);
        }
        for level in (0..=depth).rev() {
            for (i, b) in self.enc[level].iter_mut().enumerate().rev() {
                let first_layer = level == 0 && i == 0;
                match b.backward(&g, !first_layer || need_input_grad) {
                    Some(next) => g = next,
                    None => return None,
                }
            }
            if level > 0 {
                g = self.down[level - 1].backward(&g, true).expect("input grad requested");
                g.add_assign(&skip_grads[level - 1]);
            }
        }
        Some(g)
    }
}

impl<T: Scalar> Module<T> for UNet<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for level in 0..=self.cfg.depth {
            if level > 0 {
                self.down[level - 1].visit_params(f);
            }
            self.enc[level].iter().for_each(|b| b.visit_params(f));
        }
        for level in 0..self.cfg.depth {
            self.up[level].visit_params(f);
            self.dec[level].iter().for_each(|b| b.visit_params(f));
        }
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for level in 0..=self.cfg.depth {
            if level > 0 {
                self.down[level - 1].visit_params_mut(f);
            }
            self.enc[level].iter_mut().for_each(|b| b.visit_params_mut(f));
        }
        for level in 0..self.cfg.depth {
            self.up[level].visit_params_mut(f);
            self.dec[level].iter_mut().for_each(|b| b.visit_params_mut(f));
        }
        self.head.visit_params_mut(f);
    }
}
