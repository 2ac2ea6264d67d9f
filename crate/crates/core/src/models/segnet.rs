use rand::Rng;
use serde::{Deserialize, Serialize};

use super::unet::{Dims, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volcore::Section;

/// 2-D membrane segmentation U-Net producing one probability per pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegNetSpec {
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for SegNetSpec {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 4,
        }
    }
}

impl SegNetSpec {
    fn unet(&self) -> UNetConfig {
        UNetConfig {
            dims: Dims::D2,
            in_channels: 1,
            out_channels: 1,
            base_channels: self.base_channels,
            depth: self.depth,
            convs_per_level: 2,
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Debug)]
pub struct SegNet<T> {
    pub spec: SegNetSpec,
    net: UNet<T>,
    probs: Option<Tensor<T>>,
}

impl<T: Scalar> SegNet<T> {
    pub fn new<R: Rng + ?Sized>(spec: SegNetSpec, rng: &mut R) -> Self {
        Self {
            spec,
            net: UNet::new(spec.unet(), rng),
            probs: None,
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.spatial()[0] != 1 || x.channels() != 1 {
            return Err(Error::Shape(format!(
                "segmentation network takes [N, 1, 1, H, W] sections, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Logits for a batch of sections, caching for [`SegNet::backward_logits`].
    pub fn forward_logits(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        self.probs = None;
        self.net.forward(x)
    }

    pub fn backward_logits(&mut self, grad: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        self.net.backward(grad, need_input_grad)
    }

    /// Membrane probabilities for a batch of sections, caching for
    /// [`SegNet::backward_probs`].
    pub fn forward_probs(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.forward_logits(x)?.map(sigmoid);
        self.probs = Some(p.clone());
        Ok(p)
    }

    /// Gradient w.r.t. the input sections given gradients w.r.t. the
    /// probabilities. Parameter gradients are cleared afterwards: the
    /// network is only ever used frozen through this path.
    pub fn backward_probs(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let p = self.probs.take().expect("SegNet::backward_probs called without forward_probs");
        let mut g = grad.clone();
        for (gi, &pi) in g.data_mut().iter_mut().zip(p.data()) {
            *gi *= pi * (T::one() - pi);
        }
        let dx = self.net.backward(&g, true).expect("input grad requested");
        self.zero_grad();
        dx
    }

    /// Inference on a batch of sections.
    pub fn probabilities(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        Ok(self.net.apply(x)?.map(sigmoid))
    }

    /// Inference on one section of any size: edges are replicated up to the
    /// next multiple of `2^depth` and the result cropped back.
    pub fn segment(&self, section: &Section<T>) -> Result<Section<T>> {
        let m = 1usize << self.spec.depth;
        let [h, w] = section.shape;
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        if (ph, pw) == (h, w) {
            let p = self.probabilities(&section.to_tensor())?;
            return Section::new(section.shape, p.into_vec());
        }
        let mut padded = Vec::with_capacity(ph * pw);
        for r in 0..ph {
            for c in 0..pw {
                padded.push(section.get(r.min(h - 1), c.min(w - 1)));
            }
        }
        let p = self.probabilities(&Tensor::from_vec([1, 1, 1, ph, pw], padded)?)?;
        let data = p.data();
        let out = (0..h).flat_map(|r| data[r * pw..r * pw + w].iter().copied()).collect();
        Section::new(section.shape, out)
    }
}

impl<T: Scalar> Module<T> for SegNet<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.net.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.net.visit_params_mut(f);
    }
}
