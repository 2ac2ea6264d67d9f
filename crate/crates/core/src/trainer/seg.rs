use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{resolve_checkpoint, SegTrainConfig};
use crate::error::{Error, Result};
use crate::losses::bce_with_logits;
use crate::models::checkpoint::{load_params, load_spec};
use crate::models::{SegNet, SegNetSpec};
use crate::nn::{Adam, AdamState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volcore::{extract_slice, Axis, Section, VolumePair};

/// Parameter section name of the segmentation network in checkpoints.
pub const SEG_SECTION: &str = "segnet";

/// An EM section and its binary membrane mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample<T> {
    pub image: Section<T>,
    pub mask: Section<T>,
}

/// Every EM/label section pair of `pairs` along `axes`.
pub fn seg_dataset_from_pairs<T: Scalar>(pairs: &[VolumePair<T>], axes: &[Axis]) -> Result<Vec<SegSample<T>>> {
    let mut out = Vec::new();
    for p in pairs {
        let labels = p
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config("segmentation pre-training needs labelled volumes".into()))?;
        for &axis in axes {
            for i in 0..p.shape()[axis.normal()] {
                out.push(SegSample {
                    image: extract_slice(&p.em, axis, i)?,
                    mask: extract_slice(labels, axis, i)?,
                });
            }
        }
    }
    Ok(out)
}

pub struct SegTrainOutcome<T> {
    pub net: SegNet<T>,
    /// Training loss of every iteration.
    pub losses: Vec<f64>,
}

fn check_dataset<T: Scalar>(data: &[SegSample<T>], cfg: &SegTrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyInput("segmentation dataset is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.iterations == 0 {
        return Err(Error::Config("iterations and batch_size must be positive".into()));
    }
    let m = 1usize << cfg.network.depth;
    for (i, s) in data.iter().enumerate() {
        if s.image.shape != s.mask.shape {
            return Err(Error::Shape(format!("sample {i}: image {:?} vs mask {:?}", s.image.shape, s.mask.shape)));
        }
        if s.mask.data.iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Label(format!("sample {i}: mask is not binary")));
        }
        let shape = cfg.patch.unwrap_or(s.image.shape);
        if shape.iter().any(|&n| n % m != 0) {
            return Err(Error::Shape(format!("training shape {shape:?} is not divisible by {m}")));
        }
        if let Some(p) = cfg.patch {
            if p[0] > s.image.shape[0] || p[1] > s.image.shape[1] {
                return Err(Error::Shape(format!("patch {p:?} exceeds sample {i} of shape {:?}", s.image.shape)));
            }
        }
    }
    Ok(())
}

fn crop_section<T: Scalar>(s: &Section<T>, r0: usize, c0: usize, size: [usize; 2]) -> Vec<T> {
    (r0..r0 + size[0])
        .flat_map(|r| s.data[r * s.shape[1] + c0..r * s.shape[1] + c0 + size[1]].iter().copied())
        .collect()
}

/// Train the membrane network with pixel-wise binary cross-entropy.
pub fn pretrain_segnet<T: Scalar>(data: &[SegSample<T>], cfg: &SegTrainConfig) -> Result<SegTrainOutcome<T>> {
    check_dataset(data, cfg)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut net = SegNet::new(cfg.network, &mut init_rng);
    let adam = Adam::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut state = AdamState::new();
    // Whole sections are batched only with sections of the same shape.
    let mut groups: BTreeMap<[usize; 2], Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        groups.entry(s.image.shape).or_default().push(i);
    }
    let mut losses = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let first = rng.gen_range(0..data.len());
        let shape = cfg.patch.unwrap_or(data[first].image.shape);
        let group = &groups[&data[first].image.shape];
        let mut images = Vec::with_capacity(cfg.batch_size * shape[0] * shape[1]);
        let mut masks = Vec::with_capacity(images.capacity());
        for b in 0..cfg.batch_size {
            let idx = match (b, cfg.patch) {
                (0, _) => first,
                (_, Some(_)) => rng.gen_range(0..data.len()),
                (_, None) => group[rng.gen_range(0..group.len())],
            };
            let s = &data[idx];
            let r0 = rng.gen_range(0..=s.image.shape[0] - shape[0]);
            let c0 = rng.gen_range(0..=s.image.shape[1] - shape[1]);
            images.extend(crop_section(&s.image, r0, c0, shape));
            masks.extend(crop_section(&s.mask, r0, c0, shape));
        }
        let x = Tensor::from_vec([cfg.batch_size, 1, 1, shape[0], shape[1]], images)?;
        let logits = net.forward_logits(&x)?;
        let (loss, grad) = bce_mask_loss(&logits, &masks)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("segmentation loss {loss} at iteration {}", losses.len() + 1)));
        }
        net.backward_logits(&grad, false);
        state.step(&adam, &mut net, cfg.lr);
        losses.push(loss);
    }
    Ok(SegTrainOutcome { net, losses })
}

/// Pixel-wise cross-entropy of `sigmoid(logits)` against binary `masks`.
fn bce_mask_loss<T: Scalar>(logits: &Tensor<T>, masks: &[T]) -> Result<(f64, Tensor<T>)> {
    // Positive and negative pixels are the two constant-label cases; the
    // per-pixel terms are recombined with the overall pixel count.
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for (i, (&z, &y)) in logits.data().iter().zip(masks).enumerate() {
        let one = Tensor::full([1, 1, 1, 1, 1], z);
        let (l, g) = bce_with_logits(&one, y == T::one())?;
        loss += l.as_f64();
        grad.data_mut()[i] = g.data()[0] / T::of(n);
    }
    Ok((loss / n, grad))
}

/// Load a segmentation checkpoint, or the one inside a training output
/// directory.
pub fn load_segnet<T: Scalar>(dir: &Path) -> Result<SegNet<T>> {
    let dir = &resolve_checkpoint(dir)?;
    let spec: SegNetSpec = load_spec(dir)?;
    let mut net = SegNet::new(spec, &mut ChaCha8Rng::seed_from_u64(0));
    load_params(dir, &mut [(SEG_SECTION, &mut net)])?;
    Ok(net)
}
