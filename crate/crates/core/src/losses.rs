//! Training objectives: adversarial, Gaussian negative log-likelihood, L1,
//! segmentation consistency, and their weighted combination.
//!
//! Every loss is a mean over elements. The `*_with_grad` variants return
//! the analytic gradient alongside the value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{sigmoid, ReconLoss, VariantSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `ln(2 pi)`
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_gan: f64,
    pub w_nll: f64,
    pub w_seg: f64,
    /// Weight of the reconstruction term when the variant trains with L1.
    pub w_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_gan: 1.0,
            w_nll: 0.00002,
            w_seg: 1.0,
            w_l1: 0.00002,
        }
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// `ln(1 + e^x)` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn inv_len<T: Scalar>(t: &Tensor<T>) -> T {
    T::one() / T::of(t.len() as f64)
}

/// Discriminator and non-saturating generator losses from patch logits:
/// `loss_d = -mean log D(real) - mean log(1 - D(fake))`,
/// `loss_g = -mean log D(fake)`, with `D = sigmoid`.
pub fn adversarial_losses<T: Scalar>(real_logits: &Tensor<T>, fake_logits: &Tensor<T>) -> Result<(T, T)> {
    same_shape(real_logits, fake_logits, "real and fake score maps differ")?;
    let d = discriminator_loss_with_grad(real_logits, fake_logits)?;
    let g = generator_adversarial_loss_with_grad(fake_logits)?;
    Ok((d.0, g.0))
}

/// `loss_d` with gradients w.r.t. the real and fake logits.
pub fn discriminator_loss_with_grad<T: Scalar>(
    real_logits: &Tensor<T>,
    fake_logits: &Tensor<T>,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let (loss_real, g_real) = bce_with_logits(real_logits, true)?;
    let (loss_fake, g_fake) = bce_with_logits(fake_logits, false)?;
    Ok((loss_real + loss_fake, g_real, g_fake))
}

/// Non-saturating `loss_g` with its gradient w.r.t. the fake logits.
pub fn generator_adversarial_loss_with_grad<T: Scalar>(fake_logits: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    bce_with_logits(fake_logits, true)
}

/// Mean binary cross-entropy of `sigmoid(logits)` against a constant label,
/// with its gradient w.r.t. the logits.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, label: bool) -> Result<(T, Tensor<T>)> {
    check_finite(logits, "scores")?;
    let n = inv_len(logits);
    let (loss, grad) = if label {
        let l = logits.data().iter().map(|&z| softplus(-z)).sum::<T>();
        (l, logits.map(|z| (sigmoid(z) - T::one()) * n))
    } else {
        let l = logits.data().iter().map(|&z| softplus(z)).sum::<T>();
        (l, logits.map(|z| sigmoid(z) * n))
    };
    Ok((loss * n, grad))
}

/// Gaussian negative log-likelihood with `s = log sigma^2`:
/// `mean[ exp(-s) (y - mu)^2 / 2 + s / 2 + ln(2 pi) / 2 ]`.
pub fn nll_loss<T: Scalar>(mean: &Tensor<T>, log_variance: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    Ok(nll_loss_with_grad(mean, log_variance, target)?.0)
}

/// [`nll_loss`] with gradients w.r.t. the mean and the log-variance.
pub fn nll_loss_with_grad<T: Scalar>(
    mean: &Tensor<T>,
    log_variance: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    same_shape(mean, target, "mean and target differ")?;
    same_shape(log_variance, target, "log-variance and target differ")?;
    check_finite(mean, "mean")?;
    check_finite(log_variance, "log-variance")?;
    check_finite(target, "target")?;
    let n = inv_len(target);
    let half = T::of(0.5);
    let c = T::of(0.5 * LN_2PI);
    let mut loss = T::zero();
    let mut g_mean = Tensor::zeros(mean.shape());
    let mut g_s = Tensor::zeros(mean.shape());
    let it = mean.data().iter().zip(log_variance.data()).zip(target.data());
    for (i, ((&mu, &s), &y)) in it.enumerate() {
        let prec = (-s).exp();
        let r = y - mu;
        let scaled = prec * r * r;
        loss += half * scaled + half * s + c;
        g_mean.data_mut()[i] = -prec * r * n;
        g_s.data_mut()[i] = half * (T::one() - scaled) * n;
    }
    Ok((loss * n, g_mean, g_s))
}

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(mean: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    Ok(l1_loss_with_grad(mean, target)?.0)
}

pub fn l1_loss_with_grad<T: Scalar>(mean: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    same_shape(mean, target, "prediction and target differ")?;
    let n = inv_len(target);
    let mut grad = Tensor::zeros(mean.shape());
    let mut loss = T::zero();
    for (i, (&m, &y)) in mean.data().iter().zip(target.data()).enumerate() {
        let d = m - y;
        loss += d.abs();
        grad.data_mut()[i] = if d > T::zero() {
            n
        } else if d < T::zero() {
            -n
        } else {
            T::zero()
        };
    }
    Ok((loss * n, grad))
}

/// Mean over slices of the per-slice mean squared difference between the
/// membrane maps of the reconstruction and of the ground truth.
pub fn seg_consistency_loss<T: Scalar>(probs_fake: &[Tensor<T>], probs_real: &[Tensor<T>]) -> Result<T> {
    Ok(seg_consistency_loss_with_grad(probs_fake, probs_real)?.0)
}

/// [`seg_consistency_loss`] with the gradient w.r.t. each fake map.
pub fn seg_consistency_loss_with_grad<T: Scalar>(
    probs_fake: &[Tensor<T>],
    probs_real: &[Tensor<T>],
) -> Result<(T, Vec<Tensor<T>>)> {
    if probs_fake.is_empty() {
        return Err(Error::EmptyInput("segmentation consistency needs at least one slice".into()));
    }
    if probs_fake.len() != probs_real.len() {
        return Err(Error::Shape(format!(
            "{} fake maps vs {} real maps",
            probs_fake.len(),
            probs_real.len()
        )));
    }
    let k = T::one() / T::of(probs_fake.len() as f64);
    let two = T::of(2.0);
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(probs_fake.len());
    for (f, r) in probs_fake.iter().zip(probs_real) {
        same_shape(f, r, "segmentation maps differ")?;
        let n = inv_len(f);
        let mut g = Tensor::zeros(f.shape());
        let mut sq = T::zero();
        for (i, (&a, &b)) in f.data().iter().zip(r.data()).enumerate() {
            let d = a - b;
            sq += d * d;
            g.data_mut()[i] = two * d * n * k;
        }
        total += sq * n;
        grads.push(g);
    }
    Ok((total * k, grads))
}

/// `w_gan * adv + w_recon * recon + w_seg * seg`, where `w_recon` is the
/// NLL or L1 weight according to the variant.
pub fn total_generator_loss<T: Scalar>(
    loss_g_adv: T,
    loss_recon: T,
    loss_seg: Option<T>,
    weights: &LossWeights,
    variant: &VariantSpec,
) -> Result<T> {
    if loss_seg.is_some() && !variant.use_seg_loss {
        return Err(Error::Config(format!(
            "segmentation loss supplied for variant {} which does not use it",
            variant.name
        )));
    }
    let w_recon = match variant.recon_loss {
        ReconLoss::Nll => weights.w_nll,
        ReconLoss::L1 => weights.w_l1,
    };
    let seg = loss_seg.unwrap_or_else(T::zero);
    Ok(T::of(weights.w_gan) * loss_g_adv + T::of(w_recon) * loss_recon + T::of(weights.w_seg) * seg)
}
