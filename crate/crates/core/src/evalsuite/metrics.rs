use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volcore::{extract_slice, Axis, Section, Volume};

/// Peak signal-to-noise ratio in dB; `+inf` when the inputs are identical.
pub fn psnr<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, data_range: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("psnr: {:?} vs {:?}", pred.shape(), target.shape())));
    }
    psnr_slices(pred.data(), target.data(), data_range)
}

pub(crate) fn psnr_slices<T: Scalar>(pred: &[T], target: &[T], data_range: f64) -> Result<f64> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::Range(format!("data range {data_range}")));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("psnr of empty input".into()));
    }
    let sse: f64 = pred
        .iter()
        .zip(target)
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    let mse = sse / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    /// Side of the square uniform window.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Summed-area table with a zero first row and column.
fn integral(rows: usize, cols: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let stride = cols + 1;
    let mut s = vec![0.0; (rows + 1) * stride];
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += f(r * cols + c);
            s[(r + 1) * stride + c + 1] = s[r * stride + c + 1] + acc;
        }
    }
    s
}

/// Mean structural similarity over every fully contained window, with
/// sample (N - 1) statistics inside each window.
pub fn ssim<T: Scalar>(pred: &Section<T>, target: &Section<T>, params: &SsimParams, data_range: f64) -> Result<f64> {
    if pred.shape != target.shape {
        return Err(Error::Shape(format!("ssim: {:?} vs {:?}", pred.shape, target.shape)));
    }
    let [rows, cols] = pred.shape;
    let win = params.window;
    if win < 2 || rows < win || cols < win {
        return Err(Error::Shape(format!("section {:?} is smaller than the {win}x{win} ssim window", pred.shape)));
    }
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::Range(format!("data range {data_range}")));
    }
    let a: Vec<f64> = pred.data.iter().map(|v| v.as_f64()).collect();
    let b: Vec<f64> = target.data.iter().map(|v| v.as_f64()).collect();
    let sa = integral(rows, cols, |i| a[i]);
    let sb = integral(rows, cols, |i| b[i]);
    let saa = integral(rows, cols, |i| a[i] * a[i]);
    let sbb = integral(rows, cols, |i| b[i] * b[i]);
    let sab = integral(rows, cols, |i| a[i] * b[i]);
    let c1 = (params.k1 * data_range).powi(2);
    let c2 = (params.k2 * data_range).powi(2);
    let n = (win * win) as f64;
    let unbias = n / (n - 1.0);
    let stride = cols + 1;
    let sum = |s: &[f64], r: usize, c: usize| {
        s[(r + win) * stride + c + win] - s[r * stride + c + win] - s[(r + win) * stride + c] + s[r * stride + c]
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=rows - win {
        for c in 0..=cols - win {
            let ma = sum(&sa, r, c) / n;
            let mb = sum(&sb, r, c) / n;
            let va = unbias * (sum(&saa, r, c) / n - ma * ma);
            let vb = unbias * (sum(&sbb, r, c) / n - mb * mb);
            let cov = unbias * (sum(&sab, r, c) / n - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean [`ssim`] over every section of `pred` along `axis`.
pub fn ssim_volume_mean<T: Scalar>(pred: &Volume<T>, target: &Volume<T>, axis: Axis, data_range: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("ssim: {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let n = pred.shape()[axis.normal()];
    let params = SsimParams::default();
    let mut total = 0.0;
    for i in 0..n {
        total += ssim(&extract_slice(pred, axis, i)?, &extract_slice(target, axis, i)?, &params, data_range)?;
    }
    Ok(total / n as f64)
}

fn is_binary<T: Scalar>(v: &[T]) -> bool {
    v.iter().all(|&x| x == T::zero() || x == T::one())
}

/// Jaccard and Dice scores of two binary masks; both are 1 when the masks
/// are empty.
pub fn overlap_scores<T: Scalar>(pred: &[T], gt: &[T]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("masks of {} and {} elements", pred.len(), gt.len())));
    }
    if !is_binary(pred) || !is_binary(gt) {
        return Err(Error::Label("overlap scores need binary masks".into()));
    }
    let one = T::one();
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p == one, g == one);
        inter += usize::from(p && g);
        np += usize::from(p);
        ng += usize::from(g);
    }
    Ok(overlap_from_counts(inter, np, ng))
}

pub(crate) fn overlap_from_counts(inter: usize, np: usize, ng: usize) -> (f64, f64) {
    let union = np + ng - inter;
    if union == 0 {
        return (1.0, 1.0);
    }
    (inter as f64 / union as f64, 2.0 * inter as f64 / (np + ng) as f64)
}
