//! 3-D convolution via im2col and GEMM. 2-D convolution is the special
//! case of a depth-1 kernel with unit depth stride and zero depth padding.

use rand::Rng;

use super::{Module, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Target size of the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 18;

#[derive(Clone, Debug)]
pub struct Conv<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    /// `[out, in, kd, kh, kw]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv<T> {
    /// He-normal initialized convolution.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::normal(out_channels * fan_in, std, rng),
            bias: Param::zeros(out_channels),
            input: None,
        }
    }

    /// Scale the initial weights by `gain`.
    pub fn with_gain(mut self, gain: f64) -> Self {
        let g = T::of(gain);
        self.weight.value.iter_mut().for_each(|w| *w *= g);
        self
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    pub fn output_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::Shape(format!(
                    "spatial extent {} on axis {a} is smaller than kernel {}",
                    input[a], self.kernel[a]
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.apply(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    /// Output rows (fixed `z`, `y`) per im2col chunk, bounding the scratch
    /// buffer to roughly `COL_BUDGET` elements.
    fn rows_per_chunk(&self, outs: [usize; 3]) -> usize {
        let row = self.patch_len() * outs[2];
        (COL_BUDGET / row.max(1)).clamp(1, outs[0] * outs[1])
    }

    /// Forward pass without caching the input.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let ins = x.spatial();
        let outs = self.output_spatial(ins)?;
        let p: usize = outs.iter().product();
        let k = self.patch_len();
        let mut y = Tensor::zeros([x.batch(), self.out_channels, outs[0], outs[1], outs[2]]);
        let pointwise = self.is_pointwise();
        let chunk = if pointwise { outs[0] * outs[1] } else { self.rows_per_chunk(outs) };
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * chunk * outs[2]] };
        for n in 0..x.batch() {
            let out = y.sample_mut(n);
            for (o, plane) in out.chunks_exact_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v = self.bias.value[o]);
            }
            for r0 in (0..outs[0] * outs[1]).step_by(chunk) {
                let r1 = (r0 + chunk).min(outs[0] * outs[1]);
                let (c0, pc) = (r0 * outs[2], (r1 - r0) * outs[2]);
                let (src, rs): (&[T], usize) = if pointwise {
                    (&x.sample(n)[c0..], p)
                } else {
                    im2col(x.sample(n), self.in_channels, ins, outs, self.kernel, self.stride, self.padding, (r0, r1), &mut col);
                    (&col, pc)
                };
                T::gemm(
                    self.out_channels,
                    k,
                    pc,
                    T::one(),
                    &self.weight.value,
                    k as isize,
                    1,
                    src,
                    rs as isize,
                    1,
                    T::one(),
                    &mut out[c0..],
                    p as isize,
                    1,
                );
            }
        }
        Ok(y)
    }

    /// Accumulate parameter gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, grad: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let x = self.input.take().expect("Conv::backward called without forward");
        let ins = x.spatial();
        let outs = grad.spatial();
        let p: usize = outs.iter().product();
        let k = self.patch_len();
        let pointwise = self.is_pointwise();
        let chunk = if pointwise { outs[0] * outs[1] } else { self.rows_per_chunk(outs) };
        let buf = if pointwise { 0 } else { k * chunk * outs[2] };
        let mut col = vec![T::zero(); buf];
        let mut dcol = vec![T::zero(); if need_input_grad { buf } else { 0 }];
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        for n in 0..x.batch() {
            let g = grad.sample(n);
            for (o, plane) in g.chunks_exact(p).enumerate() {
                self.bias.grad[o] += plane.iter().copied().sum::<T>();
            }
            for r0 in (0..outs[0] * outs[1]).step_by(chunk) {
                let r1 = (r0 + chunk).min(outs[0] * outs[1]);
                let (c0, pc) = (r0 * outs[2], (r1 - r0) * outs[2]);
                let (src, rs): (&[T], usize) = if pointwise {
                    (&x.sample(n)[c0..], p)
                } else {
                    im2col(x.sample(n), self.in_channels, ins, outs, self.kernel, self.stride, self.padding, (r0, r1), &mut col);
                    (&col, pc)
                };
                // dW[o, j] += sum_p g[o, p] * col[j, p]
                T::gemm(
                    self.out_channels,
                    pc,
                    k,
                    T::one(),
                    &g[c0..],
                    p as isize,
                    1,
                    src,
                    1,
                    rs as isize,
                    T::one(),
                    &mut self.weight.grad,
                    k as isize,
                    1,
                );
                let Some(dx) = dx.as_mut() else { continue };
                let (target, rt): (&mut [T], usize) = if pointwise {
                    (&mut dx.sample_mut(n)[c0..], p)
                } else {
                    (&mut dcol, pc)
                };
                // dcol[j, p] = sum_o W[o, j] * g[o, p]
                T::gemm(
                    k,
                    self.out_channels,
                    pc,
                    T::one(),
                    &self.weight.value,
                    1,
                    k as isize,
                    &g[c0..],
                    p as isize,
                    1,
                    T::zero(),
                    target,
                    rt as isize,
                    1,
                );
                if !pointwise {
                    col2im(&dcol, self.in_channels, ins, outs, self.kernel, self.stride, self.padding, (r0, r1), dx.sample_mut(n));
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Conv<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// For output index `o` and kernel tap `k`, the input coordinate is
/// `o * s + k - pad`. Returns the half-open range of `o` that lands inside
/// `[0, n)`.
#[inline]
fn valid_range(n: usize, out: usize, k: usize, s: usize, pad: usize) -> (usize, usize) {
    // o * s + k >= pad  <=>  o >= ceil((pad - k) / s)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(s) };
    // o * s + k - pad < n  <=>  o * s < n + pad - k
    let hi = if n + pad <= k { 0 } else { (n + pad - k).div_ceil(s) };
    (lo.min(out), hi.min(out))
}

/// Unfold output rows `rows.0..rows.1` (row index `z * oh + y`) of every
/// kernel tap into `col`, laid out `[patch, position]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    channels: usize,
    ins: [usize; 3],
    outs: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    rows: (usize, usize),
    col: &mut [T],
) {
    let [id, ih, iw] = ins;
    let [_, oh, ow] = outs;
    let pc = (rows.1 - rows.0) * ow;
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kernel[0] {
            let (z0, z1) = valid_range(id, outs[0], kz, stride[0], pad[0]);
            for ky in 0..kernel[1] {
                let (y0, y1) = valid_range(ih, oh, ky, stride[1], pad[1]);
                for kx in 0..kernel[2] {
                    let (x0, x1) = valid_range(iw, ow, kx, stride[2], pad[2]);
                    let dst = &mut col[row * pc..(row + 1) * pc];
                    for (r, out_row) in (rows.0..rows.1).zip(dst.chunks_exact_mut(ow)) {
                        let (oz, oy) = (r / oh, r % oh);
                        if oz < z0 || oz >= z1 || oy < y0 || oy >= y1 || x0 >= x1 {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let iz = oz * stride[0] + kz - pad[0];
                        let iy = oy * stride[1] + ky - pad[1];
                        let src_row = &xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                        out_row[..x0].iter_mut().for_each(|v| *v = T::zero());
                        out_row[x1..].iter_mut().for_each(|v| *v = T::zero());
                        if stride[2] == 1 {
                            let ix0 = x0 + kx - pad[2];
                            out_row[x0..x1].copy_from_slice(&src_row[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                out_row[ox] = src_row[ox * stride[2] + kx - pad[2]];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `col` back onto the input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    channels: usize,
    ins: [usize; 3],
    outs: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    rows: (usize, usize),
    dx: &mut [T],
) {
    let [id, ih, iw] = ins;
    let [_, oh, ow] = outs;
    let pc = (rows.1 - rows.0) * ow;
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kernel[0] {
            let (z0, z1) = valid_range(id, outs[0], kz, stride[0], pad[0]);
            for ky in 0..kernel[1] {
                let (y0, y1) = valid_range(ih, oh, ky, stride[1], pad[1]);
                for kx in 0..kernel[2] {
                    let (x0, x1) = valid_range(iw, ow, kx, stride[2], pad[2]);
                    let src = &col[row * pc..(row + 1) * pc];
                    for (r, g_row) in (rows.0..rows.1).zip(src.chunks_exact(ow)) {
                        let (oz, oy) = (r / oh, r % oh);
                        if oz < z0 || oz >= z1 || oy < y0 || oy >= y1 {
                            continue;
                        }
                        let iz = oz * stride[0] + kz - pad[0];
                        let iy = oy * stride[1] + ky - pad[1];
                        let dst_row = &mut xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                        for ox in x0..x1 {
                            dst_row[ox * stride[2] + kx - pad[2]] += g_row[ox];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{dot, input_gradient_error, probe_weights};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn reference(conv: &Conv<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let outs = conv.output_spatial(x.spatial()).unwrap();
        let [_, _, id, ih, iw] = x.shape();
        let [kd, kh, kw] = conv.kernel;
        let mut y = Tensor::zeros([x.batch(), conv.out_channels, outs[0], outs[1], outs[2]]);
        for n in 0..x.batch() {
            for o in 0..conv.out_channels {
                for oz in 0..outs[0] {
                    for oy in 0..outs[1] {
                        for ox in 0..outs[2] {
                            let mut acc = conv.bias.value[o];
                            for c in 0..conv.in_channels {
                                for a in 0..kd {
                                    for b in 0..kh {
                                        for e in 0..kw {
                                            let iz = (oz * conv.stride[0] + a) as isize - conv.padding[0] as isize;
                                            let iy = (oy * conv.stride[1] + b) as isize - conv.padding[1] as isize;
                                            let ix = (ox * conv.stride[2] + e) as isize - conv.padding[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= id || iy >= ih || ix >= iw {
                                                continue;
                                            }
                                            let wi = (((o * conv.in_channels + c) * kd + a) * kh + b) * kw + e;
                                            acc += conv.weight.value[wi] * x.plane(n, c)[(iz * ih + iy) * iw + ix];
                                        }
                                    }
                                }
                            }
                            let p = outs[1] * outs[2];
                            y.plane_mut(n, o)[oz * p + oy * outs[2] + ox] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn random_input(shape: [usize; 5], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    const CASES: [([usize; 3], [usize; 3], [usize; 3]); 5] = [
        ([3, 3, 3], [1, 1, 1], [1, 1, 1]),
        ([4, 4, 4], [2, 2, 2], [1, 1, 1]),
        ([1, 3, 3], [1, 2, 2], [0, 1, 1]),
        ([2, 2, 2], [2, 2, 2], [0, 0, 0]),
        ([1, 1, 1], [1, 1, 1], [0, 0, 0]),
    ];

    #[test]
    fn matches_direct_convolution() {
        for (i, &(k, s, p)) in CASES.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let mut conv = Conv::<f64>::new(2, 3, k, s, p, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3];
            let x = random_input([2, 2, 4, 6, 5], 100 + i as u64);
            let y = conv.forward(&x).unwrap();
            let r = reference(&conv, &x);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-12, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (i, &(k, s, p)) in CASES.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(7 + i as u64);
            let mut conv = Conv::<f64>::new(2, 2, k, s, p, &mut rng);
            let x = random_input([1, 2, 4, 4, 5], 200 + i as u64);
            let y = conv.forward(&x).unwrap();
            let w = probe_weights(y.shape());
            let dx = conv.backward(&w, true).unwrap();
            let err = input_gradient_error(&x, &dx, |xi| dot(&conv.apply(xi).unwrap(), &w), 1e-5);
            assert!(err < 1e-6, "case {i}: input grad err {err}");

            // weight gradient, probing a handful of taps
            let analytic = conv.weight.grad.clone();
            for j in (0..analytic.len()).step_by(5) {
                let mut c2 = conv.clone();
                c2.weight.value[j] += 1e-5;
                let fp = dot(&c2.apply(&x).unwrap(), &w);
                c2.weight.value[j] -= 2e-5;
                let fm = dot(&c2.apply(&x).unwrap(), &w);
                let fd = (fp - fm) / 2e-5;
                assert!((fd - analytic[j]).abs() < 1e-6 * fd.abs().max(1.0), "case {i}: dW[{j}]");
            }
            let db: f64 = w.plane(0, 0).iter().sum();
            assert!((conv.bias.grad[0] - db).abs() < 1e-9);
        }
    }

    #[test]
    fn chunked_unfolding_matches_reference_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut conv = Conv::<f64>::new(40, 3, [3, 3, 3], [1, 2, 1], [1, 1, 1], &mut rng);
        let x = random_input([1, 40, 6, 17, 20], 300);
        let outs = conv.output_spatial(x.spatial()).unwrap();
        assert!(conv.rows_per_chunk(outs) < outs[0] * outs[1]);
        let y = conv.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(reference(&conv, &x).data()) {
            assert!((a - b).abs() < 1e-11);
        }
        // With zero bias the layer is bilinear in (W, x).
        let w = probe_weights(y.shape());
        let dx = conv.backward(&w, true).unwrap();
        let yw = dot(&y, &w);
        assert!((dot(&x, &dx) - yw).abs() < 1e-9 * yw.abs().max(1.0));
        let wg: f64 = conv.weight.value.iter().zip(&conv.weight.grad).map(|(a, b)| a * b).sum();
        assert!((wg - yw).abs() < 1e-9 * yw.abs().max(1.0));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv::<f32>::new(2, 1, [3, 3, 3], [1, 1, 1], [1, 1, 1], &mut rng);
        assert!(conv.apply(&Tensor::zeros([1, 3, 2, 2, 2])).is_err());
    }
}
