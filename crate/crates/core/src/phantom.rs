//! Synthetic aligned (EM, X-ray, membrane label) volumes built from Voronoi
//! cells, so every experiment can run without acquired data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volcore::{Dtype, Modality, Volume, VolumePair};

/// Name of the generator behind every random draw, recorded in manifests.
pub const RNG_NAME: &str = "ChaCha8";

const MIN_HALFWIDTH: f64 = 0.5;
const MEMBRANE_LEVEL: f64 = 0.15;
const INTERIOR_LEVEL: f64 = 0.7;
const CELL_JITTER: f64 = 0.12;
const FRACTION_BOUNDS: (f64, f64) = (0.02, 0.6);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    /// `[Z, Y, X]`
    pub size: [usize; 3],
    pub n_cells: usize,
    pub membrane_halfwidth_vx: f64,
    pub em_noise_sigma: f64,
    /// `[Z, Y, X]`
    pub xray_blur_sigma_vx: [f64; 3],
    pub xray_downsample: usize,
    pub xray_noise_sigma: f64,
    pub intensity_jitter: f64,
    pub seed: u64,
    /// Physical voxel size; distances to membranes are measured in units of
    /// the smallest entry.
    pub voxel_size_nm: [f64; 3],
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: [64, 96, 96],
            n_cells: 40,
            membrane_halfwidth_vx: 1.0,
            em_noise_sigma: 0.04,
            xray_blur_sigma_vx: [2.0, 1.0, 1.0],
            xray_downsample: 2,
            xray_noise_sigma: 0.02,
            intensity_jitter: 0.1,
            seed: 0,
            voxel_size_nm: [8.0, 8.0, 8.0],
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.size.iter().any(|&s| s == 0) {
            return bad(format!("phantom size {:?} has a zero extent", self.size));
        }
        if self.n_cells < 2 {
            return bad(format!("n_cells must be at least 2, got {}", self.n_cells));
        }
        if self.xray_downsample == 0 {
            return bad("xray_downsample must be at least 1".into());
        }
        let sigmas = [self.em_noise_sigma, self.xray_noise_sigma, self.intensity_jitter]
            .into_iter()
            .chain(self.xray_blur_sigma_vx);
        if sigmas.into_iter().any(|s| !s.is_finite() || s < 0.0) {
            return bad("noise, blur and jitter parameters must be finite and non-negative".into());
        }
        if !(self.membrane_halfwidth_vx.is_finite() && self.membrane_halfwidth_vx > 0.0) {
            return bad("membrane_halfwidth_vx must be positive".into());
        }
        if self.voxel_size_nm.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return bad(format!("voxel size {:?} must be positive", self.voxel_size_nm));
        }
        Ok(())
    }

    fn volume<T: Scalar>(&self, data: Vec<f64>, modality: Modality) -> Result<Volume<T>> {
        Volume::unit(self.size, data.into_iter().map(T::of).collect(), self.voxel_size_nm, modality)
    }
}

/// Render a phantom triple. A pure function of `cfg`.
pub fn generate_phantom<T: Scalar>(cfg: &PhantomConfig) -> Result<VolumePair<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [d, h, w] = cfg.size;
    let seeds: Vec<[f64; 3]> = (0..cfg.n_cells)
        .map(|_| {
            [
                rng.gen::<f64>() * d as f64,
                rng.gen::<f64>() * h as f64,
                rng.gen::<f64>() * w as f64,
            ]
        })
        .collect();
    let interiors: Vec<f64> = (0..cfg.n_cells)
        .map(|_| INTERIOR_LEVEL + CELL_JITTER * rng.gen_range(-1.0..=1.0))
        .collect();
    let unit = cfg.voxel_size_nm.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = cfg.voxel_size_nm.map(|v| v / unit);
    let halfwidth = cfg.membrane_halfwidth_vx.max(MIN_HALFWIDTH);

    let n = d * h * w;
    let mut labels = vec![0.0; n];
    let mut em = vec![0.0; n];
    let mut members = 0usize;
    let noise = Normal::new(0.0, cfg.em_noise_sigma).expect("validated sigma");
    let phys: Vec<[f64; 3]> = seeds.iter().map(|s| [s[0] * scale[0], s[1] * scale[1], s[2] * scale[2]]).collect();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [
                    (z as f64 + 0.5) * scale[0],
                    (y as f64 + 0.5) * scale[1],
                    (x as f64 + 0.5) * scale[2],
                ];
                let (cell, dist) = membrane_distance(&p, &phys);
                let i = (z * h + y) * w + x;
                if dist <= halfwidth {
                    labels[i] = 1.0;
                    members += 1;
                }
                let m = (-0.5 * (dist / halfwidth).powi(2)).exp();
                let clean = interiors[cell] * (1.0 - m) + MEMBRANE_LEVEL * m;
                em[i] = (clean + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    let fraction = members as f64 / n as f64;
    if fraction < FRACTION_BOUNDS.0 || fraction > FRACTION_BOUNDS.1 {
        return Err(Error::DegeneratePhantom { fraction });
    }
    let em: Volume<T> = cfg.volume(em, Modality::Em)?;
    let xray = degrade_to_xray(&em, cfg)?;
    let labels = Volume::new(
        cfg.size,
        labels.into_iter().map(T::of).collect(),
        cfg.voxel_size_nm,
        Modality::Label,
        (0.0, 1.0),
        Dtype::U8,
    )?;
    VolumePair::new(xray, em, Some(labels))
}

/// Nearest seed and the distance from `p` to the closest bisector plane
/// between that seed and any other.
fn membrane_distance(p: &[f64; 3], seeds: &[[f64; 3]]) -> (usize, f64) {
    let d2 = |s: &[f64; 3]| (0..3).map(|a| (p[a] - s[a]).powi(2)).sum::<f64>();
    let (near, near_d2) = seeds
        .iter()
        .enumerate()
        .map(|(i, s)| (i, d2(s)))
        .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
    let a = &seeds[near];
    let mut best = f64::INFINITY;
    for (j, b) in seeds.iter().enumerate() {
        if j == near {
            continue;
        }
        let ab = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
        if ab == 0.0 {
            continue;
        }
        best = best.min((d2(b) - near_d2) / (2.0 * ab));
    }
    (near, best)
}

/// Simulate the X-ray modality: anisotropic blur, resolution loss, noise and
/// a global intensity remap.
pub fn degrade_to_xray<T: Scalar>(em: &Volume<T>, cfg: &PhantomConfig) -> Result<Volume<T>> {
    let shape = em.shape();
    let mut v: Vec<f64> = em.data().iter().map(|x| x.as_f64()).collect();
    for axis in 0..3 {
        blur_axis(&mut v, shape, axis, cfg.xray_blur_sigma_vx[axis]);
    }
    if cfg.xray_downsample > 1 {
        v = block_resample(&v, shape, cfg.xray_downsample);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    if cfg.xray_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.xray_noise_sigma).expect("validated sigma");
        v.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
    }
    if cfg.intensity_jitter > 0.0 {
        let gain = 1.0 + cfg.intensity_jitter * rng.gen_range(-1.0..=1.0);
        let offset = cfg.intensity_jitter * rng.gen_range(-1.0..=1.0);
        v.iter_mut().for_each(|x| *x = gain * *x + offset);
    }
    let data = v.into_iter().map(|x| T::of(x.clamp(0.0, 1.0))).collect();
    Volume::unit(shape, data, em.voxel_size_nm, Modality::Xray)
}

/// Normalized discrete Gaussian with radius `ceil(4 sigma)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|x| x / total).collect()
}

/// Mirror an out-of-range index back into `[0, n)` without repeating the edge.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn blur_axis(v: &mut [f64], shape: [usize; 3], axis: usize, sigma: f64) {
    if sigma == 0.0 {
        return;
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let n = shape[axis];
    let stride = shape[axis + 1..].iter().product::<usize>();
    let outer = shape[..axis].iter().product::<usize>();
    let mut line = vec![0.0; n];
    for o in 0..outer {
        for inner in 0..stride {
            let base = o * n * stride + inner;
            for (i, l) in line.iter_mut().enumerate() {
                *l = v[base + i * stride];
            }
            for i in 0..n {
                v[base + i * stride] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wk)| wk * line[reflect(i as isize + k as isize - r, n)])
                    .sum();
            }
        }
    }
}

/// Block-average by `f` (partial blocks at the far edges), then replicate
/// each block mean back over its voxels.
fn block_resample(v: &[f64], shape: [usize; 3], f: usize) -> Vec<f64> {
    let [d, h, w] = shape;
    let blocks = shape.map(|s| s.div_ceil(f));
    let mut sum = vec![0.0; blocks.iter().product()];
    let mut count = vec![0usize; sum.len()];
    let block_of = |z: usize, y: usize, x: usize| ((z / f) * blocks[1] + y / f) * blocks[2] + x / f;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let b = block_of(z, y, x);
                sum[b] += v[(z * h + y) * w + x];
                count[b] += 1;
            }
        }
    }
    let mut out = vec![0.0; v.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let b = block_of(z, y, x);
                out[(z * h + y) * w + x] = sum[b] / count[b] as f64;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsuite::{psnr, ssim_volume_mean};
    use crate::volcore::Axis;

    fn small(seed: u64) -> PhantomConfig {
        PhantomConfig {
            size: [16, 32, 32],
            n_cells: 8,
            seed,
            ..PhantomConfig::default()
        }
    }

    fn clean(cfg: &PhantomConfig) -> PhantomConfig {
        PhantomConfig {
            xray_blur_sigma_vx: [0.0; 3],
            xray_downsample: 1,
            xray_noise_sigma: 0.0,
            intensity_jitter: 0.0,
            ..cfg.clone()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_phantom::<f32>(&small(5)).unwrap();
        let b = generate_phantom::<f32>(&small(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom::<f32>(&small(6)).unwrap();
        assert_ne!(a.em.data(), c.em.data());
    }

    #[test]
    fn ranges_and_binary_labels() {
        let p = generate_phantom::<f64>(&small(1)).unwrap();
        let labels = p.labels.as_ref().unwrap();
        assert!(labels.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for v in [&p.em, &p.xray] {
            assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small(0);
        cfg.n_cells = 1;
        assert!(matches!(generate_phantom::<f32>(&cfg), Err(Error::Config(_))));
        let mut cfg = small(0);
        cfg.xray_blur_sigma_vx[1] = f64::NAN;
        assert!(generate_phantom::<f32>(&cfg).is_err());
        let mut cfg = small(0);
        cfg.xray_downsample = 0;
        assert!(generate_phantom::<f32>(&cfg).is_err());
    }

    #[test]
    fn degenerate_fraction_rejected() {
        let cfg = PhantomConfig {
            membrane_halfwidth_vx: 30.0,
            ..small(0)
        };
        assert!(matches!(generate_phantom::<f32>(&cfg), Err(Error::DegeneratePhantom { .. })));
    }

    #[test]
    fn identity_degradation() {
        let p = generate_phantom::<f64>(&small(2)).unwrap();
        let x = degrade_to_xray(&p.em, &clean(&small(2))).unwrap();
        assert_eq!(x.data(), p.em.data());
        assert_eq!(x.modality, Modality::Xray);
    }

    /// Label components under 26-connectivity and background components
    /// under 6-connectivity.
    fn components(mask: &[bool], shape: [usize; 3], full: bool) -> usize {
        let [d, h, w] = shape;
        let mut seen = vec![false; mask.len()];
        let mut count = 0;
        for start in 0..mask.len() {
            if !mask[start] || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            let mut stack = vec![start];
            while let Some(i) = stack.pop() {
                let (z, y, x) = ((i / (h * w)) as isize, ((i / w) % h) as isize, (i % w) as isize);
                for dz in -1..=1isize {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let manhattan = dz.abs() + dy.abs() + dx.abs();
                            if manhattan == 0 || (!full && manhattan > 1) {
                                continue;
                            }
                            let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                            if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                                continue;
                            }
                            let j = (nz as usize * h + ny as usize) * w + nx as usize;
                            if mask[j] && !seen[j] {
                                seen[j] = true;
                                stack.push(j);
                            }
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn two_cells_give_one_separating_surface() {
        let mut checked = 0;
        for seed in 0..10 {
            let cfg = PhantomConfig {
                size: [8, 16, 16],
                n_cells: 2,
                membrane_halfwidth_vx: 0.0001,
                seed,
                ..PhantomConfig::default()
            };
            let Ok(p) = generate_phantom::<f32>(&cfg) else { continue };
            let labels: Vec<bool> = p.labels.unwrap().data().iter().map(|&v| v == 1.0).collect();
            let background: Vec<bool> = labels.iter().map(|&l| !l).collect();
            assert_eq!(components(&labels, cfg.size, true), 1, "seed {seed}");
            assert_eq!(components(&background, cfg.size, false), 2, "seed {seed}");
            checked += 1;
        }
        assert!(checked >= 5);
    }

    #[test]
    fn desk_label_fraction() {
        for seed in 0..10 {
            let p = generate_phantom::<f32>(&PhantomConfig {
                seed,
                ..PhantomConfig::default()
            })
            .unwrap();
            let labels = p.labels.unwrap();
            let frac = labels.data().iter().map(|&v| v as f64).sum::<f64>() / labels.len() as f64;
            assert!((0.05..=0.35).contains(&frac), "seed {seed}: {frac}");
        }
    }

    /// The impulse sits far enough from the faces that reflected padding
    /// never folds mass back; the peak is checked against a kernel built
    /// independently.
    #[test]
    fn impulse_blur_preserves_mass() {
        let shape = [25, 17, 17];
        let mut data = vec![0.0; 25 * 17 * 17];
        data[(12 * 17 + 8) * 17 + 8] = 1.0;
        let em = Volume::<f64>::unit(shape, data, [1.0; 3], Modality::Em).unwrap();
        let cfg = PhantomConfig {
            xray_blur_sigma_vx: [2.0, 1.0, 1.0],
            ..clean(&PhantomConfig::default())
        };
        let out = degrade_to_xray(&em, &cfg).unwrap();
        let mass: f64 = out.data().iter().sum();
        assert!((mass - 1.0).abs() < 1e-4, "{mass}");
        let peak = out.data().iter().copied().fold(0.0, f64::max);
        assert!(peak < 1.0);
        let g = |s: f64, i: i32| (-(i * i) as f64 / (2.0 * s * s)).exp();
        let norm = |s: f64, r: i32| (-r..=r).map(|i| g(s, i)).sum::<f64>();
        let expected_peak = 1.0 / (norm(2.0, 8) * norm(1.0, 4) * norm(1.0, 4));
        assert!((peak - expected_peak).abs() < 1e-12);
        assert_eq!(out.get(12, 8, 8), peak);
    }

    fn high_frequency_energy(v: &[f64], shape: [usize; 3]) -> f64 {
        use rustfft::{num_complex::Complex, FftPlanner};
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&x| Complex::new(x, 0.0)).collect();
        let mut planner = FftPlanner::new();
        for axis in 0..3 {
            let n = shape[axis];
            let fft = planner.plan_fft_forward(n);
            let stride = shape[axis + 1..].iter().product::<usize>();
            let outer = shape[..axis].iter().product::<usize>();
            let mut line = vec![Complex::new(0.0, 0.0); n];
            for o in 0..outer {
                for inner in 0..stride {
                    let base = o * n * stride + inner;
                    for i in 0..n {
                        line[i] = buf[base + i * stride];
                    }
                    fft.process(&mut line);
                    for i in 0..n {
                        buf[base + i * stride] = line[i];
                    }
                }
            }
        }
        // Frequencies with any component above half the Nyquist rate.
        let freq = |i: usize, n: usize| (i.min(n - i) as f64) / n as f64;
        let [d, h, w] = shape;
        let mut energy = 0.0;
        let mut count = 0usize;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let f = freq(z, d).max(freq(y, h)).max(freq(x, w));
                    if f > 0.25 {
                        energy += buf[(z * h + y) * w + x].norm_sqr();
                        count += 1;
                    }
                }
            }
        }
        energy / count as f64
    }

    #[test]
    fn xray_loses_high_frequencies() {
        for seed in 0..5 {
            let p = generate_phantom::<f64>(&small(seed)).unwrap();
            let shape = p.shape();
            let before = high_frequency_energy(p.em.data(), shape);
            let after = high_frequency_energy(p.xray.data(), shape);
            assert!(after < before, "seed {seed}: {after} vs {before}");
        }
    }

    #[test]
    fn xray_psnr_is_finite_and_low() {
        for seed in 0..10 {
            let p = generate_phantom::<f64>(&PhantomConfig {
                seed,
                ..PhantomConfig::default()
            })
            .unwrap();
            let v = psnr(&p.xray.to_tensor(), &p.em.to_tensor(), 1.0).unwrap();
            assert!(v.is_finite() && v < 30.0, "seed {seed}: {v}");
        }
    }

    #[test]
    fn xray_ssim_lowest_across_z() {
        for seed in 0..3 {
            let p = generate_phantom::<f64>(&PhantomConfig {
                seed,
                ..PhantomConfig::default()
            })
            .unwrap();
            let s = |axis| ssim_volume_mean(&p.xray, &p.em, axis, 1.0).unwrap();
            let xy = s(Axis::XY);
            assert!(s(Axis::XZ) < xy && s(Axis::YZ) < xy, "seed {seed}");
        }
    }
}
