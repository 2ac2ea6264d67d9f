use crate::error::{Error, Result};
use crate::models::{Generator, ReconOutput};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volcore::Volume;

/// Overlap between neighbouring tiles: 16 voxels, or half the tile when the
/// tile is shorter than 32.
pub fn tile_overlap(tile: usize) -> usize {
    16.min(tile / 2)
}

/// Tile start offsets covering `[0, n)`, the last tile flush with the end.
fn tile_starts(n: usize, tile: usize) -> Vec<usize> {
    if n <= tile {
        return vec![0];
    }
    let step = (tile - tile_overlap(tile)).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + tile < n).collect();
    starts.push(n - tile);
    starts
}

/// Linear feathering weight of position `i` in a tile of length `n`.
fn feather(i: usize, n: usize, overlap: usize) -> f64 {
    let edge = (i + 1).min(n - i);
    edge.min(overlap + 1) as f64 / (overlap + 1) as f64
}

/// Run the generator over `xray` in overlapping tiles of size `tile`,
/// blending means and variances with linear feathering. The volume must be
/// at least one tile in every direction.
pub fn reconstruct_tiled<T: Scalar>(generator: &Generator<T>, xray: &Volume<T>, tile: [usize; 3]) -> Result<ReconOutput<T>> {
    let shape = xray.shape();
    if (0..3).any(|a| tile[a] > shape[a] || tile[a] == 0) {
        return Err(Error::CropTooLarge { crop: tile, shape });
    }
    generator.spec.check_input(tile)?;
    let [d, h, w] = shape;
    let n = d * h * w;
    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    let mut weight = vec![0.0; n];
    let ov = tile.map(tile_overlap);
    let wz: Vec<f64> = (0..tile[0]).map(|i| feather(i, tile[0], ov[0])).collect();
    let wy: Vec<f64> = (0..tile[1]).map(|i| feather(i, tile[1], ov[1])).collect();
    let wx: Vec<f64> = (0..tile[2]).map(|i| feather(i, tile[2], ov[2])).collect();
    for &z0 in &tile_starts(d, tile[0]) {
        for &y0 in &tile_starts(h, tile[1]) {
            for &x0 in &tile_starts(w, tile[2]) {
                let crop = xray.crop([z0, y0, x0], tile)?;
                let out = generator.apply(&Tensor::from_vec([1, 1, tile[0], tile[1], tile[2]], crop.into_data())?)?;
                let (m, s) = (out.mean.data(), out.log_variance.data());
                for z in 0..tile[0] {
                    for y in 0..tile[1] {
                        for x in 0..tile[2] {
                            let t = (z * tile[1] + y) * tile[2] + x;
                            let g = ((z0 + z) * h + y0 + y) * w + x0 + x;
                            let k = wz[z] * wy[y] * wx[x];
                            mean[g] += k * m[t].as_f64();
                            var[g] += k * s[t].as_f64().exp();
                            weight[g] += k;
                        }
                    }
                }
            }
        }
    }
    let shape5 = [1, 1, d, h, w];
    let mean = mean.iter().zip(&weight).map(|(m, k)| T::of(m / k)).collect();
    let log_variance = var.iter().zip(&weight).map(|(v, k)| T::of((v / k).ln())).collect();
    Ok(ReconOutput {
        mean: Tensor::from_vec(shape5, mean)?,
        log_variance: Tensor::from_vec(shape5, log_variance)?,
    })
}
