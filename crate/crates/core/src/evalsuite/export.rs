use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ReconOutput;
use crate::scalar::Scalar;
use crate::volcore::{extract_slice, save_volume, Axis, Dtype, Modality, Section, Volume};

/// Display scale of one exported panel: stored value `v` maps to gray level
/// `255 * (v - lo) / (hi - lo)`, clipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelScale {
    pub file: String,
    pub axis: Axis,
    pub index: usize,
    pub kind: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyExport {
    pub mean: PathBuf,
    pub variance: PathBuf,
    pub error: PathBuf,
    pub panels: Vec<PanelScale>,
}

pub const PANELS_FILE: &str = "panels.json";

fn to_volume<T: Scalar>(
    data: Vec<T>,
    like: &Volume<T>,
    modality: Modality,
    range: (f64, f64),
) -> Result<Volume<T>> {
    Volume::new(like.shape(), data, like.voxel_size_nm, modality, range, Dtype::F32)
}

fn write_panel<T: Scalar>(s: &Section<T>, lo: f64, hi: f64, path: &Path) -> Result<()> {
    let [rows, cols] = s.shape;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = GrayImage::from_fn(cols as u32, rows as u32, |x, y| {
        let v = (s.get(y as usize, x as usize).as_f64() - lo) / span;
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

/// Write the mean, variance (`exp(log_variance)`) and absolute error of a
/// reconstruction as volumes, and one PNG panel of each per requested
/// section. Variance panels are scaled per section; `panels.json` records
/// every panel's scale. Without `sections`, the middle section of each
/// direction is exported.
pub fn export_uncertainty<T: Scalar>(
    recon: &ReconOutput<T>,
    target: &Volume<T>,
    out_dir: &Path,
    sections: Option<&[(Axis, usize)]>,
) -> Result<UncertaintyExport> {
    let [d, h, w] = target.shape();
    if recon.mean.shape() != [1, 1, d, h, w] || recon.log_variance.shape() != [1, 1, d, h, w] {
        return Err(Error::Shape(format!(
            "reconstruction {:?} does not match target {:?}",
            recon.mean.shape(),
            target.shape()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (lo, hi) = target.intensity_range;
    let variance = recon.variance().into_vec();
    let vmax = variance.iter().map(|v| v.as_f64()).fold(0.0, f64::max);
    let error: Vec<T> = recon.mean.data().iter().zip(target.data()).map(|(&m, &t)| (m - t).abs()).collect();
    let mean = to_volume(recon.mean.data().to_vec(), target, Modality::Em, (lo, hi))?;
    let variance = to_volume(variance, target, Modality::Variance, (0.0, if vmax > 0.0 { vmax } else { 1.0 }))?;
    let error = to_volume(error, target, Modality::Em, (0.0, hi - lo))?;
    let files = [("mean", &mean), ("variance", &variance), ("error", &error)].map(|(name, v)| {
        let path = out_dir.join(format!("{name}.v3d"));
        save_volume(v, &path).map(|_| path)
    });
    let [mean_path, var_path, err_path] = files;
    let defaults: Vec<(Axis, usize)> = Axis::ALL.iter().map(|&a| (a, target.shape()[a.normal()] / 2)).collect();
    let mut panels = Vec::new();
    for &(axis, index) in sections.unwrap_or(&defaults) {
        for (kind, vol) in [("mean", &mean), ("variance", &variance), ("error", &error)] {
            let s = extract_slice(vol, axis, index)?;
            let (plo, phi) = match kind {
                "mean" => (lo, hi),
                "error" => (0.0, hi - lo),
                _ => s
                    .data
                    .iter()
                    .map(|v| v.as_f64())
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v))),
            };
            let file = format!("{}_{index}_{kind}.png", axis.label());
            write_panel(&s, plo, phi, &out_dir.join(&file))?;
            panels.push(PanelScale {
                file,
                axis,
                index,
                kind: kind.into(),
                lo: plo,
                hi: phi,
            });
        }
    }
    let sidecar = out_dir.join(PANELS_FILE);
    fs::write(&sidecar, serde_json::to_string_pretty(&panels)?).map_err(|e| Error::io(&sidecar, e))?;
    Ok(UncertaintyExport {
        mean: mean_path?,
        variance: var_path?,
        error: err_path?,
        panels,
    })
}

const PLOT_COLUMNS: [&str; 5] = ["loss_d", "loss_g_adv", "loss_recon", "loss_seg", "total"];
const PLOT_COLORS: [[u8; 3]; 5] = [[220, 50, 47], [38, 139, 210], [133, 153, 0], [211, 54, 130], [0, 0, 0]];

/// Render the loss curves of a training `history.csv` to a PNG, one panel
/// per loss, each scaled to its own range.
pub fn plot_history(history: &Path, out: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(history)?;
    let headers = reader.headers()?.clone();
    let cols: Vec<usize> = PLOT_COLUMNS
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::Format {
                    path: history.to_path_buf(),
                    msg: format!("missing column {name}"),
                })
        })
        .collect::<Result<_>>()?;
    let mut series = vec![Vec::new(); cols.len()];
    for row in reader.records() {
        let row = row?;
        for (s, &c) in series.iter_mut().zip(&cols) {
            let v: f64 = row[c].parse().map_err(|_| Error::Format {
                path: history.to_path_buf(),
                msg: format!("bad number {:?}", &row[c]),
            })?;
            s.push(v);
        }
    }
    if series[0].is_empty() {
        return Err(Error::EmptyInput(format!("{} has no rows", history.display())));
    }
    let (pw, ph, margin) = (600u32, 120u32, 10u32);
    let mut img = RgbImage::from_pixel(pw + 2 * margin, (ph + margin) * series.len() as u32 + margin, Rgb([255; 3]));
    for (k, s) in series.iter().enumerate() {
        let top = margin + k as u32 * (ph + margin);
        for x in 0..pw {
            img.put_pixel(margin + x, top + ph - 1, Rgb([200; 3]));
        }
        let finite = s.iter().copied().filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let n = s.len();
        let point = |i: usize| {
            let x = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let y = ((s[i] - lo) / span).clamp(0.0, 1.0);
            (margin as f64 + x * (pw - 1) as f64, top as f64 + (1.0 - y) * (ph - 1) as f64)
        };
        for i in 0..n {
            let (x0, y0) = point(i.saturating_sub(1));
            let (x1, y1) = point(i);
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for t in 0..=steps {
                let f = t as f64 / steps as f64;
                let (x, y) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
                img.put_pixel(x.round() as u32, y.round() as u32, Rgb(PLOT_COLORS[k]));
            }
        }
    }
    img.save(out)?;
    Ok(())
}
