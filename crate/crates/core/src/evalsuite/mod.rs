//! Per-direction reconstruction and segmentation metrics, report files,
//! uncertainty panels, loss plots and tiled whole-volume inference.

mod export;
mod metrics;
mod reconstruct;
mod report;

pub use export::{export_uncertainty, plot_history, PanelScale, UncertaintyExport, PANELS_FILE};
pub use metrics::{overlap_scores, psnr, ssim, ssim_volume_mean, SsimParams};
pub use reconstruct::{reconstruct_tiled, tile_overlap};
pub use report::{evaluate_volume, EvalSettings, MetricsReport, KEY_3D};
