//! Segmentation pre-training and end-to-end reconstruction training.

mod recon;
mod seg;

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::{Dims, DiscriminatorSpec, GeneratorSpec, SegNetSpec, VariantName, VariantSpec};
use crate::volcore::Axis;

pub use recon::{
    load_recon_checkpoint, train_reconstruction, HistoryRow, ReconModelSpec, ReconTrainOutcome, ReconTrainer,
    StepLosses, CONFIG_FILE, DISCRIMINATOR_SECTION, GENERATOR_SECTION, HISTORY_FILE,
};
pub use seg::{load_segnet, pretrain_segnet, seg_dataset_from_pairs, SegSample, SegTrainOutcome, SEG_SECTION};
pub(crate) use recon::run_training;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Train on random `[rows, cols]` patches instead of whole sections.
    pub patch: Option<[usize; 2]>,
    pub network: SegNetSpec,
    pub deterministic: bool,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 4,
            lr: 0.0001,
            weight_decay: 0.00005,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            patch: None,
            network: SegNetSpec::default(),
            deterministic: false,
        }
    }
}

/// How the per-voxel reconstruction loss is reduced before weighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    /// Summed over the voxels of the crop.
    Sum,
}

/// Network sizes. Dimensionality always follows the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    /// `None` picks 32 for a 3-D and 64 for a 2-D generator.
    pub generator_base_channels: Option<usize>,
    pub generator_depth: usize,
    pub discriminator_base_channels: usize,
    pub discriminator_layers: usize,
    pub conditional_discriminator: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            generator_base_channels: None,
            generator_depth: 4,
            discriminator_base_channels: 64,
            discriminator_layers: 3,
            conditional_discriminator: false,
        }
    }
}

impl Architecture {
    pub fn generator(&self, variant: &VariantSpec) -> GeneratorSpec {
        let mut g = GeneratorSpec::new(variant.generator_dims);
        g.depth = self.generator_depth;
        if let Some(b) = self.generator_base_channels {
            g.base_channels = b;
        }
        g
    }

    pub fn discriminator(&self, variant: &VariantSpec) -> DiscriminatorSpec {
        DiscriminatorSpec {
            dims: variant.discriminator_dims,
            base_channels: self.discriminator_base_channels,
            n_layers: self.discriminator_layers,
            conditional: self.conditional_discriminator,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconTrainConfig {
    pub epochs: usize,
    pub constant_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// `[Z, Y, X]`
    pub crop: [usize; 3],
    pub weights: LossWeights,
    pub variant: VariantSpec,
    pub seg_checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub steps_per_epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub recon_reduction: Reduction,
    pub architecture: Architecture,
    pub deterministic: bool,
}

impl Default for ReconTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            constant_epochs: 50,
            lr: 0.0002,
            batch_size: 1,
            crop: [64, 128, 128],
            weights: LossWeights::default(),
            variant: VariantSpec::from_name(VariantName::Full3d),
            seg_checkpoint: None,
            seed: 0,
            steps_per_epoch: 250,
            beta1: 0.5,
            beta2: 0.999,
            recon_reduction: Reduction::Sum,
            architecture: Architecture::default(),
            deterministic: false,
        }
    }
}

impl ReconTrainConfig {
    pub fn for_variant(name: VariantName) -> Self {
        Self {
            variant: VariantSpec::from_name(name),
            ..Self::default()
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        self.architecture.generator(&self.variant)
    }

    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        self.architecture.discriminator(&self.variant)
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        let cfg = |m: String| Err(Error::Config(m));
        if self.variant.use_seg_loss && self.seg_checkpoint.is_none() {
            return cfg(format!("variant {} needs a segmentation checkpoint", self.variant.name));
        }
        if !self.variant.use_seg_loss && self.seg_checkpoint.is_some() {
            return cfg(format!("variant {} does not use a segmentation checkpoint", self.variant.name));
        }
        if self.constant_epochs > self.epochs || self.epochs == 0 {
            return cfg(format!("need 0 < epochs and constant_epochs <= epochs, got {} and {}", self.epochs, self.constant_epochs));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return cfg("batch_size and steps_per_epoch must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return cfg(format!("learning rate {} must be non-negative", self.lr));
        }
        let w = &self.weights;
        if [w.w_gan, w.w_nll, w.w_seg, w.w_l1].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return cfg("loss weights must be finite and non-negative".into());
        }
        self.generator_spec().check_input(self.crop)?;
        if self.variant.discriminator_dims == Dims::D3 && self.crop[0] < 2 {
            return cfg("a 3-D discriminator needs crops deeper than one section".into());
        }
        self.discriminator_spec()
            .output_spatial(self.crop)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// The checkpoint directory behind `dir`: `dir` itself when it holds a
/// checkpoint, else `dir/ckpt`, else the latest `dir/ckpt/epoch_<n>`.
pub fn resolve_checkpoint(dir: &Path) -> Result<PathBuf> {
    let spec = crate::models::checkpoint::SPEC_FILE;
    if dir.join(spec).is_file() {
        return Ok(dir.to_path_buf());
    }
    let ckpt = dir.join("ckpt");
    if ckpt.join(spec).is_file() {
        return Ok(ckpt);
    }
    let latest = std::fs::read_dir(&ckpt).ok().and_then(|entries| {
        entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let n: usize = name.strip_prefix("epoch_")?.parse().ok()?;
                e.path().join(spec).is_file().then_some((n, e.path()))
            })
            .max_by_key(|(n, _)| *n)
    });
    latest
        .map(|(_, p)| p)
        .ok_or_else(|| Error::Config(format!("no checkpoint found under {}", dir.display())))
}

/// Learning rate for a 1-based epoch: constant through `constant_epochs`,
/// then `lr * (epochs - epoch) / (epochs - constant_epochs)`.
pub fn lr_at_epoch(epoch: usize, cfg: &ReconTrainConfig) -> Result<f64> {
    if epoch < 1 || epoch > cfg.epochs {
        return Err(Error::Range(format!("epoch {epoch} of 1..={}", cfg.epochs)));
    }
    if epoch <= cfg.constant_epochs {
        return Ok(cfg.lr);
    }
    Ok(cfg.lr * (cfg.epochs - epoch) as f64 / (cfg.epochs - cfg.constant_epochs) as f64)
}

/// One uniformly drawn section index per direction.
pub fn sample_seg_slices<R: Rng + ?Sized>(shape: [usize; 3], rng: &mut R) -> [(Axis, usize); 3] {
    Axis::ALL.map(|axis| (axis, rng.gen_range(0..shape[axis.normal()].max(1))))
}
