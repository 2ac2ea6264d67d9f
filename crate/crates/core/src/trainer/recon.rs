use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lr_at_epoch, load_segnet, resolve_checkpoint, sample_seg_slices, ReconTrainConfig, Reduction};
use crate::error::{Error, Result};
use crate::losses::{bce_with_logits, l1_loss_with_grad, nll_loss_with_grad, seg_consistency_loss_with_grad, total_generator_loss};
use crate::models::checkpoint::{load_params, load_spec, save_checkpoint};
use crate::models::{
    Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, ReconLoss, ReconOutput, SegNet, VariantSpec,
};
use crate::nn::{Adam, AdamState, Module};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volcore::{insert_slice, normalize, random_crop_pair, save_volume, section_of, NormalizeMode, VolumePair};

pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const GENERATOR_SECTION: &str = "generator";
pub const DISCRIMINATOR_SECTION: &str = "discriminator";
const NAN_DUMP_DIR: &str = "nan_dump";

/// Everything needed to rebuild the networks of a reconstruction checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconModelSpec {
    pub variant: VariantSpec,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    /// Training crop `[Z, Y, X]`, also the default inference tile.
    pub crop: [usize; 3],
}

/// Batch-averaged losses of one training step. `loss_recon` is reduced as
/// configured, `total` is the weighted generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub loss_recon: f64,
    pub loss_seg: f64,
    pub total: f64,
}

impl StepLosses {
    pub fn all_finite(&self) -> bool {
        [self.loss_d, self.loss_g_adv, self.loss_recon, self.loss_seg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub loss_recon: f64,
    pub loss_seg: f64,
    pub total: f64,
    pub lr: f64,
}

/// Generator, discriminator and optimizer state for end-to-end training.
pub struct ReconTrainer<T> {
    cfg: ReconTrainConfig,
    generator: Generator<T>,
    discriminator: Discriminator<T>,
    segnet: Option<SegNet<T>>,
    adam: Adam,
    state_g: AdamState<T>,
    state_d: AdamState<T>,
    crop_rng: ChaCha8Rng,
    slice_rng: ChaCha8Rng,
    steps: u64,
}

fn diverged(e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged(format!("non-finite {what}")),
        other => other,
    }
}

fn scaled<T: Scalar>(mut t: Tensor<T>, s: f64) -> Tensor<T> {
    t.scale(T::of(s));
    t
}

impl<T: Scalar> ReconTrainer<T> {
    /// Build freshly initialised networks. `segnet` must be present exactly
    /// when the variant uses the segmentation term.
    pub fn new(cfg: ReconTrainConfig, segnet: Option<SegNet<T>>) -> Result<Self> {
        cfg.validate()?;
        if segnet.is_some() != cfg.variant.use_seg_loss {
            return Err(Error::Config(format!(
                "variant {} {} a segmentation network",
                cfg.variant.name,
                if cfg.variant.use_seg_loss { "needs" } else { "does not use" }
            )));
        }
        if let Some(s) = &segnet {
            let m = 1usize << s.spec.depth;
            let [d, h, w] = cfg.crop;
            if [d, h, w].iter().any(|n| n % m != 0) {
                return Err(Error::Config(format!(
                    "crop {:?} sections are not divisible by {m} as the segmentation network requires",
                    cfg.crop
                )));
            }
        }
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = Generator::new(cfg.generator_spec(), &mut init);
        let discriminator = Discriminator::new(cfg.discriminator_spec(), &mut init);
        let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        crop_rng.set_stream(1);
        let mut slice_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        slice_rng.set_stream(2);
        Ok(Self {
            adam: Adam::new(cfg.beta1, cfg.beta2, 0.0),
            cfg,
            generator,
            discriminator,
            segnet,
            state_g: AdamState::new(),
            state_d: AdamState::new(),
            crop_rng,
            slice_rng,
            steps: 0,
        })
    }

    pub fn config(&self) -> &ReconTrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator<T> {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator<T> {
        &self.discriminator
    }

    pub fn segnet(&self) -> Option<&SegNet<T>> {
        self.segnet.as_ref()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn model_spec(&self) -> ReconModelSpec {
        ReconModelSpec {
            variant: self.cfg.variant,
            generator: self.generator.spec,
            discriminator: self.discriminator.spec,
            crop: self.cfg.crop,
        }
    }

    /// One batch of training crops drawn uniformly over pairs and offsets.
    pub fn sample_batch(&mut self, data: &[VolumePair<T>]) -> Result<Vec<VolumePair<T>>> {
        if data.is_empty() {
            return Err(Error::EmptyInput("no training pairs".into()));
        }
        (0..self.cfg.batch_size)
            .map(|_| {
                let i = self.crop_rng.gen_range(0..data.len());
                Ok(random_crop_pair(&data[i], self.cfg.crop, &mut self.crop_rng)?.0)
            })
            .collect()
    }

    fn cond<'a>(&self, x: &'a Tensor<T>) -> Option<&'a Tensor<T>> {
        self.discriminator.spec.conditional.then_some(x)
    }

    /// Update the discriminator on real EM against the given reconstructions.
    /// Only discriminator parameters receive gradients.
    pub fn d_step(&mut self, batch: &[VolumePair<T>], fakes: &[Tensor<T>], lr: f64) -> Result<f64> {
        let inv_b = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (pair, fake) in batch.iter().zip(fakes) {
            let x = pair.xray.to_tensor();
            let y = pair.em.to_tensor();
            let cond = self.cond(&x);
            let s = self.discriminator.forward(&y, cond)?;
            let (l_real, g) = bce_with_logits(&s, true).map_err(diverged)?;
            self.discriminator.backward_params(&scaled(g, inv_b));
            let s = self.discriminator.forward(fake, cond)?;
            let (l_fake, g) = bce_with_logits(&s, false).map_err(diverged)?;
            self.discriminator.backward_params(&scaled(g, inv_b));
            loss += (l_real + l_fake).as_f64() * inv_b;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("discriminator loss {loss}")));
        }
        self.state_d.step(&self.adam, &mut self.discriminator, lr);
        Ok(loss)
    }

    /// Membrane consistency on one section per direction, accumulating
    /// `scale * dL/dmean` into `grad_mean`.
    fn seg_term(&mut self, mean: &Tensor<T>, em: &Tensor<T>, grad_mean: &mut Tensor<T>, scale: f64) -> Result<f64> {
        let shape = mean.spatial();
        let slices = sample_seg_slices(shape, &mut self.slice_rng);
        let seg = self.segnet.as_mut().expect("seg term requires a segmentation network");
        let k = slices.len() as f64;
        let mut total = 0.0;
        for (axis, index) in slices {
            let fake = section_of(mean.data(), shape, axis, index)?;
            let real = section_of(em.data(), shape, axis, index)?;
            let p_fake = seg.forward_probs(&fake.to_tensor())?;
            let p_real = seg.probabilities(&real.to_tensor())?;
            let (l, grads) = seg_consistency_loss_with_grad(&[p_fake], &[p_real]).map_err(diverged)?;
            total += l.as_f64() / k;
            let dx = seg.backward_probs(&scaled(grads.into_iter().next().expect("one map"), scale / k));
            let mut sec = section_of(grad_mean.data(), shape, axis, index)?;
            for (s, d) in sec.data.iter_mut().zip(dx.data()) {
                *s += *d;
            }
            insert_slice(grad_mean.data_mut(), shape, axis, index, &sec)?;
        }
        Ok(total)
    }

    /// Accumulate generator gradients for one crop whose forward pass is
    /// cached in the generator. Returns `(adv, recon, seg)`.
    fn g_backward(&mut self, pair: &VolumePair<T>, out: &ReconOutput<T>, inv_b: f64) -> Result<(f64, f64, f64)> {
        let x = pair.xray.to_tensor();
        let y = pair.em.to_tensor();
        let w = self.cfg.weights;
        let cond = self.cond(&x);
        let s = self.discriminator.forward(&out.mean, cond)?;
        let (adv, g) = bce_with_logits(&s, true).map_err(diverged)?;
        let mut grad_mean = self.discriminator.backward(&scaled(g, w.w_gan * inv_b));
        self.discriminator.zero_grad();

        let n = y.len() as f64;
        let reduce = match self.cfg.recon_reduction {
            Reduction::Mean => 1.0,
            Reduction::Sum => n,
        };
        let (recon, grad_s) = match self.cfg.variant.recon_loss {
            ReconLoss::Nll => {
                let (l, gm, gs) = nll_loss_with_grad(&out.mean, &out.log_variance, &y).map_err(diverged)?;
                let k = w.w_nll * reduce * inv_b;
                grad_mean.add_assign(&scaled(gm, k));
                (l.as_f64() * reduce, scaled(gs, k))
            }
            ReconLoss::L1 => {
                let (l, gm) = l1_loss_with_grad(&out.mean, &y).map_err(diverged)?;
                grad_mean.add_assign(&scaled(gm, w.w_l1 * reduce * inv_b));
                (l.as_f64() * reduce, Tensor::zeros(y.shape()))
            }
        };
        let seg = if self.cfg.variant.use_seg_loss {
            self.seg_term(&out.mean, &y, &mut grad_mean, w.w_seg * inv_b)?
        } else {
            0.0
        };
        self.generator.backward(&grad_mean, &grad_s);
        Ok((adv.as_f64(), recon, seg))
    }

    /// One discriminator update followed by one generator update on `batch`.
    pub fn step(&mut self, batch: &[VolumePair<T>], lr: f64) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        let inv_b = 1.0 / batch.len() as f64;
        // A single crop keeps its cached forward pass for the generator update.
        let cached = if batch.len() == 1 {
            Some(self.generator.forward(&batch[0].xray.to_tensor())?)
        } else {
            None
        };
        let fakes = match &cached {
            Some(out) => vec![out.mean.clone()],
            None => batch
                .iter()
                .map(|p| Ok(self.generator.apply(&p.xray.to_tensor())?.mean))
                .collect::<Result<Vec<_>>>()?,
        };
        let loss_d = self.d_step(batch, &fakes, lr)?;

        let mut losses = StepLosses {
            loss_d,
            ..StepLosses::default()
        };
        for pair in batch {
            let out = match &cached {
                Some(out) => out.clone(),
                None => self.generator.forward(&pair.xray.to_tensor())?,
            };
            let (adv, recon, seg) = self.g_backward(pair, &out, inv_b)?;
            losses.loss_g_adv += adv * inv_b;
            losses.loss_recon += recon * inv_b;
            losses.loss_seg += seg * inv_b;
        }
        let seg = self.cfg.variant.use_seg_loss.then_some(losses.loss_seg);
        losses.total = total_generator_loss(losses.loss_g_adv, losses.loss_recon, seg, &self.cfg.weights, &self.cfg.variant)?;
        if !losses.all_finite() {
            return Err(Error::Diverged(format!("generator losses {losses:?}")));
        }
        self.state_g.step(&self.adam, &mut self.generator, lr);
        self.steps += 1;
        Ok(losses)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        save_checkpoint(
            dir,
            &self.model_spec(),
            &[(GENERATOR_SECTION, &self.generator), (DISCRIMINATOR_SECTION, &self.discriminator)],
        )
    }
}

pub struct ReconTrainOutcome<T> {
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub history: Vec<HistoryRow>,
    /// Checkpoint directory of the final epoch.
    pub checkpoint: PathBuf,
}

/// Rebuild the networks stored in a reconstruction checkpoint, or in the
/// latest checkpoint of a run directory.
pub fn load_recon_checkpoint<T: Scalar>(dir: &Path) -> Result<(ReconModelSpec, Generator<T>, Discriminator<T>)> {
    let dir = &resolve_checkpoint(dir)?;
    let spec: ReconModelSpec = load_spec(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Generator::new(spec.generator, &mut rng);
    let mut d = Discriminator::new(spec.discriminator, &mut rng);
    load_params(dir, &mut [(GENERATOR_SECTION, &mut g), (DISCRIMINATOR_SECTION, &mut d)])?;
    Ok((spec, g, d))
}

fn normalized<T: Scalar>(pair: &VolumePair<T>) -> Result<VolumePair<T>> {
    VolumePair::new(
        normalize(&pair.xray, NormalizeMode::Unit)?.0,
        normalize(&pair.em, NormalizeMode::Unit)?.0,
        pair.labels.clone(),
    )
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: u64,
    epoch: usize,
    lr: f64,
    error: String,
    crops: &'a [String],
}

fn dump_batch<T: Scalar>(run_dir: &Path, batch: &[VolumePair<T>], step: u64, epoch: usize, lr: f64, err: &Error) -> Result<()> {
    let dir = run_dir.join(NAN_DUMP_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut crops = Vec::new();
    for (i, p) in batch.iter().enumerate() {
        for (kind, v) in [("xray", &p.xray), ("em", &p.em)] {
            let name = format!("crop_{i}_{kind}.v3d");
            save_volume(v, dir.join(&name))?;
            crops.push(name);
        }
    }
    let info = NanDump {
        step,
        epoch,
        lr,
        error: err.to_string(),
        crops: &crops,
    };
    let path = dir.join("dump.json");
    fs::write(&path, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&path, e))
}

/// Train a reconstruction model on `data`, writing `config.json`,
/// `history.csv` and one checkpoint per epoch under `run_dir`. Intensities
/// are mapped onto `[0, 1]` first.
pub fn train_reconstruction<T: Scalar>(
    data: &[VolumePair<T>],
    cfg: &ReconTrainConfig,
    run_dir: &Path,
) -> Result<ReconTrainOutcome<T>> {
    run_training(data, cfg, run_dir, true)
}

/// [`train_reconstruction`], optionally leaving `config.json` to the caller.
pub(crate) fn run_training<T: Scalar>(
    data: &[VolumePair<T>],
    cfg: &ReconTrainConfig,
    run_dir: &Path,
    write_config: bool,
) -> Result<ReconTrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("no training pairs".into()));
    }
    for p in data {
        if (0..3).any(|a| cfg.crop[a] > p.shape()[a]) {
            return Err(Error::CropTooLarge {
                crop: cfg.crop,
                shape: p.shape(),
            });
        }
    }
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    if write_config {
        let config_path = run_dir.join(CONFIG_FILE);
        fs::write(&config_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&config_path, e))?;
    }

    let segnet = match &cfg.seg_checkpoint {
        Some(dir) => Some(load_segnet::<T>(dir).map_err(|e| match e {
            Error::Io { .. } | Error::Format { .. } => {
                Error::Config(format!("cannot load segmentation checkpoint {}: {e}", dir.display()))
            }
            other => other,
        })?),
        None => None,
    };
    let data = data.iter().map(normalized).collect::<Result<Vec<_>>>()?;
    let mut trainer = ReconTrainer::new(cfg.clone(), segnet)?;

    let history_path = run_dir.join(HISTORY_FILE);
    let mut writer = csv::Writer::from_path(&history_path)?;
    let mut history = Vec::with_capacity(cfg.epochs * cfg.steps_per_epoch);
    let mut checkpoint = PathBuf::new();
    for epoch in 1..=cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg)?;
        for _ in 0..cfg.steps_per_epoch {
            let batch = trainer.sample_batch(&data)?;
            let losses = match trainer.step(&batch, lr) {
                Ok(l) => l,
                Err(e @ Error::Diverged(_)) => {
                    dump_batch(run_dir, &batch, trainer.steps() + 1, epoch, lr, &e)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let row = HistoryRow {
                step: trainer.steps(),
                epoch,
                loss_d: losses.loss_d,
                loss_g_adv: losses.loss_g_adv,
                loss_recon: losses.loss_recon,
                loss_seg: losses.loss_seg,
                total: losses.total,
                lr,
            };
            writer.serialize(row)?;
            history.push(row);
        }
        writer.flush().map_err(|e| Error::io(&history_path, e))?;
        checkpoint = run_dir.join("ckpt").join(format!("epoch_{epoch}"));
        trainer.save_checkpoint(&checkpoint)?;
        log::info!("epoch {epoch}/{}: lr {lr:e}, last total {:.6}", cfg.epochs, history.last().map_or(f64::NAN, |r| r.total));
    }
    Ok(ReconTrainOutcome {
        generator: trainer.generator,
        discriminator: trainer.discriminator,
        history,
        checkpoint,
    })
}
