//! Command-line front end. Every command resolves its configuration from an
//! optional JSON file overridden by flags, writes it to its output directory
//! as `config.json`, and only then starts working.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::{evaluate_volume, export_uncertainty, plot_history, reconstruct_tiled};
use crate::models::checkpoint::save_checkpoint;
use crate::models::{ReconOutput, VariantName, VariantSpec};
use crate::phantom::{generate_phantom, PhantomConfig, RNG_NAME};
use crate::tensor::Tensor;
use crate::trainer::{
    load_recon_checkpoint, load_segnet, pretrain_segnet, resolve_checkpoint, run_training, seg_dataset_from_pairs, ReconTrainConfig,
    SegTrainConfig, CONFIG_FILE, SEG_SECTION,
};
use crate::volcore::{load_volume, normalize, save_volume, Axis, Dtype, Modality, NormalizeMode, Volume, VolumePair};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "xray2em", version, about = "X-ray to EM reconstruction with uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seeded single-worker mode.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Compute device.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic EM / X-ray / label triples.
    MakePhantom(MakePhantomArgs),
    /// Pre-train the membrane segmentation network.
    TrainSeg(TrainSegArgs),
    /// Train a reconstruction model.
    Train(TrainArgs),
    /// Reconstruct a full X-ray volume with a trained model.
    Reconstruct(ReconstructArgs),
    /// Score a reconstruction against its EM target.
    Eval(EvalArgs),
    /// Plot the loss curves of a training run.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct MakePhantomArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    /// `ZxYxX`
    #[arg(long, value_parser = parse_triple)]
    size: Option<[usize; 3]>,
    /// Seed of the first pair; pair `i` uses `seed + i`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cells: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainSegArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Random `RxC` training patches instead of whole sections.
    #[arg(long, value_parser = parse_pair)]
    patch: Option<[usize; 2]>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    variant: Option<VariantName>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seg_ckpt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    constant_epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// `ZxYxX`
    #[arg(long, value_parser = parse_triple)]
    crop: Option<[usize; 3]>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    /// Checkpoint or training run directory.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// X-ray volume.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tile size `ZxYxX`; defaults to the training crop.
    #[arg(long, value_parser = parse_triple)]
    tile: Option<[usize; 3]>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    seg_ckpt: Option<PathBuf>,
    /// Variance volume of the prediction; exports uncertainty panels.
    #[arg(long)]
    variance: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_dims<const N: usize>(s: &str) -> std::result::Result<[usize; N], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != N {
        return Err(format!("expected {N} sizes separated by 'x', got {s:?}"));
    }
    let mut out = [0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("invalid size {p:?}"))?;
        if *o == 0 {
            return Err("sizes must be positive".into());
        }
    }
    Ok(out)
}

fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_dims::<3>(s)
}

fn parse_pair(s: &str) -> std::result::Result<[usize; 2], String> {
    parse_dims::<2>(s)
}

/// Resolved configuration of `make-phantom`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomRun {
    pub out: PathBuf,
    pub count: usize,
    #[serde(flatten)]
    pub phantom: PhantomConfig,
}

impl Default for PhantomRun {
    fn default() -> Self {
        Self {
            out: PathBuf::new(),
            count: 1,
            phantom: PhantomConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegRun {
    pub data: PathBuf,
    pub out: PathBuf,
    #[serde(flatten)]
    pub train: SegTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub data: PathBuf,
    pub out: PathBuf,
    #[serde(flatten)]
    pub train: ReconTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructRun {
    pub ckpt: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub tile: Option<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRun {
    pub pred: PathBuf,
    pub target: PathBuf,
    pub labels: Option<PathBuf>,
    pub seg_ckpt: Option<PathBuf>,
    pub variance: Option<PathBuf>,
    pub threshold: f64,
    pub out: PathBuf,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            pred: PathBuf::new(),
            target: PathBuf::new(),
            labels: None,
            seg_ckpt: None,
            variance: None,
            threshold: 0.5,
            out: PathBuf::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotRun {
    pub history: PathBuf,
    pub out: PathBuf,
}

/// One generated triple, paths relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    pub em: String,
    pub xray: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub rng: String,
    pub config: PhantomConfig,
    pub pairs: Vec<ManifestEntry>,
}

/// Load every pair listed in `dir/manifest.json`.
pub fn load_dataset(dir: &Path) -> Result<Vec<VolumePair<f32>>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read dataset manifest {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.pairs.is_empty() {
        return Err(Error::EmptyInput(format!("{} lists no pairs", path.display())));
    }
    manifest
        .pairs
        .iter()
        .map(|e| VolumePair::new(load_volume(dir.join(&e.xray))?, load_volume(dir.join(&e.em))?, Some(load_volume(dir.join(&e.labels))?)))
        .collect()
}

fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn require(path: &Path, flag: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::Config(format!("--{flag} is required")));
    }
    Ok(())
}

fn write_config<C: Serialize>(dir: &Path, cfg: &C) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&path, e))
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn make_phantom(args: MakePhantomArgs, config: Option<&Path>) -> Result<()> {
    let mut run: PhantomRun = read_config(config)?;
    set(&mut run.out, args.out);
    set(&mut run.count, args.count);
    set(&mut run.phantom.size, args.size);
    set(&mut run.phantom.seed, args.seed);
    set(&mut run.phantom.n_cells, args.cells);
    require(&run.out, "out")?;
    run.phantom.validate()?;
    if run.count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    write_config(&run.out, &run)?;
    let mut pairs = Vec::with_capacity(run.count);
    for i in 0..run.count as u64 {
        let seed = run.phantom.seed + i;
        let cfg = PhantomConfig { seed, ..run.phantom.clone() };
        let pair = generate_phantom::<f32>(&cfg)?;
        let entry = ManifestEntry {
            seed,
            em: format!("pair_{seed}_em.v3d"),
            xray: format!("pair_{seed}_xray.v3d"),
            labels: format!("pair_{seed}_labels.v3d"),
        };
        save_volume(&pair.em, run.out.join(&entry.em))?;
        save_volume(&pair.xray, run.out.join(&entry.xray))?;
        save_volume(pair.labels.as_ref().expect("phantoms carry labels"), run.out.join(&entry.labels))?;
        pairs.push(entry);
    }
    let manifest = Manifest {
        rng: RNG_NAME.into(),
        config: run.phantom.clone(),
        pairs,
    };
    let path = run.out.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

fn train_seg(args: TrainSegArgs, config: Option<&Path>, deterministic: bool) -> Result<()> {
    let mut run: SegRun = read_config(config)?;
    set(&mut run.data, args.data);
    set(&mut run.out, args.out);
    set(&mut run.train.iterations, args.iterations);
    set(&mut run.train.batch_size, args.batch_size);
    set(&mut run.train.lr, args.lr);
    set(&mut run.train.seed, args.seed);
    if args.patch.is_some() {
        run.train.patch = args.patch;
    }
    run.train.deterministic |= deterministic;
    require(&run.data, "data")?;
    require(&run.out, "out")?;
    write_config(&run.out, &run)?;
    let pairs = load_dataset(&run.data)?;
    let data = seg_dataset_from_pairs(&pairs, &[Axis::XY])?;
    let out = pretrain_segnet(&data, &run.train)?;
    let ckpt = run.out.join("ckpt");
    save_checkpoint(&ckpt, &out.net.spec, &[(SEG_SECTION, &out.net)])?;
    let path = run.out.join("losses.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["iteration", "loss"])?;
    for (i, l) in out.losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn train(args: TrainArgs, config: Option<&Path>, deterministic: bool) -> Result<()> {
    let mut run: TrainRun = read_config(config)?;
    if let Some(v) = args.variant {
        run.train.variant = VariantSpec::from_name(v);
    }
    set(&mut run.data, args.data);
    set(&mut run.out, args.out);
    if args.seg_ckpt.is_some() {
        run.train.seg_checkpoint = args.seg_ckpt;
    }
    set(&mut run.train.epochs, args.epochs);
    set(&mut run.train.constant_epochs, args.constant_epochs);
    set(&mut run.train.steps_per_epoch, args.steps_per_epoch);
    set(&mut run.train.crop, args.crop);
    set(&mut run.train.lr, args.lr);
    set(&mut run.train.batch_size, args.batch_size);
    set(&mut run.train.seed, args.seed);
    run.train.deterministic |= deterministic;
    require(&run.data, "data")?;
    require(&run.out, "out")?;
    run.train.validate()?;
    if let Some(seg) = &run.train.seg_checkpoint {
        resolve_checkpoint(seg)?;
    }
    write_config(&run.out, &run)?;
    let pairs = load_dataset(&run.data)?;
    run_training(&pairs, &run.train, &run.out, false)?;
    Ok(())
}

fn reconstruct(args: ReconstructArgs, config: Option<&Path>) -> Result<()> {
    let mut run: ReconstructRun = read_config(config)?;
    set(&mut run.ckpt, args.ckpt);
    set(&mut run.input, args.input);
    set(&mut run.out, args.out);
    if args.tile.is_some() {
        run.tile = args.tile;
    }
    require(&run.ckpt, "ckpt")?;
    require(&run.input, "input")?;
    require(&run.out, "out")?;
    write_config(&run.out, &run)?;
    let (spec, generator, _) = load_recon_checkpoint::<f32>(&run.ckpt)?;
    let xray: Volume<f32> = load_volume(&run.input)?;
    let (xray, _) = normalize(&xray, NormalizeMode::Unit)?;
    let out = reconstruct_tiled(&generator, &xray, run.tile.unwrap_or(spec.crop))?;
    // The mean is an EM image on the unit range.
    let mean = out.mean.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let mean = Volume::unit(xray.shape(), mean, xray.voxel_size_nm, Modality::Em)?;
    save_volume(&mean, run.out.join("mean.v3d"))?;
    let var: Vec<f32> = out.variance().into_vec();
    let hi = var.iter().fold(0.0f32, |m, &v| m.max(v)) as f64;
    let range = (0.0, if hi > 0.0 { hi } else { 1.0 });
    let var = Volume::new(xray.shape(), var, xray.voxel_size_nm, Modality::Variance, range, Dtype::F32)?;
    save_volume(&var, run.out.join("variance.v3d"))
}

fn eval(args: EvalArgs, config: Option<&Path>) -> Result<()> {
    let mut run: EvalRun = read_config(config)?;
    set(&mut run.pred, args.pred);
    set(&mut run.target, args.target);
    set(&mut run.out, args.out);
    set(&mut run.threshold, args.threshold);
    for (slot, flag) in [(&mut run.labels, args.labels), (&mut run.seg_ckpt, args.seg_ckpt), (&mut run.variance, args.variance)] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    require(&run.pred, "pred")?;
    require(&run.target, "target")?;
    require(&run.out, "out")?;
    if !(0.0..=1.0).contains(&run.threshold) {
        return Err(Error::Config(format!("threshold {} must lie in [0, 1]", run.threshold)));
    }
    if run.seg_ckpt.is_some() && run.labels.is_none() {
        return Err(Error::Config("--seg-ckpt needs --labels".into()));
    }
    write_config(&run.out, &run)?;
    let pred: Volume<f32> = load_volume(&run.pred)?;
    let target: Volume<f32> = load_volume(&run.target)?;
    let labels = run.labels.as_deref().map(load_volume::<f32>).transpose()?;
    let seg = run.seg_ckpt.as_deref().map(load_segnet::<f32>).transpose()?;
    let report = evaluate_volume(&pred, &target, seg.as_ref(), labels.as_ref(), run.threshold)?;
    report.write(&run.out)?;
    if let Some(v) = &run.variance {
        let var: Volume<f32> = load_volume(v)?;
        let [d, h, w] = pred.shape();
        let to = |data: Vec<f32>| Tensor::from_vec([1, 1, d, h, w], data);
        let recon = ReconOutput {
            mean: to(pred.data().to_vec())?,
            log_variance: to(var.data().iter().map(|&s| s.max(f32::MIN_POSITIVE).ln()).collect())?,
        };
        export_uncertainty(&recon, &target, &run.out.join("uncertainty"), None)?;
    }
    Ok(())
}

fn plot(args: PlotArgs, config: Option<&Path>) -> Result<()> {
    let mut run: PlotRun = read_config(config)?;
    set(&mut run.history, args.history);
    set(&mut run.out, args.out);
    require(&run.history, "history")?;
    require(&run.out, "out")?;
    write_config(&run.out, &run)?;
    plot_history(&run.history, &run.out.join("history.png"))
}

fn dispatch(cli: Cli) -> Result<()> {
    if cli.device != "cpu" {
        return Err(Error::Config(format!("device {:?} is not available; only \"cpu\" is supported", cli.device)));
    }
    let config = cli.config.as_deref();
    match cli.command {
        Command::MakePhantom(a) => make_phantom(a, config),
        Command::TrainSeg(a) => train_seg(a, config, cli.deterministic),
        Command::Train(a) => train(a, config, cli.deterministic),
        Command::Reconstruct(a) => reconstruct(a, config),
        Command::Eval(a) => eval(a, config),
        Command::Plot(a) => plot(a, config),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Run the command line `argv` (program name first) and return the process
/// exit code. Failures print one `error[<kind>]: <message>` line to stderr.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", one_line(first.trim_start_matches("error: ")));
            return EXIT_USAGE;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) if e.is_validation() => {
            eprintln!("error[validation]: {}", one_line(&e.to_string()));
            EXIT_VALIDATION
        }
        Err(e) => {
            eprintln!("error[runtime]: {}", one_line(&e.to_string()));
            EXIT_RUNTIME
        }
    }
}
