//! Workflows behind the `smooseg` binary: `synth`, `train`, `eval`, `infer`, `diag`.
//!
//! Every command writes a JSON [`RunManifest`] before its other outputs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crf::CrfParams;
use crate::evaluator::{self, EvalOptions, GuideImage, Upsampling};
use crate::feature_store::{read_dataset, write_dataset, FeatureDataset, FeatureRecord, LabelMap};
use crate::model::{teacher_assignments, ModelState};
use crate::objective::DeltaHistogram;
use crate::synth::{self, SynthConfig};
use crate::trainer::{TrainConfig, Trainer};
use crate::{objective, Error, Result};

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", no + 1)));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

fn read_config(path: &Path) -> Result<Vec<(String, String)>> {
    parse_key_values(&fs::read_to_string(path)?)
}

/// What a run consumed and how it was configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: BTreeMap<String, String>,
    /// Input path to hex SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn with_config<I, K, V>(mut self, pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        self.config.extend(pairs.into_iter().map(|(k, v)| (k.into(), v.into())));
        self
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::invalid(e.to_string()))
    }
}

/// Hex SHA-256 of a file.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// `<path>.manifest.json`
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

#[derive(Debug, Parser)]
#[command(name = "smooseg", version, about = "Smoothness-prior unsupervised segmentation over frozen patch features")]
pub struct Cli {
    /// Caps worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic feature dataset with known ground truth.
    Synth(SynthArgs),
    /// Train the projector and prototypes.
    Train(TrainArgs),
    /// Score a checkpoint (or a k-means baseline) against ground truth.
    Eval(EvalArgs),
    /// Write predicted label maps and indexed-color PNGs.
    Infer(InferArgs),
    /// Histogram of pairwise label penalties under the teacher.
    Diag(DiagArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of ground-truth classes.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(2..))]
    pub k: u64,
    #[arg(long, default_value_t = 50)]
    pub images: usize,
    /// Square patch grid side.
    #[arg(long, default_value_t = 16)]
    pub grid: usize,
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 8.0)]
    pub region_scale: f64,
    #[arg(long, default_value_t = 0.2)]
    pub min_center_cos: f64,
    /// Make class means mutually orthogonal.
    #[arg(long)]
    pub orthogonal: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path; the loss log goes to `<out>.log.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prototype count (default: ground-truth class count when labels exist, else 27).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub dim_d: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_projector: Option<f64>,
    #[arg(long)]
    pub lr_prototypes: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub b1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub b2: Option<f64>,
    /// `sum` or `mean`.
    #[arg(long)]
    pub reduction: Option<String>,
    /// Any extra `key=value` override.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub disable_smooth: bool,
    #[arg(long)]
    pub disable_across: bool,
    #[arg(long)]
    pub disable_data: bool,
    /// Single-threaded per-image work with fixed reduction order.
    #[arg(long, conflicts_with = "parallel")]
    pub deterministic: bool,
    /// Per-image work on the thread pool (reduction order stays fixed).
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Kmeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UpsamplingArg {
    Bilinear,
    Nearest,
}

impl From<UpsamplingArg> for Upsampling {
    fn from(u: UpsamplingArg) -> Self {
        match u {
            UpsamplingArg::Bilinear => Upsampling::Bilinear,
            UpsamplingArg::Nearest => Upsampling::Nearest,
        }
    }
}

#[derive(Debug, Args)]
pub struct CrfArgs {
    /// Refine predictions with the dense CRF.
    #[arg(long)]
    pub crf: bool,
    /// `key = value` file of CRF keys; flags take precedence.
    #[arg(long)]
    pub crf_config: Option<PathBuf>,
    #[arg(long)]
    pub crf_iterations: Option<usize>,
    #[arg(long)]
    pub w_appearance: Option<f64>,
    #[arg(long)]
    pub w_smooth: Option<f64>,
    #[arg(long)]
    pub theta_alpha: Option<f64>,
    #[arg(long)]
    pub theta_beta: Option<f64>,
    #[arg(long)]
    pub theta_gamma: Option<f64>,
    /// Directory of RGB PNG guide images, one per record in sorted name order.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = UpsamplingArg::Bilinear)]
    pub upsampling: UpsamplingArg,
}

impl CrfArgs {
    fn params(&self) -> Result<Option<CrfParams>> {
        if !self.crf {
            return Ok(None);
        }
        let mut p = CrfParams::default();
        if let Some(path) = &self.crf_config {
            for (k, v) in read_config(path)? {
                p.set(&k, &v)?;
            }
        }
        let overrides = [
            ("crf_iterations", self.crf_iterations.map(|v| v.to_string())),
            ("w_appearance", self.w_appearance.map(|v| v.to_string())),
            ("w_smooth", self.w_smooth.map(|v| v.to_string())),
            ("theta_alpha", self.theta_alpha.map(|v| v.to_string())),
            ("theta_beta", self.theta_beta.map(|v| v.to_string())),
            ("theta_gamma", self.theta_gamma.map(|v| v.to_string())),
        ];
        for (k, v) in overrides {
            if let Some(v) = v {
                p.set(k, &v)?;
            }
        }
        p.validate()?;
        Ok(Some(p))
    }

    fn manifest_pairs(&self, params: Option<&CrfParams>) -> Vec<(String, String)> {
        let mut pairs = vec![
            ("crf".to_string(), self.crf.to_string()),
            ("upsampling".to_string(), format!("{:?}", self.upsampling).to_lowercase()),
        ];
        if let Some(p) = params {
            let values = [
                p.iterations.to_string(),
                p.w_appearance.to_string(),
                p.w_smooth.to_string(),
                p.theta_alpha.to_string(),
                p.theta_beta.to_string(),
                p.theta_gamma.to_string(),
            ];
            pairs.extend(CrfParams::KEYS.iter().map(|k| k.to_string()).zip(values));
        }
        if let Some(dir) = &self.images {
            pairs.push(("images".to_string(), dir.display().to_string()));
        }
        pairs
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Required unless `--baseline` is given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-class IoU CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Cluster count for the baseline (default: ground-truth class count).
    #[arg(long)]
    pub kmeans_k: Option<usize>,
    #[arg(long, default_value_t = 300)]
    pub kmeans_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Expected prototype count; a checkpoint with another count is rejected.
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub crf: CrfArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory: `predictions.smsg`, `NNNNN.png`, `manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub crf: CrfArgs,
}

#[derive(Debug, Args)]
pub struct DiagArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Without a checkpoint, a freshly initialized model is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Histogram CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Prototype count for a fresh model.
    #[arg(long, default_value_t = 27)]
    pub k: usize,
    #[arg(long, default_value_t = 64)]
    pub dim_d: usize,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (including the program name) and runs the command, writing the
/// human-readable report to `out`.
pub fn run_from<I, T, W>(args: I, out: &mut W) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
    W: Write + Send,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::config(e.to_string()))?;
    run(cli, out)
}

pub fn run<W: Write + Send>(cli: Cli, out: &mut W) -> Result<()> {
    match cli.threads {
        Some(0) => Err(Error::config("--threads must be >= 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(format!("--threads: {e}")))?;
            pool.install(|| dispatch(cli.command, out))
        }
        None => dispatch(cli.command, out),
    }
}

fn dispatch<W: Write + Send>(command: Command, out: &mut W) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Infer(a) => cmd_infer(&a, out),
        Command::Diag(a) => cmd_diag(&a, out),
    }
}

pub fn cmd_synth<W: Write>(a: &SynthArgs, out: &mut W) -> Result<()> {
    let cfg = SynthConfig {
        grid_h: a.grid,
        grid_w: a.grid,
        n_images: a.images,
        k_true: a.k as usize,
        channels: a.channels,
        noise_sigma: a.noise,
        min_center_cos: a.min_center_cos,
        region_scale: a.region_scale,
        orthogonal_means: a.orthogonal,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| Error::config(format!("synth flags (--k, --grid, --region-scale): {e}")))?;
    RunManifest::new("synth", Some(a.seed))
        .with_config([
            ("k_true", cfg.k_true.to_string()),
            ("n_images", cfg.n_images.to_string()),
            ("grid_h", cfg.grid_h.to_string()),
            ("grid_w", cfg.grid_w.to_string()),
            ("channels", cfg.channels.to_string()),
            ("noise_sigma", cfg.noise_sigma.to_string()),
            ("min_center_cos", cfg.min_center_cos.to_string()),
            ("region_scale", cfg.region_scale.to_string()),
            ("orthogonal_means", cfg.orthogonal_means.to_string()),
        ])
        .write(&manifest_path(&a.out))?;
    let ds = synth::generate(&cfg)?;
    write_dataset(&a.out, &ds)?;
    writeln!(out, "wrote {} records ({} classes) to {}", ds.len(), cfg.k_true, a.out.display())?;
    Ok(())
}

/// Config file, then explicit flags. `k` falls back to the dataset's class count.
pub fn resolve_train_config(a: &TrainArgs, ds: &FeatureDataset) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut k_set = false;
    let mut apply = |cfg: &mut TrainConfig, key: &str, value: &str| -> Result<()> {
        k_set |= key == "k";
        cfg.set(key, value)
    };
    if let Some(path) = &a.config {
        for (k, v) in read_config(path)? {
            apply(&mut cfg, &k, &v)?;
        }
    }
    let flags = [
        ("iterations", a.iters.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("k", a.k.map(|v| v.to_string())),
        ("dim_d", a.dim_d.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("lr_projector", a.lr_projector.map(|v| v.to_string())),
        ("lr_prototypes", a.lr_prototypes.map(|v| v.to_string())),
        ("tau", a.tau.map(|v| v.to_string())),
        ("alpha", a.alpha.map(|v| v.to_string())),
        ("b1", a.b1.map(|v| v.to_string())),
        ("b2", a.b2.map(|v| v.to_string())),
        ("reduction", a.reduction.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            apply(&mut cfg, k, &v)?;
        }
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        apply(&mut cfg, k.trim(), v.trim())?;
    }
    if a.disable_smooth {
        cfg.disable_smooth_term = true;
    }
    if a.disable_across {
        cfg.disable_across_term = true;
    }
    if a.disable_data {
        cfg.disable_data_term = true;
    }
    if a.deterministic {
        cfg.deterministic = true;
    }
    if a.parallel {
        cfg.deterministic = false;
    }
    if !k_set {
        if let Some(k) = ds.k_gt() {
            cfg.k = k;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `<checkpoint>.log.csv`
pub fn log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".log.csv");
    checkpoint.with_file_name(name)
}

pub fn cmd_train<W: Write>(a: &TrainArgs, out: &mut W) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let cfg = resolve_train_config(a, &ds)?;
    let mut manifest = RunManifest::new("train", Some(cfg.seed)).with_config(cfg.to_pairs());
    manifest.add_input(&a.data)?;
    if let Some(c) = &a.config {
        manifest.add_input(c)?;
    }
    manifest.write(&manifest_path(&a.out))?;

    let (state, log) = Trainer::new(&ds, cfg.clone())?.run()?;
    state.save(&a.out)?;
    fs::write(log_path(&a.out), log.to_csv())?;
    if let Some(last) = log.rows.last() {
        writeln!(
            out,
            "iterations: {}\nsmooth_within: {}\nsmooth_across: {}\ndata: {}\ntotal: {}",
            cfg.iterations, last.smooth_within, last.smooth_across, last.data, last.total
        )?;
    }
    writeln!(out, "checkpoint: {}", a.out.display())?;
    Ok(())
}

fn load_guides(dir: &Path, ds: &FeatureDataset) -> Result<Vec<GuideImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.len() != ds.len() {
        return Err(Error::shape(format!("{} guide images for {} records", paths.len(), ds.len())));
    }
    paths.iter().map(|p| read_rgb_png(p)).collect()
}

/// Reads an 8-bit RGB, RGBA, gray or indexed PNG as a `3 x H x W` intensity array.
pub fn read_rgb_png(path: &Path) -> Result<GuideImage> {
    let mut decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::invalid("png too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let channels = info.color_type.samples();
    let bytes = &buf[..info.buffer_size()];
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let base = (y * w + x) * channels;
        let c = if channels >= 3 { c } else { 0 };
        bytes[base + c] as f64
    }))
}

fn eval_options<'a>(crf: Option<CrfParams>, upsampling: Upsampling, guides: Option<&'a [GuideImage]>) -> EvalOptions<'a> {
    EvalOptions { crf, upsampling, guides }
}

fn load_checkpoint_for(path: &Path, ds: &FeatureDataset) -> Result<ModelState> {
    let state = ModelState::load(path)?;
    if state.channels() != ds.channels {
        return Err(Error::shape(format!(
            "checkpoint expects C = {}, dataset has C = {}",
            state.channels(),
            ds.channels
        )));
    }
    Ok(state)
}

pub fn cmd_eval<W: Write>(a: &EvalArgs, out: &mut W) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let k_gt = ds.k_gt().filter(|_| ds.has_labels()).ok_or(Error::NoGroundTruth)?;
    let crf = a.crf.params()?;
    let mut manifest = RunManifest::new("eval", Some(a.seed)).with_config(a.crf.manifest_pairs(crf.as_ref()));
    manifest.add_input(&a.data)?;

    let metrics = match a.baseline {
        Some(Baseline::Kmeans) => {
            let k = a.kmeans_k.unwrap_or(k_gt);
            manifest = manifest.with_config([
                ("baseline", "kmeans".to_string()),
                ("kmeans_k", k.to_string()),
                ("kmeans_iters", a.kmeans_iters.to_string()),
            ]);
            manifest.write(&manifest_path(&a.out))?;
            evaluator::kmeans_baseline(&ds, k, a.kmeans_iters, a.seed)?
        }
        None => {
            let ck = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::config("--checkpoint is required without --baseline"))?;
            let state = load_checkpoint_for(ck, &ds)?;
            if let Some(k) = a.k {
                if k != state.dim_k() {
                    return Err(Error::shape(format!("checkpoint has K = {}, --k asks for {k}", state.dim_k())));
                }
            }
            manifest.add_input(ck)?;
            let guides = a.crf.images.as_ref().map(|d| load_guides(d, &ds)).transpose()?;
            manifest.write(&manifest_path(&a.out))?;
            let opts = eval_options(crf, a.crf.upsampling.into(), guides.as_deref());
            evaluator::evaluate(&ds, &state, &opts)?
        }
    };
    fs::write(&a.out, metrics.per_class_csv())?;
    write!(out, "{}", metrics.report())?;
    Ok(())
}

/// Fixed 256-color palette (the common bit-interleaved segmentation palette).
pub fn palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(256 * 3);
    for i in 0..256u32 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= (((c >> 0) & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        pal.extend([r, g, b]);
    }
    pal
}

/// Writes an 8-bit indexed-color PNG of `labels` (row-major, values < 256).
pub fn write_indexed_png(path: &Path, labels: &[usize], height: usize, width: usize) -> Result<()> {
    if labels.len() != height * width {
        return Err(Error::shape(format!("{} labels for {height}x{width}", labels.len())));
    }
    let bytes = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} exceeds the 256-color palette"))))
        .collect::<Result<Vec<u8>>>()?;
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette());
    let mut writer = enc.write_header().map_err(|e| Error::invalid(e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::invalid(e.to_string()))?;
    writer.finish().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(())
}

pub fn cmd_infer<W: Write>(a: &InferArgs, out: &mut W) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let state = load_checkpoint_for(&a.checkpoint, &ds)?;
    let crf = a.crf.params()?;
    let guides = a.crf.images.as_ref().map(|d| load_guides(d, &ds)).transpose()?;
    fs::create_dir_all(&a.out)?;
    let mut manifest = RunManifest::new("infer", None).with_config(a.crf.manifest_pairs(crf.as_ref()));
    manifest.add_input(&a.data)?;
    manifest.add_input(&a.checkpoint)?;
    manifest.write(&a.out.join("manifest.json"))?;

    let opts = eval_options(crf, a.crf.upsampling.into(), guides.as_deref());
    let mut records = Vec::with_capacity(ds.len());
    for (i, rec) in ds.records.iter().enumerate() {
        let probs = teacher_assignments(&state, &rec.features_f64())?.0;
        let target = rec.label.as_ref().map_or((rec.grid_h, rec.grid_w), |l| (l.height, l.width));
        let guide = guides.as_ref().map(|g| &g[i]);
        let pred = evaluator::pixel_predictions(&probs, rec, target, guide, &opts)?;
        write_indexed_png(&a.out.join(format!("{i:05}.png")), &pred, target.0, target.1)?;
        let label = LabelMap::new(target.0, target.1, pred.iter().map(|&l| l as i32).collect())?;
        records.push(FeatureRecord { label: Some(label), ..rec.clone() });
    }
    write_dataset(a.out.join("predictions.smsg"), &FeatureDataset::new(ds.channels, records)?)?;
    writeln!(out, "wrote {} predicted maps to {}", ds.len(), a.out.display())?;
    Ok(())
}

pub fn cmd_diag<W: Write>(a: &DiagArgs, out: &mut W) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let mut manifest = RunManifest::new("diag", Some(a.seed)).with_config([("bins", a.bins.to_string())]);
    manifest.add_input(&a.data)?;
    let state = match &a.checkpoint {
        Some(ck) => {
            manifest.add_input(ck)?;
            load_checkpoint_for(ck, &ds)?
        }
        None => {
            manifest = manifest.with_config([
                ("k", a.k.to_string()),
                ("dim_d", a.dim_d.to_string()),
                ("tau", a.tau.to_string()),
            ]);
            ModelState::init(ds.channels, ds.channels, a.dim_d, a.k, a.tau, a.seed)?
        }
    };
    manifest.write(&manifest_path(&a.out))?;
    let hist = dataset_delta_histogram(&ds, &state, a.bins)?;
    fs::write(&a.out, hist.to_csv())?;
    writeln!(
        out,
        "pairs: {}\nnear_zero: {:.6}\nnear_one: {:.6}\nmid: {:.6}",
        hist.total(),
        hist.frac_near_zero(),
        hist.frac_near_one(),
        1.0 - hist.frac_near_zero() - hist.frac_near_one()
    )?;
    Ok(())
}

/// Label-penalty histogram over every image's teacher assignments.
pub fn dataset_delta_histogram(ds: &FeatureDataset, state: &ModelState, bins: usize) -> Result<DeltaHistogram> {
    let mut hist = DeltaHistogram::new(bins)?;
    for rec in &ds.records {
        let a_t = teacher_assignments(state, &rec.features_f64())?;
        hist.merge(&objective::delta_histogram(&a_t, bins)?)?;
    }
    Ok(hist)
}
