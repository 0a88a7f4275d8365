//! Command-line front end: dataset building, training, evaluation and
//! prediction over a folder of frames.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adnet::dataset::{
    build_manifest_with, load_input_file, read_annotations, AreaMode, DatasetRules,
    ImageFolderSource, Preprocess, AREA_THRESHOLD,
};
use adnet::eval::{evaluate, predict};
use adnet::network::{build_config, load_checkpoint, save_checkpoint};
use adnet::training::{format_epoch, train};
use adnet::{
    Checkpoint, ConfigName, DatasetManifest, Model, NetworkSpec, Scale, Split, Tensor,
    TrainingConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Data(adnet::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl From<adnet::Error> for CliError {
    fn from(e: adnet::Error) -> Self {
        use adnet::Error as E;
        match e {
            E::InvalidParameter(m) | E::InvalidConfig(m) => CliError::Usage(m),
            E::InvalidShape(_) | E::InvalidGeometry(_) | E::InvalidGradient(_) => {
                CliError::Internal(e.to_string())
            }
            other => CliError::Data(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "adnet", version, about = "Billboard frame classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Apply the inclusion rules to an annotation file and write a split manifest.
    BuildDataset(BuildDatasetArgs),
    /// Train a configuration on the manifest's training split.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a manifest.
    Evaluate(EvaluateArgs),
    /// Classify every image in a folder of frames.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AreaModeArg {
    Sum,
    Union,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Tab-separated annotation file.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Manifest to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Share of each stratum assigned to training.
    #[arg(long, default_value_t = 0.7)]
    pub split_fraction: f64,
    #[arg(long, default_value_t = AREA_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = AreaModeArg::Sum)]
    pub area_mode: AreaModeArg,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// A, A-LRN, B, C, D or E.
    #[arg(long, default_value = "E")]
    pub config: ConfigName,
    /// `full` (224 px) or `tiny` (32 px, 1/8 widths).
    #[arg(long, default_value = "full")]
    pub scale: Scale,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Image root; defaults to the manifest's directory.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Leading weight layers kept fixed.
    #[arg(long, default_value_t = 5)]
    pub freeze_depth: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Single-threaded kernels; bit-reproducible checkpoints and logs.
    #[arg(long)]
    pub deterministic: bool,
    /// Continue from an existing checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log; defaults to `<out>.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Expected configuration; the checkpoint's own is used when omitted.
    #[arg(long)]
    pub config: Option<ConfigName>,
    #[arg(long)]
    pub scale: Option<Scale>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Folder of frame images.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<ConfigName>,
    #[arg(long)]
    pub scale: Option<Scale>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command. Returns the exit
/// code; diagnostics go to `err`.
pub fn main_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = write!(err, "{}", e.render());
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match run(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::BuildDataset(a) => cmd_build_dataset(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::Predict(a) => cmd_predict(&a, out, err),
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} {} is not a directory",
            path.display()
        )))
    }
}

fn image_root(images: &Option<PathBuf>, manifest: &Path) -> CliResult<PathBuf> {
    let root = match images {
        Some(dir) => dir.clone(),
        None => manifest
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    require_dir(&root, "image folder")?;
    Ok(root)
}

fn target_shape(spec: &NetworkSpec) -> [usize; 3] {
    [
        spec.input_shape[0],
        spec.input_shape[1],
        spec.input_shape[2],
    ]
}

/// The configuration a checkpoint was trained as, checked against any
/// explicit `--config` / `--scale`.
fn spec_for(
    ckpt: &Checkpoint<f32>,
    config: Option<ConfigName>,
    scale: Option<Scale>,
) -> NetworkSpec {
    build_config(config.unwrap_or(ckpt.config), scale.unwrap_or(ckpt.scale))
}

fn emit(out: &mut dyn Write, file: Option<&Path>, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())?;
    if let Some(path) = file {
        std::fs::write(path, text)?;
    }
    Ok(())
}

pub fn cmd_build_dataset(a: &BuildDatasetArgs, out: &mut dyn Write) -> CliResult<()> {
    require_file(&a.annotations, "annotation file")?;
    let images = read_annotations(&a.annotations)?;
    let rules = DatasetRules {
        threshold: a.threshold,
        area_mode: match a.area_mode {
            AreaModeArg::Sum => AreaMode::Sum,
            AreaModeArg::Union => AreaMode::Union,
        },
    };
    let manifest = build_manifest_with(&images, a.split_fraction, a.seed, &rules)?;
    manifest.write(&a.out)?;
    writeln!(
        out,
        "seed={} split_fraction={} images={}",
        a.seed,
        a.split_fraction,
        images.len()
    )?;
    out.write_all(manifest.summary().as_bytes())?;
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    require_file(&a.manifest, "manifest")?;
    if let Some(init) = &a.init {
        require_file(init, "initial checkpoint")?;
    }
    let root = image_root(&a.images, &a.manifest)?;
    let cfg = TrainingConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        freeze_depth: a.freeze_depth,
        seed: a.seed,
        dropout_rate: a.dropout,
        momentum: a.momentum,
        deterministic: a.deterministic,
    };
    cfg.validate()?;
    let spec = build_config(a.model.config, a.model.scale);
    if a.freeze_depth > spec.weight_layer_count() {
        return Err(CliError::Usage(format!(
            "freeze depth {} exceeds the {} weight layers of {}",
            a.freeze_depth,
            spec.weight_layer_count(),
            spec.name
        )));
    }
    writeln!(out, "config={} scale={}", spec.name, spec.scale)?;
    writeln!(out, "{}", cfg.echo())?;

    let manifest = DatasetManifest::read(&a.manifest)?;
    let source = ImageFolderSource::new(root, &manifest, Split::Train, target_shape(&spec));
    let init = match &a.init {
        Some(path) => Some(adnet::network::load_checkpoint_for::<f32>(path, &spec)?),
        None => None,
    };
    writeln!(out, "epoch\tmean_loss\ttrain_acc\tseconds")?;
    let mut echo_err = None;
    let (ckpt, log) = train(&spec, &source, &cfg, init, |e| {
        if let Err(io) = writeln!(out, "{}", format_epoch(e, true)) {
            echo_err.get_or_insert(io);
        }
    })?;
    if let Some(io) = echo_err {
        return Err(io.into());
    }
    save_checkpoint(&ckpt, &a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    let mut text = log.to_text(!a.deterministic);
    text.push_str(&format!("# checkpoint={}\n", a.out.display()));
    std::fs::write(&log_path, text)?;
    writeln!(out, "wrote {} and {}", a.out.display(), log_path.display())?;
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> CliResult<()> {
    require_file(&a.manifest, "manifest")?;
    require_file(&a.checkpoint, "checkpoint")?;
    let root = image_root(&a.images, &a.manifest)?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let ckpt = load_checkpoint::<f32>(&a.checkpoint)?;
    let spec = spec_for(&ckpt, a.config, a.scale);
    let mut model = Model::new(spec.clone(), ckpt)?;
    let source = ImageFolderSource::new(root, &manifest, a.split, target_shape(&spec));
    let report = evaluate(&mut model, &source)?;
    let text = format!(
        "# split={} config={} scale={} samples={} seed={}\n{}",
        a.split,
        spec.name,
        spec.scale,
        report.confusion.total(),
        a.seed,
        report.to_text()
    );
    emit(out, a.out.as_deref(), &text)
}

pub fn cmd_predict(a: &PredictArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    require_dir(&a.frames, "frame folder")?;
    require_file(&a.checkpoint, "checkpoint")?;
    let ckpt = load_checkpoint::<f32>(&a.checkpoint)?;
    let spec = spec_for(&ckpt, a.config, a.scale);
    let mut model = Model::new(spec.clone(), ckpt)?;

    let mut frames: Vec<PathBuf> = std::fs::read_dir(&a.frames)?
        .map(|entry| entry.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file())
        .collect();
    frames.sort_by(|x, y| x.file_name().cmp(&y.file_name()));
    if frames.is_empty() {
        return Err(CliError::Data(adnet::Error::EmptyDataset(format!(
            "no frames in {}",
            a.frames.display()
        ))));
    }

    let target = target_shape(&spec);
    let pre = Preprocess::default();
    let mut text = String::new();
    let (mut positives, mut negatives, mut skipped) = (0usize, 0usize, 0usize);
    let mut total_ms = 0.0;
    for path in &frames {
        let name = path.file_name().unwrap_or_default().to_string_lossy();
        let image: Tensor = match load_input_file(path, target, &pre) {
            Ok(t) => t,
            Err(e @ adnet::Error::Decode { .. }) => {
                writeln!(err, "warning: skipping {name}: {e}")?;
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let x = image.reshape(&[1, target[0], target[1], target[2]])?;
        let started = Instant::now();
        let pred = predict(&mut model, &x)?;
        total_ms += started.elapsed().as_secs_f64() * 1e3;
        let label = pred.labels[0];
        match label {
            adnet::Label::Billboard => positives += 1,
            adnet::Label::NoBillboard => negatives += 1,
        }
        text.push_str(&format!(
            "{name}\t{label}\t{:.6}\n",
            pred.probabilities.data()[1]
        ));
    }
    let scored = positives + negatives;
    if scored == 0 {
        return Err(CliError::Data(adnet::Error::EmptyDataset(format!(
            "none of the {} files in {} could be decoded",
            frames.len(),
            a.frames.display()
        ))));
    }
    text.push_str(&format!(
        "# frames={scored} billboard={positives} no-billboard={negatives} skipped={skipped} mean_ms={:.3} config={} scale={} seed={}\n",
        total_ms / scored as f64,
        spec.name,
        spec.scale,
        a.seed
    ));
    emit(out, a.out.as_deref(), &text)
}
