//! Command-line surface: `yolors <subcommand> [flags]`.
//!
//! Settings resolve in three layers: built-in defaults, then an optional
//! `--config` file of `key = value` lines under `[section]` headers, then
//! command-line flags.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use yolors::augment::{build_augmented_set, compute_class_frequencies, AugmentConfig, GeometricOp};
use yolors::detector::{count_flops, evaluate_model, predict_all, train, Detector, ModelConfig, Toggles};
use yolors::gradsuite::{gradient_suite, DEFAULT_EPSILON};
use yolors::io::{
    apply_model_config, apply_synth_config, default_out_dir, generate_synthetic, generate_synthetic_to, load_config,
    load_dataset, render_detections, run_ablation, write_dataset, ConfigFile, Dataset, SyntheticDataset,
    SyntheticSpec,
};
use yolors::{Error, RandomSource};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "yolors", version, about = "Desk-scale small-object detector with receptive-field attention fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a detector on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write a class-balanced augmented copy of the training split.
    Augment(AugmentArgs),
    /// Train and evaluate ablation variants across seeds.
    Ablate(AblateArgs),
    /// Draw ground truth (and predictions, given a checkpoint) on an image.
    Render(RenderArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Print the analytic FLOP report.
    Flops(FlopsArgs),
}

#[derive(Debug, Args)]
struct ModelFlags {
    /// Structured-text config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation variant name (full, no-rfaconv, no-bifpn, no-self-attention, no-rfafpn, no-caa, no-acmix).
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, config and log.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate on the validation split every N epochs.
    #[arg(long)]
    eval_every: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file, or a training output directory holding one.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    multiplier: Option<usize>,
    #[arg(long)]
    strength: Option<f64>,
    /// Comma-separated geometric ops (crop, scale, rotate90, hflip, vflip).
    #[arg(long)]
    geometric: Option<String>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Dataset directory; a synthetic set is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated variant names.
    #[arg(long, default_value = "full,no-rfaconv,no-bifpn,no-self-attention,no-rfafpn,no-caa,no-acmix")]
    variants: String,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    data: PathBuf,
    /// Image id from the dataset.
    #[arg(long)]
    image: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score threshold for drawn predictions.
    #[arg(long)]
    conf: Option<f64>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    imbalance: Option<f64>,
    #[arg(long)]
    train_images: Option<usize>,
    #[arg(long)]
    val_images: Option<usize>,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    json: bool,
}

/// Error category printed before the message.
fn category(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::Parse { .. } | Error::OutOfRange { .. } | Error::Json(_) => "parse",
        Error::Data(_) => "data",
        Error::Checkpoint(_) => "checkpoint",
        Error::Diverged { .. } | Error::NonFinite(_) => "numeric",
        Error::InvalidArgument { .. } => "config",
        Error::ShapeMismatch { .. } | Error::InvalidAxis { .. } | Error::NonScalar(_) => "internal",
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error[{}]: {e}", category(&e));
            EXIT_FAILURE
        }
    }
}

type Outcome = yolors::Result<i32>;

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    match cmd {
        Command::Train(a) => cmd_train(a, out, err),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Augment(a) => cmd_augment(a, out),
        Command::Ablate(a) => cmd_ablate(a, out, err),
        Command::Render(a) => cmd_render(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Synth(a) => cmd_synth(a, out),
        Command::Flops(a) => cmd_flops(a, out),
    }
}

fn say(w: &mut dyn Write, text: &str) -> yolors::Result<()> {
    writeln!(w, "{text}").map_err(|e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> yolors::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_config(path: Option<&Path>) -> yolors::Result<ConfigFile> {
    match path {
        Some(p) => load_config(p),
        None => Ok(ConfigFile::default()),
    }
}

fn model_config(flags: &ModelFlags, data: Option<&Dataset>) -> yolors::Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    let conf = read_config(flags.config.as_deref())?;
    apply_model_config(&mut cfg, &conf)?;
    if let Some(d) = data {
        fit_to_dataset(&mut cfg, d)?;
    }
    if let Some(v) = &flags.variant {
        cfg.toggles = Toggles::variant(v)?;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(e) = flags.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = flags.lr {
        cfg.lr = lr;
    }
    if let Some(b) = flags.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Class count and input size follow the dataset.
fn fit_to_dataset(cfg: &mut ModelConfig, data: &Dataset) -> yolors::Result<()> {
    cfg.num_classes = data.num_classes();
    if let Some(img) = data.train.first().or(data.val.first()) {
        if img.width() != img.height() {
            return Err(Error::Data(format!("image {} is not square", img.id)));
        }
        cfg.input_size = img.width();
    }
    Ok(())
}

fn split<'a>(data: &'a Dataset, name: &str) -> yolors::Result<&'a [yolors::data::AnnotatedImage]> {
    match name {
        "train" => Ok(&data.train),
        "val" => Ok(&data.val),
        other => Err(Error::Data(format!("unknown split `{other}` (expected train or val)"))),
    }
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let data = load_dataset(&a.data)?;
    let mut cfg = model_config(&a.model, Some(&data))?;
    if let Some(n) = a.eval_every {
        cfg.eval_every = n;
    }
    let dir = a.out.unwrap_or_else(|| default_out_dir().join("train"));
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    write_file(&dir.join(CONFIG_FILE), &serde_json::to_string_pretty(&cfg)?)?;
    let mut log = Vec::new();
    let val = (!data.val.is_empty()).then_some(&data.val[..]);
    let outcome = train(&data.train, val, &cfg, Some(&mut log))?;
    write_file(&dir.join(LOG_FILE), &String::from_utf8_lossy(&log))?;
    out.write_all(&log).map_err(|e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    })?;
    outcome.model.save(&dir.join(CHECKPOINT_FILE))?;
    say(err, &format!("checkpoint written to {}", dir.join(CHECKPOINT_FILE).display()))?;
    Ok(EXIT_OK)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Outcome {
    let data = load_dataset(&a.data)?;
    let cfg = model_config(&a.model, Some(&data))?;
    let model = Detector::load(&checkpoint_path(&a.checkpoint), &cfg)?;
    let report = evaluate_model(&model, split(&data, &a.split)?)?;
    let json = report.to_json()?;
    match a.out {
        Some(p) => write_file(&p, &json)?,
        None => say(out, &json)?,
    }
    Ok(EXIT_OK)
}

fn cmd_augment(a: AugmentArgs, out: &mut dyn Write) -> Outcome {
    let data = load_dataset(&a.data)?;
    let mut cfg = ModelConfig::default();
    apply_model_config(&mut cfg, &read_config(a.config.as_deref())?)?;
    let mut aug: AugmentConfig = cfg.augment;
    if let Some(m) = a.multiplier {
        aug.multiplier = m;
    }
    if let Some(s) = a.strength {
        aug.strength = s;
    }
    if let Some(g) = &a.geometric {
        aug.geometric = g
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(GeometricOp::parse)
            .collect::<yolors::Result<_>>()?;
    }
    let table = compute_class_frequencies(&data.train)?;
    let set = build_augmented_set(&data.train, &table, &aug, &RandomSource::new(a.seed))?;
    let synthetic = SyntheticDataset {
        classes: data.manifest.classes.clone(),
        train: set.images,
        val: data.val.clone(),
    };
    write_dataset(&a.out, &synthetic, None)?;
    write_file(&a.out.join("augment_manifest.json"), &set.manifest.to_json()?)?;
    say(
        out,
        &format!(
            "wrote {} training images ({} generated) to {}",
            synthetic.train.len(),
            set.manifest.generated.len(),
            a.out.display()
        ),
    )?;
    Ok(EXIT_OK)
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> yolors::Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::InvalidArgument {
                    op: "cli",
                    msg: format!("invalid {what} `{t}`"),
                })
        })
        .collect()
}

fn cmd_ablate(a: AblateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let conf = read_config(a.config.as_deref())?;
    let (train_set, val, classes) = match &a.data {
        Some(dir) => {
            let d = load_dataset(dir)?;
            (d.train, d.val, d.manifest.classes)
        }
        None => {
            let mut spec = SyntheticSpec::default();
            apply_synth_config(&mut spec, &conf)?;
            let d = generate_synthetic(&spec)?;
            (d.train, d.val, d.classes)
        }
    };
    let mut cfg = ModelConfig {
        num_classes: classes.len(),
        ..ModelConfig::default()
    };
    apply_model_config(&mut cfg, &conf)?;
    cfg.num_classes = classes.len();
    if let Some(img) = train_set.first() {
        cfg.input_size = img.width();
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.validate()?;
    let variants: Vec<String> = parse_list("variant", &a.variants)?;
    for v in &variants {
        Toggles::variant(v)?;
    }
    let seeds: Vec<u64> = parse_list("seed", &a.seeds)?;
    let report = run_ablation(&cfg, &variants, &seeds, &train_set, &val, |row| {
        let _ = writeln!(err, "{} seed {}: {} mAP@.5 {:.4}", row.variant, row.seed, row.status, row.map50);
    })?;
    let md = report.to_markdown();
    if let Some(dir) = &a.out {
        write_file(&dir.join("ablation.md"), &md)?;
        write_file(&dir.join("ablation.json"), &report.to_json()?)?;
    }
    out.write_all(md.as_bytes()).map_err(|e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    })?;
    Ok(EXIT_OK)
}

fn cmd_render(a: RenderArgs, out: &mut dyn Write) -> Outcome {
    let data = load_dataset(&a.data)?;
    let img = data
        .train
        .iter()
        .chain(&data.val)
        .find(|im| im.id == a.image)
        .ok_or_else(|| Error::Data(format!("no image with id `{}`", a.image)))?;
    let truths: Vec<_> = img.truths().into_iter().map(|t| t.bbox).collect();
    let dets = match &a.checkpoint {
        Some(ck) => {
            let cfg = model_config(&a.model, Some(&data))?;
            let model = Detector::load(&checkpoint_path(ck), &cfg)?;
            let conf = a.conf.unwrap_or(cfg.conf_threshold);
            let mut all = predict_all(&model, std::slice::from_ref(img))?;
            let mut dets = all.remove(0).detections;
            dets.retain(|d| d.score >= conf);
            dets
        }
        None => Vec::new(),
    };
    render_detections(&img.image, &truths, &dets, &a.out)?;
    say(
        out,
        &format!("{} truths, {} predictions drawn to {}", truths.len(), dets.len(), a.out.display()),
    )?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Outcome {
    let cases = gradient_suite(a.seed, a.epsilon)?;
    let mut worst: f64 = 0.0;
    for c in &cases {
        let verdict = if c.max_rel_error < a.tolerance { "ok" } else { "FAIL" };
        say(out, &format!("{:<28} {:.3e} {verdict}", c.name, c.max_rel_error))?;
        worst = worst.max(c.max_rel_error);
    }
    say(out, &format!("{} cases, worst relative error {worst:.3e}", cases.len()))?;
    Ok(if worst < a.tolerance { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Outcome {
    let mut spec = SyntheticSpec::default();
    apply_synth_config(&mut spec, &read_config(a.config.as_deref())?)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(v) = a.image_size {
        spec.image_size = v;
    }
    if let Some(v) = a.num_classes {
        spec.num_classes = v;
    }
    if let Some(v) = a.imbalance {
        spec.imbalance_ratio = v;
    }
    if let Some(v) = a.train_images {
        spec.train_images = v;
    }
    if let Some(v) = a.val_images {
        spec.val_images = v;
    }
    let dir = a.out.unwrap_or_else(|| default_out_dir().join("data"));
    let manifest = generate_synthetic_to(&spec, &dir)?;
    say(
        out,
        &format!(
            "wrote {} train and {} val images to {}",
            manifest.train.len(),
            manifest.val.len(),
            dir.display()
        ),
    )?;
    Ok(EXIT_OK)
}

fn cmd_flops(a: FlopsArgs, out: &mut dyn Write) -> Outcome {
    let mut cfg = ModelConfig::default();
    apply_model_config(&mut cfg, &read_config(a.config.as_deref())?)?;
    if let Some(v) = &a.variant {
        cfg.toggles = Toggles::variant(v)?;
    }
    let report = count_flops(&cfg)?;
    if a.json {
        say(out, &serde_json::to_string_pretty(&report)?)?;
        return Ok(EXIT_OK);
    }
    for m in &report.modules {
        say(out, &format!("{:<10} {:>12} MACs", m.module, m.macs))?;
    }
    say(out, &format!("total      {:>12} MACs, {} FLOPs", report.total_macs, report.total_flops))?;
    for v in &report.variants {
        say(out, &format!("{:<18} {:>12} FLOPs", v.variant, v.flops))?;
    }
    Ok(EXIT_OK)
}
