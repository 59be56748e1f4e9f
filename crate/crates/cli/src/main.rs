//! Command-line interface: dataset generation, annotation conversion,
//! training, prediction, evaluation, and the symmetry-recovery check.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or unreadable config),
//! 2 data error (malformed or missing data files), 3 numeric failure.

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rotodet::config::{SymmetryConfig, TrainConfig, TrainMode};
use rotodet::dataio::{self, AnnFormat, AnnotationSet, DegradeTarget, ImageDetections};
use rotodet::raster::Raster;
use rotodet::synth::SceneSpec;
use rotodet::trainer;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rotodet", version, about = "Oriented object detection from point, hbox, rbox, or mixed labels")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (images + annotations).
    GenData(GenDataArgs),
    /// Convert annotations between formats, degrade label kinds, add noise.
    Convert(ConvertArgs),
    /// Train a detector from a config file.
    Train(TrainArgs),
    /// Run inference over a directory of images.
    Predict(PredictArgs),
    /// Evaluate detections against ground truth.
    Eval(EvalArgs),
    /// Empirical symmetry-recovery check (consistency losses only).
    VerifySymmetry(VerifySymArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Optional TOML with `train_images`, `test_images`, and a `[scene]`
    /// section; defaults are used otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the number of training images.
    #[arg(long)]
    train: Option<usize>,
    /// Override the number of test images.
    #[arg(long)]
    test: Option<usize>,
    /// Also export DOTA-convention text annotations.
    #[arg(long)]
    dota: bool,
}

#[derive(Args)]
struct ConvertArgs {
    /// Input annotations (internal TOML file, or a directory of DOTA text
    /// files with --format dota-txt).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "internal")]
    format: CliFormat,
    /// Class list (required for dota-txt input), comma separated.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Degrade labels to this kind before writing.
    #[arg(long, value_enum)]
    to: Option<CliTarget>,
    /// Annotation-noise level, in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    /// Output format.
    #[arg(long, value_enum, default_value = "internal")]
    output_format: CliFormat,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliFormat {
    Internal,
    DotaTxt,
}

impl From<CliFormat> for AnnFormat {
    fn from(f: CliFormat) -> Self {
        match f {
            CliFormat::Internal => AnnFormat::Internal,
            CliFormat::DotaTxt => AnnFormat::DotaTxt,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliTarget {
    Hbox,
    Point,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the supervision mode from the config.
    #[arg(long)]
    mode: Option<String>,
    /// Override the RNG seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint directory produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of PNG images.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    score_thresh: Option<f64>,
    #[arg(long)]
    nms_thresh: Option<f64>,
    /// Also write overlay images with detection outlines.
    #[arg(long)]
    overlay: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of per-class detection files written by `predict`.
    #[arg(long)]
    dets: PathBuf,
    /// Ground-truth annotations.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "internal")]
    gt_format: CliFormat,
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
}

#[derive(Args)]
struct VerifySymArgs {
    /// Optional TOML config; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Run the asymmetric control group instead of symmetric shapes.
    #[arg(long)]
    control: bool,
}

enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

fn data_err(e: rotodet::Error) -> CliError {
    match e {
        rotodet::Error::Numeric(m) => CliError::Numeric(m),
        other => CliError::Data(other.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.cmd {
        Cmd::GenData(args) => gen_data(args),
        Cmd::Convert(args) => convert(args),
        Cmd::Train(args) => train(args),
        Cmd::Predict(args) => predict(args),
        Cmd::Eval(args) => eval(args),
        Cmd::VerifySymmetry(args) => verify_symmetry(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

#[derive(Deserialize)]
#[serde(default)]
struct GenDataConfig {
    train_images: usize,
    test_images: usize,
    scene: SceneSpec,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            train_images: 2000,
            test_images: 500,
            scene: SceneSpec::default(),
        }
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let mut cfg: GenDataConfig = match &args.config {
        Some(p) => read_config(p)?,
        None => GenDataConfig::default(),
    };
    if let Some(n) = args.train {
        cfg.train_images = n;
    }
    if let Some(n) = args.test {
        cfg.test_images = n;
    }

    for (split, count, tag) in [
        ("train", cfg.train_images, 1u64),
        ("test", cfg.test_images, 2u64),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(
            args.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag),
        );
        let (images, anns) =
            rotodet::synth::gen_scene_split(&cfg.scene, count, &mut rng).map_err(data_err)?;
        let dir = args.out.join(split);
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| CliError::Data(e.to_string()))?;
        for (img, ann) in images.iter().zip(&anns.images) {
            img.save_png(&img_dir.join(format!("{}.png", ann.name)))
                .map_err(data_err)?;
        }
        dataio::save_annotations(&anns, &dir.join("annotations.toml"), AnnFormat::Internal)
            .map_err(data_err)?;
        if args.dota {
            dataio::save_annotations(&anns, &dir.join("labelTxt"), AnnFormat::DotaTxt)
                .map_err(data_err)?;
        }
        println!("wrote {count} {split} images to {}", dir.display());
    }
    Ok(())
}

fn convert(args: ConvertArgs) -> Result<(), CliError> {
    let classes = if args.classes.is_empty() {
        None
    } else {
        Some(args.classes.clone())
    };
    let mut set = dataio::load_annotations(&args.input, args.format.into(), classes.as_deref())
        .map_err(data_err)?;
    if let Some(target) = args.to {
        let target = match target {
            CliTarget::Hbox => DegradeTarget::Hbox,
            CliTarget::Point => DegradeTarget::Point,
        };
        set = dataio::degrade(&set, target).map_err(data_err)?;
    }
    if args.noise_sigma > 0.0 {
        if !(0.0..1.0).contains(&args.noise_sigma) {
            return Err(CliError::Usage("--noise-sigma must be in [0, 1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        set = dataio::inject_noise(&set, args.noise_sigma, &mut rng).map_err(data_err)?;
    }
    dataio::save_annotations(&set, &args.output, args.output_format.into()).map_err(data_err)?;
    println!(
        "wrote {} images ({} instances) to {}",
        set.images.len(),
        set.images.iter().map(|i| i.instances.len()).sum::<usize>(),
        args.output.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = TrainConfig::from_path(&args.config).map_err(|e| match e {
        rotodet::Error::Io(e) => {
            CliError::Usage(format!("cannot read config {}: {e}", args.config.display()))
        }
        other => CliError::Usage(other.to_string()),
    })?;
    if let Some(mode) = &args.mode {
        cfg.mode = mode
            .parse::<TrainMode>()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let (report, _) = trainer::train(&cfg, Some(&args.out)).map_err(data_err)?;
    for line in &report.metrics_lines {
        println!("{line}");
    }
    println!(
        "final ap50 {:.4} (warnings: {}); checkpoints in {}",
        report.final_ap50,
        report.warnings,
        args.out.display()
    );
    Ok(())
}

/// Draw a rotated-box outline into an image (nearest-pixel stamping along
/// the edges).
fn draw_box(img: &mut Raster, rbox: &rotodet::RBox, color: [f32; 3]) {
    let cs = rbox.corners();
    for i in 0..4 {
        let a = cs[i];
        let b = cs[(i + 1) % 4];
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let steps = (len * 2.0).ceil() as usize + 1;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = a[0] + t * (b[0] - a[0]);
            let y = a[1] + t * (b[1] - a[1]);
            if x < 0.0 || y < 0.0 {
                continue;
            }
            let (xi, yi) = (x as usize, y as usize);
            if xi < img.w && yi < img.h {
                for ch in 0..3 {
                    img.set(ch, xi, yi, color[ch]);
                }
            }
        }
    }
}

const CLASS_COLORS: [[f32; 3]; 6] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.25, 0.45, 1.0],
    [1.0, 1.0, 0.2],
    [1.0, 0.3, 1.0],
    [0.2, 1.0, 1.0],
];

fn predict(args: PredictArgs) -> Result<(), CliError> {
    let (det, meta) = trainer::load_detector(&args.checkpoint).map_err(data_err)?;
    let score_thresh = args.score_thresh.unwrap_or(meta.score_thresh);
    let nms_thresh = args.nms_thresh.unwrap_or(meta.nms_thresh);

    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.images)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.images.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!(
            "no PNG images found in {}",
            args.images.display()
        )));
    }

    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Data(e.to_string()))?;
    let mut all = Vec::with_capacity(paths.len());
    for path in &paths {
        let raster = Raster::load_png(path).map_err(data_err)?;
        let found = trainer::infer(&det, &raster, score_thresh, nms_thresh).map_err(data_err)?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        if args.overlay {
            let mut canvas = raster.clone();
            for d in &found {
                draw_box(
                    &mut canvas,
                    &d.rbox,
                    CLASS_COLORS[d.category % CLASS_COLORS.len()],
                );
            }
            canvas
                .save_png(&args.out.join(format!("{name}_overlay.png")))
                .map_err(data_err)?;
        }
        all.push(ImageDetections {
            name,
            detections: found,
        });
    }
    dataio::write_detections(&all, &meta.classes, &args.out).map_err(data_err)?;
    println!(
        "wrote detections for {} images to {}",
        all.len(),
        args.out.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let classes = if args.classes.is_empty() {
        None
    } else {
        Some(args.classes.clone())
    };
    let gts: AnnotationSet =
        dataio::load_annotations(&args.gt, args.gt_format.into(), classes.as_deref())
            .map_err(data_err)?;
    let dets = dataio::read_detections(&args.dets, &gts.classes).map_err(data_err)?;
    let rep = dataio::eval_ap(&dets, &gts, args.iou).map_err(data_err)?;
    for (name, ap) in gts.classes.iter().zip(&rep.per_class) {
        match ap {
            Some(ap) => println!("AP@{:.2} {name}: {ap:.4}", args.iou),
            None => println!("AP@{:.2} {name}: no ground truth", args.iou),
        }
    }
    println!("mAP@{:.2}: {:.4}", args.iou, rep.mean);
    Ok(())
}

fn verify_symmetry(args: VerifySymArgs) -> Result<(), CliError> {
    let mut cfg: SymmetryConfig = match &args.config {
        Some(p) => read_config(p)?,
        None => SymmetryConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    cfg.control |= args.control;

    let report = trainer::verify_symmetry(&cfg).map_err(data_err)?;
    let mut sorted = report.errors.clone();
    sorted.sort_by(f64::total_cmp);
    let med = sorted[sorted.len() / 2];
    let p90 = sorted[sorted.len() * 9 / 10];
    println!(
        "control={} held-out objects={} errors<{:.2}rad: {:.1}% (untrained {:.1}%)",
        cfg.control,
        report.errors.len(),
        cfg.error_threshold,
        report.pass_fraction * 100.0,
        report.untrained_pass_fraction * 100.0
    );
    println!("median error {med:.4} rad, p90 {p90:.4} rad");
    println!("loss trace: {:?}", report.loss_trace);
    println!("passed: {}", report.passed);
    Ok(())
}
