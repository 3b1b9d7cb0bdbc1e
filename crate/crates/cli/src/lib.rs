//! The `grasp` command line tool.
//!
//! Every knob lives in a JSON [`RunConfig`] given with `--config` or through
//! the `GRASP_CONFIG` environment variable; flags only name inputs and
//! outputs. Exit codes: 0 success, 2 configuration error, 3 data error, 4
//! failed check.

pub mod config;
pub mod dataset;
pub mod overlay;

pub use config::{RunConfig, CONFIG_ENV};
pub use overlay::export_overlay;

// Stdout writes that tolerate a closed pipe.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

use clap::{Parser, Subcommand};
use dataset::io_err;
use grasp_core::autodiff::{decode_checkpoint, encode_checkpoint, kernel_suite};
use grasp_core::detector::{micro_network_gradcheck, Detection, Detector, DetectorError};
use grasp_core::evaluation::{
    fppi_curve, jaccard_sweep, miss_rate_at, split_dataset, AccuracyReport, CurvePoint,
    ImageResult, SplitManifest,
};
use grasp_core::geometry::{GraspRect, DEFAULT_JACCARD_THRESHOLD};
use grasp_core::ingest::{compose_rgd, load_depth, load_rgb, DatasetSample};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Check(_) => 4,
        }
    }
}

impl From<DetectorError> for CliError {
    fn from(e: DetectorError) -> Self {
        match e {
            DetectorError::InvalidConfig(_) | DetectorError::IncompatibleCheckpoint(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Version of the detections JSON layout.
pub const DETECTIONS_SCHEMA_VERSION: u32 = 1;

/// One element of a detections JSON list. `theta` is in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub schema_version: u32,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub class: usize,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            schema_version: DETECTIONS_SCHEMA_VERSION,
            x: d.rect.x,
            y: d.rect.y,
            theta: d.rect.theta,
            w: d.rect.w,
            h: d.rect.h,
            score: d.score,
            class: d.class,
        }
    }
}

impl DetectionRecord {
    pub fn to_detection(&self) -> Result<Detection, CliError> {
        if self.schema_version != DETECTIONS_SCHEMA_VERSION {
            return Err(CliError::Data(format!(
                "unsupported detections schema_version {}",
                self.schema_version
            )));
        }
        Ok(Detection {
            rect: GraspRect::new(self.x, self.y, self.theta, self.w, self.h)
                .map_err(|e| CliError::Data(e.to_string()))?,
            score: self.score,
            class: self.class,
        })
    }
}

pub fn detections_json(dets: &[Detection]) -> String {
    let records: Vec<DetectionRecord> = dets.iter().map(DetectionRecord::from).collect();
    serde_json::to_string_pretty(&records).expect("detections serialize") + "\n"
}

pub fn parse_detections_json(text: &str) -> Result<Vec<Detection>, CliError> {
    let records: Vec<DetectionRecord> =
        serde_json::from_str(text).map_err(|e| CliError::Data(format!("detections: {e}")))?;
    records.iter().map(DetectionRecord::to_detection).collect()
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("threshold,fppi,miss_rate\n");
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.fppi, p.miss_rate).expect("string write");
    }
    out
}

#[derive(Parser, Debug)]
#[command(name = "grasp", version, about = "Multi-object, multi-grasp detection")]
struct Cli {
    /// Run configuration (JSON); defaults to $GRASP_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a dataset directory and report label counts and skipped rectangles.
    Validate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report path; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write augmented copies of every sample to a new dataset directory.
    Augment {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic bar dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training side of the configured split.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Per-iteration loss CSV.
        #[arg(long)]
        metrics: PathBuf,
        /// Split manifest; defaults to the checkpoint path with `.split.json` appended.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Detect grasps in one image.
    Detect {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// SVG overlay of the detections.
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Positive rectangles drawn on the overlay.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Top-1 accuracy over the Jaccard sweep on the test side of the split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write `<id>.json` detections per evaluated image here.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Evaluate every image instead of the test side.
        #[arg(long)]
        all: bool,
    },
    /// Miss rate against false positives per image from saved predictions.
    Curve {
        /// Directory of `<id>.json` detection lists.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of `<id>cpos.txt` ground truth files.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every kernel and a micro network.
    Gradcheck,
    /// Print the default run configuration.
    Defaults,
}

/// Runs the tool and returns the process exit code. Errors go to standard
/// error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("grasp: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Command::Defaults = cli.command {
        out!("{}", RunConfig::defaults_json());
        return Ok(());
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Validate { data, out } => {
            let report = dataset::validate(&data_dir(&cfg, data)?)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            match out {
                Some(p) => write(&p, text.as_bytes())?,
                None => out!("{}", text.trim_end()),
            }
            if let Some(first) = report.errors.first() {
                return Err(CliError::Data(format!(
                    "{} of {} samples failed to load, first {}: {}",
                    report.errors.len(),
                    report.samples,
                    first.id,
                    first.error
                )));
            }
            Ok(())
        }
        Command::Augment { data, out } => augment(&cfg, &data_dir(&cfg, data)?, &out),
        Command::Synth { out } => dataset::write_synthetic(&out, cfg.synth_count, &cfg.synth, cfg.seed),
        Command::Train {
            data,
            checkpoint,
            metrics,
            manifest,
        } => {
            let checkpoint = checkpoint_path(&cfg, checkpoint)?;
            let manifest = manifest.unwrap_or_else(|| {
                let mut p = checkpoint.clone().into_os_string();
                p.push(".split.json");
                PathBuf::from(p)
            });
            train(&cfg, &data_dir(&cfg, data)?, &checkpoint, &metrics, &manifest)
        }
        Command::Detect {
            image,
            depth,
            checkpoint,
            out,
            overlay,
            gt,
        } => {
            let det = load_detector(&cfg, &checkpoint_path(&cfg, checkpoint)?)?;
            let rgb = load_rgb(&image).map_err(|e| CliError::Data(e.to_string()))?;
            let d = load_depth(&depth, rgb.width, rgb.height).map_err(|e| CliError::Data(e.to_string()))?;
            let rgd = compose_rgd(&rgb, &d).map_err(|e| CliError::Data(e.to_string()))?;
            let sample = DatasetSample {
                rgd,
                rgb: Some(rgb),
                positives: Vec::new(),
                negatives: Vec::new(),
                source_id: String::new(),
            };
            let dets = det.detect_sample(&sample, cfg.eval.score_threshold, cfg.eval.max_detections)?;
            write(&out, detections_json(&dets).as_bytes())?;
            if let Some(svg_path) = overlay {
                let gts = match gt {
                    Some(p) => read_rects(&p)?,
                    None => Vec::new(),
                };
                let svg = export_overlay(sample.rgd.width, sample.rgd.height, &dets, &gts, None);
                write(&svg_path, svg.as_bytes())?;
            }
            Ok(())
        }
        Command::Eval {
            data,
            checkpoint,
            out,
            predictions,
            all,
        } => evaluate(
            &cfg,
            &data_dir(&cfg, data)?,
            &checkpoint_path(&cfg, checkpoint)?,
            &out,
            predictions.as_deref(),
            all,
        ),
        Command::Curve { pred, gt, out } => curve(&cfg, &pred, &gt, &out),
        Command::Gradcheck => gradcheck(),
        Command::Defaults => unreachable!("handled above"),
    }
}

fn data_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.paths.dataset.clone())
        .ok_or_else(|| CliError::Config("no dataset: pass --data or set paths.dataset".into()))
}

fn checkpoint_path(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.paths.checkpoint.clone()).ok_or_else(|| {
        CliError::Config("no checkpoint: pass --checkpoint or set paths.checkpoint".into())
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_rects(path: &Path) -> Result<Vec<GraspRect>, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let file = grasp_core::ingest::parse_rect_file(&bytes)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(file
        .polygons
        .iter()
        .filter_map(|p| grasp_core::geometry::polygon_to_rect(p).ok())
        .collect())
}

fn load_detector(cfg: &RunConfig, path: &Path) -> Result<Detector, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let params = decode_checkpoint(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(Detector::from_params(cfg.network.clone(), params)?)
}

fn augment(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let files = dataset::scan(data)?;
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no samples", data.display())));
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut objects = String::new();
    for (stream, f) in files.iter().enumerate() {
        let (s, _) = dataset::load(f)?;
        let copies = grasp_core::augment::augment_copies(&s, &cfg.augment, stream as u64)
            .map_err(|e| CliError::Data(format!("{}: {e}", f.id)))?;
        for (k, c) in copies.iter().enumerate() {
            let id = format!("{}_{k:03}", f.id);
            dataset::write_sample(out, &id, c)?;
            writeln!(objects, "{id},{}", f.id).expect("string write");
        }
    }
    let objects_path = out.join("objects.csv");
    let source_objects = data.join("objects.csv");
    if source_objects.exists() {
        // copies inherit the object of their source image
        let ids: Vec<String> = files.iter().map(|f| f.id.clone()).collect();
        let map = dataset::object_ids(data, &ids)?;
        objects = objects
            .lines()
            .map(|l| {
                let (id, src) = l.split_once(',').expect("written above");
                let obj = map.iter().find(|(i, _)| i == src).map(|(_, o)| o.as_str()).unwrap_or(src);
                format!("{id},{obj}\n")
            })
            .collect();
    }
    write(&objects_path, objects.as_bytes())
}

fn split(cfg: &RunConfig, data: &Path, samples: &[DatasetSample]) -> Result<SplitManifest, CliError> {
    let ids: Vec<String> = samples.iter().map(|s| s.source_id.clone()).collect();
    let items = dataset::object_ids(data, &ids)?;
    split_dataset(&items, cfg.split, cfg.test_fraction, cfg.seed)
        .map_err(|e| CliError::Data(e.to_string()))
}

fn pick<'a>(samples: &'a [DatasetSample], ids: &[String]) -> Vec<&'a DatasetSample> {
    samples
        .iter()
        .filter(|s| ids.binary_search(&s.source_id).is_ok())
        .collect()
}

fn train(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    metrics: &Path,
    manifest: &Path,
) -> Result<(), CliError> {
    let (samples, _) = dataset::load_all(data)?;
    let split = split(cfg, data, &samples)?;
    write(
        manifest,
        (serde_json::to_string_pretty(&split).expect("manifest serializes") + "\n").as_bytes(),
    )?;
    let train_set: Vec<DatasetSample> = pick(&samples, &split.train).into_iter().cloned().collect();
    let mut det = Detector::new(cfg.network.clone(), cfg.seed)?;
    let mut csv = String::from("epoch,iteration,lr,loss_gpn,loss_gcr,loss_total\n");
    let report = det.train(&train_set, &cfg.train_config(), |m| {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            m.epoch, m.iteration, m.lr, m.loss_gpn, m.loss_gcr, m.loss_total
        )
        .expect("string write");
    })?;
    for e in &report.epochs {
        match e.top1 {
            Some(t) => eprintln!("epoch {}: mean loss {:.4}, train top-1 {:.3}", e.epoch, e.mean_loss, t),
            None => eprintln!("epoch {}: mean loss {:.4}", e.epoch, e.mean_loss),
        }
    }
    if report.skipped_samples > 0 {
        eprintln!("skipped {} samples without positive grasps", report.skipped_samples);
    }
    write(metrics, csv.as_bytes())?;
    write(checkpoint, &encode_checkpoint(det.params()))
}

fn evaluate(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    predictions: Option<&Path>,
    all: bool,
) -> Result<(), CliError> {
    let det = load_detector(cfg, checkpoint)?;
    let (samples, _) = dataset::load_all(data)?;
    let (name, chosen) = if all {
        ("all".to_string(), samples.iter().collect::<Vec<_>>())
    } else {
        let split = split(cfg, data, &samples)?;
        if split.test.is_empty() {
            return Err(CliError::Config("the test split is empty; raise test_fraction or pass --all".into()));
        }
        (cfg.split.name().to_string(), pick(&samples, &split.test))
    };
    let mut results = Vec::with_capacity(chosen.len());
    for s in chosen {
        let dets = det.detect_sample(s, cfg.eval.score_threshold, cfg.eval.max_detections)?;
        if let Some(dir) = predictions {
            write(&dir.join(format!("{}.json", s.source_id)), detections_json(&dets).as_bytes())?;
        }
        results.push(ImageResult {
            image_id: s.source_id.clone(),
            detections: dets,
            ground_truth: s.positives.clone(),
        });
    }
    let n_images = results.len();
    let reports: Vec<AccuracyReport> = jaccard_sweep(&results, &cfg.eval.jaccard_thresholds)
        .map_err(|e| CliError::Data(e.to_string()))?
        .into_iter()
        .map(|(j, accuracy)| AccuracyReport {
            split: name.clone(),
            jaccard_threshold: j,
            angle_threshold: cfg.eval.angle_threshold,
            accuracy,
            n_images,
        })
        .collect();
    for r in &reports {
        out!("{} J>{:.2}: {:.1}% of {} images", r.split, r.jaccard_threshold, 100.0 * r.accuracy, r.n_images);
    }
    write(
        out,
        (serde_json::to_string_pretty(&reports).expect("report serializes") + "\n").as_bytes(),
    )
}

fn curve(cfg: &RunConfig, pred: &Path, gt: &Path, out: &Path) -> Result<(), CliError> {
    let gts = dataset::ground_truth_dir(gt)?;
    if gts.is_empty() {
        return Err(CliError::Data(format!("{}: no ground truth files", gt.display())));
    }
    let mut results = Vec::with_capacity(gts.len());
    for (id, rects) in gts {
        let path = pred.join(format!("{id}.json"));
        let detections = if path.exists() {
            parse_detections_json(&fs::read_to_string(&path).map_err(|e| io_err(&path, e))?)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        } else {
            Vec::new()
        };
        results.push(ImageResult {
            image_id: id,
            detections,
            ground_truth: rects,
        });
    }
    let points = fppi_curve(&results, None, DEFAULT_JACCARD_THRESHOLD, cfg.eval.angle_threshold)
        .map_err(|e| CliError::Data(e.to_string()))?;
    out!("miss rate at 1 FPPI: {:.3}", miss_rate_at(&points, 1.0));
    write(out, curve_csv(&points).as_bytes())
}

fn gradcheck() -> Result<(), CliError> {
    const KERNEL_TOL: f64 = 1e-4;
    const NETWORK_TOL: f64 = 1e-3;
    let checks = kernel_suite(0).map_err(|e| CliError::Check(e.to_string()))?;
    let network = micro_network_gradcheck(0).map_err(|e| CliError::Check(e.to_string()))?;
    let mut failed = Vec::new();
    out!("{:<24} {:>12}  status", "kernel", "max_rel_err");
    let rows = checks
        .iter()
        .map(|c| (c.kernel, c.report.max_rel_error, KERNEL_TOL))
        .chain([("micro_network", network.max_rel_error, NETWORK_TOL)]);
    for (name, err, tol) in rows {
        let ok = err < tol;
        out!("{name:<24} {err:>12.3e}  {}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}
