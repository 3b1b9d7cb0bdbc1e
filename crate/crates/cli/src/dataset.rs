//! On-disk dataset layout.
//!
//! A dataset directory holds, per image id, the color image `<id>r.ppm`, the
//! depth as `<id>d.pgm` or an ASCII point cloud `<id>.txt`, positive grasps
//! in `<id>cpos.txt` and optionally negative grasps in `<id>cneg.txt`. An
//! optional `objects.csv` with lines `image_id,object_id` names the object in
//! each image; without it every image is its own object.

use crate::CliError;
use grasp_core::detector::synth::{bar_scenes, SynthConfig};
use grasp_core::geometry::GraspRect;
use grasp_core::ingest::{
    load_sample, write_pgm8, write_ppm, write_rect_file, DatasetSample, IngestReport, RgbImage,
};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleFiles {
    pub id: String,
    pub image: PathBuf,
    pub depth: PathBuf,
    pub positives: PathBuf,
    pub negatives: PathBuf,
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Every sample in `dir`, ordered by id.
pub fn scan(dir: &Path) -> Result<Vec<SampleFiles>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let name = entry.map_err(|e| io_err(dir, e))?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix("r.ppm")) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids
        .into_iter()
        .map(|id| {
            let pgm = dir.join(format!("{id}d.pgm"));
            let depth = if pgm.exists() {
                pgm
            } else {
                dir.join(format!("{id}.txt"))
            };
            SampleFiles {
                image: dir.join(format!("{id}r.ppm")),
                depth,
                positives: dir.join(format!("{id}cpos.txt")),
                negatives: dir.join(format!("{id}cneg.txt")),
                id,
            }
        })
        .collect())
}

pub fn load(files: &SampleFiles) -> Result<(DatasetSample, IngestReport), CliError> {
    let (mut s, report) = load_sample(
        &files.image,
        &files.depth,
        &files.positives,
        Some(&files.negatives),
    )
    .map_err(|e| CliError::Data(e.to_string()))?;
    s.source_id = files.id.clone();
    Ok((s, report))
}

/// Loads the whole directory, failing on the first unreadable sample.
pub fn load_all(dir: &Path) -> Result<(Vec<DatasetSample>, IngestReport), CliError> {
    let files = scan(dir)?;
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no samples", dir.display())));
    }
    let mut total = IngestReport::default();
    let mut out = Vec::with_capacity(files.len());
    for f in &files {
        let (s, r) = load(f)?;
        total.merge(&r);
        out.push(s);
    }
    Ok((out, total))
}

/// `image id -> object id` from `objects.csv`, or the identity when absent.
pub fn object_ids(dir: &Path, ids: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let path = dir.join("objects.csv");
    let mut map = BTreeMap::new();
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (img, obj) = line.split_once(',').ok_or_else(|| {
                CliError::Data(format!("{}: line {}: expected image,object", path.display(), n + 1))
            })?;
            map.insert(img.trim().to_string(), obj.trim().to_string());
        }
    }
    Ok(ids
        .iter()
        .map(|id| (id.clone(), map.get(id).cloned().unwrap_or_else(|| id.clone())))
        .collect())
}

/// Writes a sample in the directory layout. Depth is stored as the 8-bit
/// depth channel of the RGD image, so zero still marks missing depth.
pub fn write_sample(dir: &Path, id: &str, s: &DatasetSample) -> Result<(), CliError> {
    let (w, h) = (s.rgd.width, s.rgd.height);
    let rgb = match &s.rgb {
        Some(img) => img.clone(),
        None => RgbImage::new(w, h, s.rgd.data.clone()).map_err(|e| CliError::Data(e.to_string()))?,
    };
    let depth: Vec<u8> = s.rgd.data.chunks_exact(3).map(|p| p[2]).collect();
    let put = |name: String, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| io_err(&p, e))
    };
    put(format!("{id}r.ppm"), &write_ppm(&rgb))?;
    put(format!("{id}d.pgm"), &write_pgm8(w, h, &depth))?;
    put(format!("{id}cpos.txt"), write_rect_file(&s.positives).as_bytes())?;
    if !s.negatives.is_empty() {
        put(format!("{id}cneg.txt"), write_rect_file(&s.negatives).as_bytes())?;
    }
    Ok(())
}

/// Synthetic bar scenes written as a dataset directory.
pub fn write_synthetic(dir: &Path, count: usize, cfg: &SynthConfig, seed: u64) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for s in bar_scenes(cfg, seed, "bar").take(count) {
        write_sample(dir, &s.source_id, &s)?;
    }
    Ok(())
}

/// Counts written by the `validate` command.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub positives: usize,
    pub negatives: usize,
    pub skipped: IngestReport,
    pub skipped_total: usize,
    pub errors: Vec<SampleError>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleError {
    pub id: String,
    pub error: String,
}

/// Parses every sample without touching the files.
pub fn validate(dir: &Path) -> Result<ValidationReport, CliError> {
    let mut report = ValidationReport::default();
    for f in scan(dir)? {
        report.samples += 1;
        match load(&f) {
            Ok((s, r)) => {
                report.positives += s.positives.len();
                report.negatives += s.negatives.len();
                report.skipped.merge(&r);
            }
            Err(e) => report.errors.push(SampleError {
                id: f.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    report.skipped_total = report.skipped.total();
    Ok(report)
}

/// Ground truth rectangles keyed by id from the `<id>cpos.txt` files of `dir`.
/// Groups that are not rectangles are skipped.
pub fn ground_truth_dir(dir: &Path) -> Result<BTreeMap<String, Vec<GraspRect>>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let Some(id) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix("cpos.txt"))
            .map(str::to_string)
        else {
            continue;
        };
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        let file = grasp_core::ingest::parse_rect_file(&bytes)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let rects = file
            .polygons
            .iter()
            .filter_map(|p| grasp_core::geometry::polygon_to_rect(p).ok())
            .collect();
        out.insert(id, rects);
    }
    Ok(out)
}
