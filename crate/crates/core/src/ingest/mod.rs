//! Reading grasp datasets from disk and building the RGD network input.
//!
//! Color comes from binary PPM, depth from either a P5 PGM or an ASCII PCD
//! cloud, and grasp labels from Cornell-style rectangle files.

mod netpbm;
mod pcd;
mod rects;

pub use netpbm::{parse_netpbm, write_pgm16, write_pgm8, write_ppm, Netpbm};
pub use pcd::{parse_pcd, write_pcd};
pub use rects::{parse_rect_file, write_rect_file, RectFile};

use crate::geometry::{polygon_to_rect, rect_to_polygon, GraspRect};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed line {line}: {content:?}")]
    MalformedLine { line: usize, content: String },
    #[error("annotation has {lines} vertex lines, not a multiple of 4")]
    TruncatedGroup { lines: usize },
    #[error("unsupported PCD encoding {0:?}")]
    UnsupportedEncoding(String),
    #[error("PCD is missing field {0:?}")]
    MissingField(String),
    #[error("point index {index} outside image of {pixels} pixels")]
    IndexOutOfRange { index: String, pixels: usize },
    #[error("bad netpbm magic (only binary P5/P6 are supported)")]
    BadMagic,
    #[error("unsupported maxval {0}")]
    BadMaxval(usize),
    #[error("raster payload too short: expected {expected} bytes, found {found}")]
    ShortPayload { expected: usize, found: usize },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("image is {found}, expected {expected}")]
    DimensionMismatch { expected: String, found: String },
    #[error("expected a {expected} image in {path}")]
    WrongImageKind { expected: &'static str, path: PathBuf },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<IngestError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IngestError {
    fn in_file(self, path: &Path) -> Self {
        IngestError::File {
            path: path.to_path_buf(),
            source: Box::new(self),
        }
    }
}

/// Interleaved three-channel byte raster.
pub trait Raster: Sized {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn data(&self) -> &[u8];
    fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Self;
}

macro_rules! raster_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq)]
        pub struct $name {
            pub width: usize,
            pub height: usize,
            /// Row-major, three bytes per pixel.
            pub data: Vec<u8>,
        }

        impl $name {
            pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, IngestError> {
                if width == 0 || height == 0 || data.len() != 3 * width * height {
                    return Err(IngestError::DimensionMismatch {
                        expected: format!("{} bytes for {width}x{height}", 3 * width * height),
                        found: format!("{} bytes", data.len()),
                    });
                }
                Ok(Self { width, height, data })
            }

            pub fn zeros(width: usize, height: usize) -> Self {
                Self { width, height, data: vec![0; 3 * width * height] }
            }

            pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
                let i = 3 * (y * self.width + x);
                [self.data[i], self.data[i + 1], self.data[i + 2]]
            }
        }

        impl Raster for $name {
            fn width(&self) -> usize {
                self.width
            }
            fn height(&self) -> usize {
                self.height
            }
            fn data(&self) -> &[u8] {
                &self.data
            }
            fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Self {
                debug_assert_eq!(data.len(), 3 * width * height);
                Self { width, height, data }
            }
        }
    };
}

raster_type!(
    /// Color image, channels R, G, B.
    RgbImage
);
raster_type!(
    /// Color image whose blue channel has been replaced by normalized depth.
    RgdImage
);

/// Per-pixel depth with a validity mask. Invalid pixels hold depth 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthImage {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Raw sensor values; zero marks a missing reading.
    pub fn from_raw(width: usize, height: usize, depth: Vec<f64>) -> Self {
        let valid = depth.iter().map(|&d| d != 0.0).collect();
        Self {
            width,
            height,
            depth,
            valid,
        }
    }
}

/// Replaces blue with depth min-max normalized to `[0, 255]` over the
/// image's valid pixels. Missing depth becomes 0; a constant depth maps to 128.
pub fn compose_rgd(rgb: &RgbImage, depth: &DepthImage) -> Result<RgdImage, IngestError> {
    if rgb.width != depth.width || rgb.height != depth.height {
        return Err(IngestError::DimensionMismatch {
            expected: format!("{}x{}", rgb.width, rgb.height),
            found: format!("{}x{}", depth.width, depth.height),
        });
    }
    let valid_depths = depth
        .depth
        .iter()
        .zip(&depth.valid)
        .filter(|(_, v)| **v)
        .map(|(d, _)| *d);
    let (lo, hi) = valid_depths.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
        (lo.min(d), hi.max(d))
    });
    let mut data = rgb.data.clone();
    for (i, px) in data.chunks_exact_mut(3).enumerate() {
        px[2] = if !depth.valid[i] {
            0
        } else if hi > lo {
            (255.0 * (depth.depth[i] - lo) / (hi - lo)).round() as u8
        } else {
            128
        };
    }
    Ok(RgdImage {
        width: rgb.width,
        height: rgb.height,
        data,
    })
}

/// One labeled image.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub rgd: RgdImage,
    /// Original color, kept so the network can be fed RGB instead of RGD.
    pub rgb: Option<RgbImage>,
    pub positives: Vec<GraspRect>,
    pub negatives: Vec<GraspRect>,
    pub source_id: String,
}

/// Counts of labels that did not survive ingestion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct IngestReport {
    /// Vertex groups with NaN/inf coordinates.
    pub non_finite_groups: usize,
    /// Groups that are not rectangles.
    pub non_rectangular: usize,
    /// Rectangles with a corner outside the image.
    pub out_of_bounds: usize,
}

impl IngestReport {
    pub fn total(&self) -> usize {
        self.non_finite_groups + self.non_rectangular + self.out_of_bounds
    }

    pub fn merge(&mut self, other: &IngestReport) {
        self.non_finite_groups += other.non_finite_groups;
        self.non_rectangular += other.non_rectangular;
        self.out_of_bounds += other.out_of_bounds;
    }
}

/// Converts annotation polygons to rectangles, dropping any that are not
/// rectangular or leave the `width x height` frame.
pub fn polygons_to_rects(
    file: &RectFile,
    width: usize,
    height: usize,
    report: &mut IngestReport,
) -> Vec<GraspRect> {
    report.non_finite_groups += file.skipped;
    let mut out = Vec::new();
    for p in &file.polygons {
        match polygon_to_rect(p) {
            Ok(r) if rect_inside(&r, width, height) => out.push(r),
            Ok(_) => report.out_of_bounds += 1,
            Err(_) => report.non_rectangular += 1,
        }
    }
    out
}

/// True when all four corners of `r` lie inside `[0, width] x [0, height]`.
pub fn rect_inside(r: &GraspRect, width: usize, height: usize) -> bool {
    rect_to_polygon(r).vertices.iter().all(|v| {
        (0.0..=width as f64).contains(&v.x) && (0.0..=height as f64).contains(&v.y)
    })
}

fn read(path: &Path) -> Result<Vec<u8>, IngestError> {
    std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads depth from a P5 image or, failing the magic check, an ASCII PCD.
pub fn load_depth(path: &Path, width: usize, height: usize) -> Result<DepthImage, IngestError> {
    let bytes = read(path)?;
    let depth = if bytes.starts_with(b"P5") {
        match parse_netpbm(&bytes).map_err(|e| e.in_file(path))? {
            Netpbm::Gray(d) => d,
            Netpbm::Rgb(_) => unreachable!("P5 decodes to gray"),
        }
    } else {
        parse_pcd(&bytes, width, height).map_err(|e| e.in_file(path))?
    };
    if depth.width != width || depth.height != height {
        return Err(IngestError::DimensionMismatch {
            expected: format!("{width}x{height}"),
            found: format!("{}x{}", depth.width, depth.height),
        }
        .in_file(path));
    }
    Ok(depth)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, IngestError> {
    match parse_netpbm(&read(path)?).map_err(|e| e.in_file(path))? {
        Netpbm::Rgb(img) => Ok(img),
        Netpbm::Gray(_) => Err(IngestError::WrongImageKind {
            expected: "P6 color",
            path: path.to_path_buf(),
        }),
    }
}

/// Loads an image, its depth and its positive/negative annotations.
///
/// A missing negative file yields an empty negative list.
pub fn load_sample(
    image: &Path,
    depth: &Path,
    pos: &Path,
    neg: Option<&Path>,
) -> Result<(DatasetSample, IngestReport), IngestError> {
    let rgb = load_rgb(image)?;
    let depth_img = load_depth(depth, rgb.width, rgb.height)?;
    let rgd = compose_rgd(&rgb, &depth_img)?;
    let mut report = IngestReport::default();

    let pos_file = parse_rect_file(&read(pos)?).map_err(|e| e.in_file(pos))?;
    let positives = polygons_to_rects(&pos_file, rgb.width, rgb.height, &mut report);
    let negatives = match neg {
        Some(p) if p.exists() => {
            let f = parse_rect_file(&read(p)?).map_err(|e| e.in_file(p))?;
            polygons_to_rects(&f, rgb.width, rgb.height, &mut report)
        }
        _ => Vec::new(),
    };
    let source_id = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((
        DatasetSample {
            rgd,
            rgb: Some(rgb),
            positives,
            negatives,
            source_id,
        },
        report,
    ))
}
