//! Crop / rotate / translate / resize augmentation with labels carried
//! through the same transform.
//!
//! Continuous image coordinates put pixel `(i, j)` over `[i, i+1) x [j, j+1)`
//! so its center sits at `(i + 0.5, j + 0.5)`; rectangles use the same frame.

use crate::geometry::{normalize_angle, rect_to_polygon, GraspRect, Point};
use crate::ingest::{DatasetSample, Raster};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("transform is singular (det = {0})")]
    SingularTransform(f64),
    #[error("transform is not a rotation + uniform scale + translation")]
    NonSimilarity,
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
}

/// `p -> linear * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2D {
    pub linear: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl Affine2D {
    pub const IDENTITY: Affine2D = Affine2D {
        linear: [[1.0, 0.0], [0.0, 1.0]],
        translation: [0.0, 0.0],
    };

    pub fn translate(tx: f64, ty: f64) -> Self {
        Self {
            translation: [tx, ty],
            ..Self::IDENTITY
        }
    }

    pub fn scale(s: f64) -> Self {
        Self {
            linear: [[s, 0.0], [0.0, s]],
            translation: [0.0, 0.0],
        }
    }

    /// Rotation by `degrees` (from +x toward +y) about `center`.
    pub fn rotate_about(degrees: f64, center: Point) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let rot = Self {
            linear: [[c, -s], [s, c]],
            translation: [0.0, 0.0],
        };
        Self::translate(-center.x, -center.y)
            .then(&rot)
            .then(&Self::translate(center.x, center.y))
    }

    /// The transform that applies `self` first, then `next`.
    pub fn then(&self, next: &Affine2D) -> Affine2D {
        let a = &next.linear;
        let b = &self.linear;
        let mut linear = [[0.0; 2]; 2];
        for (i, row) in linear.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        let t = next.apply(Point::new(self.translation[0], self.translation[1]));
        Affine2D {
            linear,
            translation: [t.x, t.y],
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.linear;
        Point::new(
            m[0][0] * p.x + m[0][1] * p.y + self.translation[0],
            m[1][0] * p.x + m[1][1] * p.y + self.translation[1],
        )
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.linear;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn inverse(&self) -> Result<Affine2D, AugmentError> {
        let det = self.determinant();
        if !(det.abs() > 1e-9) {
            return Err(AugmentError::SingularTransform(det));
        }
        let m = &self.linear;
        let linear = [
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ];
        let inv = Affine2D {
            linear,
            translation: [0.0, 0.0],
        };
        let t = inv.apply(Point::new(-self.translation[0], -self.translation[1]));
        Ok(Affine2D {
            linear,
            translation: [t.x, t.y],
        })
    }

    /// `(scale, rotation degrees)` when the linear part is a rotation times a
    /// positive uniform scale.
    pub fn similarity(&self) -> Result<(f64, f64), AugmentError> {
        let [[a, b], [c, d]] = self.linear;
        let s = a.hypot(c);
        let tol = 1e-9 * s.max(1.0);
        if !(s > 0.0) || (a - d).abs() > tol || (b + c).abs() > tol {
            return Err(AugmentError::NonSimilarity);
        }
        Ok((s, c.atan2(a).to_degrees()))
    }
}

fn sample_bilinear(data: &[u8], w: usize, h: usize, ch: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let fetch = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            data[3 * (yi as usize * w + xi as usize) + ch] as f64
        }
    };
    let top = fetch(x0, y0) * (1.0 - fx) + fetch(x0 + 1.0, y0) * fx;
    let bottom = fetch(x0, y0 + 1.0) * (1.0 - fx) + fetch(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples `img` so that output pixel `p` takes the bilinear source value at
/// `A^-1(p)`; samples falling outside the source read as zero.
pub fn warp_image<I: Raster>(
    img: &I,
    transform: &Affine2D,
    out_w: usize,
    out_h: usize,
) -> Result<I, AugmentError> {
    let inv = transform.inverse()?;
    let (w, h, src) = (img.width(), img.height(), img.data());
    let mut out = vec![0u8; 3 * out_w * out_h];
    for v in 0..out_h {
        for u in 0..out_w {
            let q = inv.apply(Point::new(u as f64 + 0.5, v as f64 + 0.5));
            if !(q.x > -1.0 && q.y > -1.0 && q.x < w as f64 + 1.0 && q.y < h as f64 + 1.0) {
                continue;
            }
            let base = 3 * (v * out_w + u);
            for ch in 0..3 {
                let val = sample_bilinear(src, w, h, ch, q.x - 0.5, q.y - 0.5);
                out[base + ch] = val.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(I::from_raw(out_w, out_h, out))
}

/// Maps a grasp rectangle through a similarity transform.
pub fn warp_rect(r: &GraspRect, transform: &Affine2D) -> Result<GraspRect, AugmentError> {
    let (s, phi) = transform.similarity()?;
    let c = transform.apply(r.center());
    Ok(GraspRect {
        x: c.x,
        y: c.y,
        theta: normalize_angle(r.theta + phi),
        w: s * r.w,
        h: s * r.h,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// First center crop, pixels.
    pub crop1: usize,
    /// Center crop after rotation, pixels.
    pub crop2: usize,
    /// Translation drawn uniformly from `[-max_translate, max_translate]` per axis.
    pub max_translate: f64,
    /// Rotation drawn uniformly from `[0, rotation_range)` degrees.
    pub rotation_range: f64,
    /// Final square output size.
    pub out_size: usize,
    /// Augmented copies generated per input image.
    pub copies: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop1: 351,
            crop2: 321,
            max_translate: 50.0,
            rotation_range: 360.0,
            out_size: 227,
            copies: 20,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.crop2 == 0 || self.crop2 > self.crop1 {
            return Err(AugmentError::InvalidConfig(format!(
                "need 0 < crop2 <= crop1, got {} and {}",
                self.crop2, self.crop1
            )));
        }
        if self.out_size == 0 {
            return Err(AugmentError::InvalidConfig("out_size must be positive".into()));
        }
        if !(self.max_translate >= 0.0 && self.rotation_range >= 0.0) {
            return Err(AugmentError::InvalidConfig("ranges must be non-negative".into()));
        }
        Ok(())
    }
}

/// The random draws of one augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AugmentDraw {
    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let rotation = if cfg.rotation_range > 0.0 {
            rng.random_range(0.0..cfg.rotation_range)
        } else {
            0.0
        };
        let mut shift = || {
            if cfg.max_translate > 0.0 {
                rng.random_range(-cfg.max_translate..=cfg.max_translate)
            } else {
                0.0
            }
        };
        let tx = shift();
        let ty = shift();
        Self { rotation, tx, ty }
    }
}

/// The five pipeline stages as separate transforms, in application order:
/// crop1, rotate, crop2, translate, resize.
pub fn pipeline_stages(
    cfg: &AugmentConfig,
    src_w: usize,
    src_h: usize,
    draw: &AugmentDraw,
) -> [(Affine2D, usize); 5] {
    let c1 = cfg.crop1 as f64;
    let c2 = cfg.crop2 as f64;
    let crop1 = Affine2D::translate(-(src_w as f64 - c1) / 2.0, -(src_h as f64 - c1) / 2.0);
    let rotate = Affine2D::rotate_about(draw.rotation, Point::new(c1 / 2.0, c1 / 2.0));
    let crop2 = Affine2D::translate(-(c1 - c2) / 2.0, -(c1 - c2) / 2.0);
    let shift = Affine2D::translate(draw.tx, draw.ty);
    let resize = Affine2D::scale(cfg.out_size as f64 / c2);
    [
        (crop1, cfg.crop1),
        (rotate, cfg.crop1),
        (crop2, cfg.crop2),
        (shift, cfg.crop2),
        (resize, cfg.out_size),
    ]
}

/// The whole pipeline as one transform from source to output pixels.
pub fn pipeline_transform(
    cfg: &AugmentConfig,
    src_w: usize,
    src_h: usize,
    draw: &AugmentDraw,
) -> Affine2D {
    pipeline_stages(cfg, src_w, src_h, draw)
        .iter()
        .fold(Affine2D::IDENTITY, |acc, (stage, _)| acc.then(stage))
}

fn outside_frame(r: &GraspRect, size: f64) -> bool {
    rect_to_polygon(r)
        .vertices
        .iter()
        .all(|v| v.x < 0.0 || v.y < 0.0 || v.x > size || v.y > size)
}

/// Applies one random draw of the pipeline to a sample. Inputs smaller than
/// `crop1` are implicitly zero padded.
pub fn augment_sample<R: Rng>(
    s: &DatasetSample,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<DatasetSample, AugmentError> {
    cfg.validate()?;
    let draw = AugmentDraw::sample(cfg, rng);
    apply_draw(s, cfg, &draw)
}

/// Deterministic core of [`augment_sample`].
pub fn apply_draw(
    s: &DatasetSample,
    cfg: &AugmentConfig,
    draw: &AugmentDraw,
) -> Result<DatasetSample, AugmentError> {
    let transform = pipeline_transform(cfg, s.rgd.width, s.rgd.height, draw);
    let size = cfg.out_size;
    let warp_all = |rects: &[GraspRect]| -> Result<Vec<GraspRect>, AugmentError> {
        let mut out = Vec::with_capacity(rects.len());
        for r in rects {
            let w = warp_rect(r, &transform)?;
            if !outside_frame(&w, size as f64) {
                out.push(w);
            }
        }
        Ok(out)
    };
    Ok(DatasetSample {
        rgd: warp_image(&s.rgd, &transform, size, size)?,
        rgb: s
            .rgb
            .as_ref()
            .map(|img| warp_image(img, &transform, size, size))
            .transpose()?,
        positives: warp_all(&s.positives)?,
        negatives: warp_all(&s.negatives)?,
        source_id: s.source_id.clone(),
    })
}

/// `cfg.copies` augmented versions of `s`; copy `i` draws from a stream
/// seeded by `(cfg.seed, stream, i)` so samples can be processed in any order.
pub fn augment_copies(
    s: &DatasetSample,
    cfg: &AugmentConfig,
    stream: u64,
) -> Result<Vec<DatasetSample>, AugmentError> {
    cfg.validate()?;
    (0..cfg.copies)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream);
            rng.set_word_pos(i as u128 * 1024);
            augment_sample(s, cfg, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::RgdImage;

    fn gradient(w: usize, h: usize) -> RgdImage {
        let data = (0..3 * w * h).map(|i| (i * 7 % 251) as u8).collect();
        RgdImage::new(w, h, data).unwrap()
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = gradient(9, 7);
        assert_eq!(warp_image(&img, &Affine2D::IDENTITY, 9, 7).unwrap(), img);
    }

    #[test]
    fn four_quarter_turns_restore() {
        let img = gradient(8, 8);
        let rot = Affine2D::rotate_about(90.0, Point::new(4.0, 4.0));
        let mut cur = img.clone();
        for _ in 0..4 {
            cur = warp_image(&cur, &rot, 8, 8).unwrap();
        }
        for (a, b) in cur.data.iter().zip(&img.data) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn impulse_translates() {
        let mut img = RgdImage::zeros(10, 5);
        img.data[3 * (2 * 10 + 4)] = 200;
        let out = warp_image(&img, &Affine2D::translate(3.0, 0.0), 10, 5).unwrap();
        assert_eq!(out.pixel(7, 2)[0], 200);
        assert_eq!(out.data.iter().filter(|v| **v != 0).count(), 1);
    }

    #[test]
    fn singular_rejected() {
        let a = Affine2D::scale(0.0);
        assert!(matches!(
            warp_image(&gradient(2, 2), &a, 2, 2),
            Err(AugmentError::SingularTransform(_))
        ));
    }

    #[test]
    fn rect_warps() {
        let r = GraspRect::new(10.0, 20.0, 170.0, 8.0, 4.0).unwrap();
        assert_eq!(warp_rect(&r, &Affine2D::IDENTITY).unwrap(), r);
        let rot = Affine2D::rotate_about(30.0, Point::new(0.0, 0.0));
        assert!((warp_rect(&r, &rot).unwrap().theta - 20.0).abs() < 1e-9);
        let s = 227.0 / 321.0;
        let scaled = warp_rect(&r, &Affine2D::scale(s)).unwrap();
        assert!((scaled.w - 8.0 * s).abs() < 1e-12 && (scaled.h - 4.0 * s).abs() < 1e-12);
        let shear = Affine2D {
            linear: [[1.0, 0.5], [0.0, 1.0]],
            translation: [0.0, 0.0],
        };
        assert_eq!(warp_rect(&r, &shear), Err(AugmentError::NonSimilarity));
        let aniso = Affine2D {
            linear: [[2.0, 0.0], [0.0, 1.0]],
            translation: [0.0, 0.0],
        };
        assert_eq!(warp_rect(&r, &aniso), Err(AugmentError::NonSimilarity));
    }

    #[test]
    fn inverse_round_trip() {
        let a = Affine2D::rotate_about(33.0, Point::new(5.0, -2.0)).then(&Affine2D::scale(1.7));
        let p = Point::new(3.0, 9.0);
        let back = a.inverse().unwrap().apply(a.apply(p));
        assert!(back.distance(p) < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = AugmentConfig {
            crop2: 400,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
