//! Synthetic scenes: one bright bar per image with grasps across it.

use crate::geometry::GraspRect;
use crate::ingest::{DatasetSample, RgbImage, RgdImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    pub bar_length: (f64, f64),
    pub bar_thickness: (f64, f64),
    /// Plate length of the labeled grasps.
    pub plate_length: (f64, f64),
    /// Opening beyond the bar thickness.
    pub clearance: f64,
    /// Largest gap between neighbouring labeled grasp centers along the bar.
    pub grasp_spacing: f64,
    /// Bar centers are drawn from `[margin, size - margin]`.
    pub margin: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 227,
            bar_length: (70.0, 110.0),
            bar_thickness: (12.0, 18.0),
            plate_length: (24.0, 32.0),
            clearance: 24.0,
            grasp_spacing: 8.0,
            margin: 60.0,
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// One scene. The bar is lighter and closer to the camera than the textured
/// background. Grasps are labeled at evenly spaced points along the bar, from
/// one end to the other, so every placement across the bar lies near a label.
pub fn bar_sample<R: Rng>(rng: &mut R, cfg: &SynthConfig, id: &str) -> DatasetSample {
    let n = cfg.size;
    let s = n as f64;
    let phi: f64 = rng.random_range(0.0..180.0);
    let len = uniform(rng, cfg.bar_length);
    let thick = uniform(rng, cfg.bar_thickness);
    let cx = uniform(rng, (cfg.margin, s - cfg.margin));
    let cy = uniform(rng, (cfg.margin, s - cfg.margin));
    let plate = uniform(rng, cfg.plate_length);
    let bar_rg = [rng.random_range(180..=230u8), rng.random_range(150..=230u8)];
    let (c, sn) = (phi.to_radians().cos(), phi.to_radians().sin());

    let mut rgd = vec![0u8; 3 * n * n];
    let mut rgb = vec![0u8; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let mut cover = 0.0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let dx = x as f64 + ox - cx;
                let dy = y as f64 + oy - cy;
                let along = dx * c + dy * sn;
                let across = -dx * sn + dy * c;
                if along.abs() <= len / 2.0 && across.abs() <= thick / 2.0 {
                    cover += 0.25;
                }
            }
            let noise: f64 = rng.random_range(-12.0..12.0);
            let bg = 70.0 + 15.0 * ((x / 8 + y / 8) % 2) as f64 + noise;
            let mix = |fg: f64| (cover * fg + (1.0 - cover) * bg).round().clamp(0.0, 255.0) as u8;
            let depth = (cover * 220.0 + (1.0 - cover) * 60.0 + noise * 0.25).round().clamp(0.0, 255.0) as u8;
            let i = 3 * (y * n + x);
            let r = mix(bar_rg[0] as f64);
            let g = mix(bar_rg[1] as f64);
            rgd[i..i + 3].copy_from_slice(&[r, g, depth]);
            rgb[i..i + 3].copy_from_slice(&[r, g, mix(120.0)]);
        }
    }
    let span = (len - plate).max(0.0);
    let gaps = (span / cfg.grasp_spacing).ceil().max(1.0) as usize;
    let positives = (0..=gaps)
        .filter_map(|k| {
            let f = k as f64 / gaps as f64 - 0.5;
            GraspRect::new(cx + f * span * c, cy + f * span * sn, phi, plate, thick + cfg.clearance).ok()
        })
        .collect();
    DatasetSample {
        rgd: RgdImage::new(n, n, rgd).expect("sized buffer"),
        rgb: Some(RgbImage::new(n, n, rgb).expect("sized buffer")),
        positives,
        negatives: Vec::new(),
        source_id: id.to_string(),
    }
}

/// An endless seeded stream of scenes, ids `{prefix}{index:04}`.
pub fn bar_scenes<'a>(
    cfg: &'a SynthConfig,
    seed: u64,
    prefix: &'a str,
) -> impl Iterator<Item = DatasetSample> + 'a {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..).map(move |i| bar_sample(&mut rng, cfg, &format!("{prefix}{i:04}")))
}

/// The first `count` scenes of [`bar_scenes`].
pub fn bar_corpus(count: usize, cfg: &SynthConfig, seed: u64, prefix: &str) -> Vec<DatasetSample> {
    bar_scenes(cfg, seed, prefix).take(count).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::rect_inside;

    #[test]
    fn grasps_cross_the_bar_inside_the_frame() {
        let cfg = SynthConfig::default();
        for s in bar_corpus(20, &cfg, 1, "t") {
            assert!(s.positives.len() >= 6, "{}", s.positives.len());
            for r in &s.positives {
                assert!(rect_inside(r, 227, 227));
                assert!(r.h > cfg.bar_thickness.0);
                // grasp center lies on the bright bar
                let p = s.rgd.pixel(r.x as usize, r.y as usize);
                assert!(p[2] > 150, "{p:?}");
            }
        }
    }

    #[test]
    fn corpus_is_reproducible() {
        let cfg = SynthConfig {
            size: 64,
            margin: 20.0,
            bar_length: (20.0, 30.0),
            ..Default::default()
        };
        assert_eq!(bar_corpus(3, &cfg, 9, "a"), bar_corpus(3, &cfg, 9, "a"));
        assert_ne!(bar_corpus(3, &cfg, 9, "a"), bar_corpus(3, &cfg, 10, "a"));
    }
}
