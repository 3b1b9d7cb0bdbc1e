//! SVG overlays of grasp rectangles.
//!
//! Each rectangle is drawn as four segments: the two plate edges (v1v2 and
//! v3v4) in a heavy stroke and the two opening edges in a light one.
//! Predictions are red plates with white openings; ground truth is blue with
//! dashed openings.

use grasp_core::detector::Detection;
use grasp_core::geometry::{rect_to_polygon, GraspRect};
use std::fmt::Write;

struct Style {
    plate: &'static str,
    opening: &'static str,
}

const PREDICTION: Style = Style {
    plate: r##"stroke="#e41a1c" stroke-width="3""##,
    opening: r##"stroke="#ffffff" stroke-width="1""##,
};

const GROUND_TRUTH: Style = Style {
    plate: r##"stroke="#377eb8" stroke-width="3""##,
    opening: r##"stroke="#377eb8" stroke-width="1" stroke-dasharray="4 3""##,
};

fn draw(svg: &mut String, r: &GraspRect, style: &Style) {
    let v = rect_to_polygon(r).vertices;
    for (k, s) in [style.plate, style.opening, style.plate, style.opening].iter().enumerate() {
        let (a, b) = (v[k], v[(k + 1) % 4]);
        writeln!(
            svg,
            r#"  <line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" {s}/>"#,
            a.x, a.y, b.x, b.y
        )
        .expect("string write");
    }
}

/// An SVG document of the given pixel size. `image_href`, when given, is
/// placed underneath as a raster reference.
pub fn export_overlay(
    width: usize,
    height: usize,
    detections: &[Detection],
    gts: &[GraspRect],
    image_href: Option<&str>,
) -> String {
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .expect("string write");
    match image_href {
        Some(href) => writeln!(
            svg,
            r#"  <image href="{}" x="0" y="0" width="{width}" height="{height}"/>"#,
            escape(href)
        ),
        None => writeln!(
            svg,
            r##"  <rect x="0" y="0" width="{width}" height="{height}" fill="#303030"/>"##
        ),
    }
    .expect("string write");
    svg.push_str("  <g fill=\"none\" class=\"ground-truth\">\n");
    for g in gts {
        draw(&mut svg, g, &GROUND_TRUTH);
    }
    svg.push_str("  </g>\n  <g fill=\"none\" class=\"predictions\">\n");
    for d in detections {
        draw(&mut svg, &d.rect, &PREDICTION);
    }
    svg.push_str("  </g>\n</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('"', "&quot;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det() -> Detection {
        Detection {
            rect: GraspRect::new(50.0, 40.0, 30.0, 20.0, 10.0).unwrap(),
            score: 0.9,
            class: 4,
        }
    }

    #[test]
    fn ground_truth_only() {
        let svg = export_overlay(100, 80, &[], &[det().rect], None);
        assert_eq!(svg.matches("<line").count(), 4);
        assert!(!svg.contains("#e41a1c"));
    }

    #[test]
    fn one_detection_has_two_styles() {
        let svg = export_overlay(100, 80, &[det()], &[], None);
        let lines: Vec<&str> = svg.lines().filter(|l| l.contains("<line")).collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines.iter().filter(|l| l.contains("#e41a1c")).count(), 2);
        assert_eq!(lines.iter().filter(|l| l.contains("#ffffff")).count(), 2);
        // plate edges alternate with opening edges
        assert!(lines[0].contains("#e41a1c") && lines[2].contains("#e41a1c"));
    }

    #[test]
    fn href_is_escaped() {
        let svg = export_overlay(4, 4, &[], &[], Some("a\"b&c.png"));
        assert!(svg.contains(r#"href="a&quot;b&amp;c.png""#));
    }
}
