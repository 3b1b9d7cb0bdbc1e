//! Cornell-style rectangle annotation files: one `x y` vertex per line,
//! four consecutive lines per rectangle.

use super::IngestError;
use crate::geometry::{rect_to_polygon, GraspRect, OrientedPolygon, Point};

/// Polygons read from an annotation file and the number of groups skipped
/// because they held non-finite coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RectFile {
    pub polygons: Vec<OrientedPolygon>,
    pub skipped: usize,
}

pub fn parse_rect_file(text: &[u8]) -> Result<RectFile, IngestError> {
    let text = std::str::from_utf8(text).map_err(|_| IngestError::MalformedLine {
        line: 0,
        content: "<invalid UTF-8>".into(),
    })?;
    let mut points = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let malformed = || IngestError::MalformedLine {
            line: lineno + 1,
            content: line.chars().take(64).collect(),
        };
        let mut tokens = line.split_whitespace();
        let (Some(xs), Some(ys), None) = (tokens.next(), tokens.next(), tokens.next()) else {
            return Err(malformed());
        };
        let x: f64 = xs.parse().map_err(|_| malformed())?;
        let y: f64 = ys.parse().map_err(|_| malformed())?;
        points.push(Point::new(x, y));
    }
    if points.len() % 4 != 0 {
        return Err(IngestError::TruncatedGroup { lines: points.len() });
    }
    let mut out = RectFile::default();
    for group in points.chunks_exact(4) {
        if group.iter().all(|p| p.x.is_finite() && p.y.is_finite()) {
            out.polygons
                .push(OrientedPolygon::new([group[0], group[1], group[2], group[3]]));
        } else {
            out.skipped += 1;
        }
    }
    Ok(out)
}

/// Serializes rectangles in the annotation format.
pub fn write_rect_file(rects: &[GraspRect]) -> String {
    let mut out = String::new();
    for r in rects {
        for v in rect_to_polygon(r).vertices {
            out.push_str(&format!("{} {}\n", v.x, v.y));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_groups() {
        let text = "1 1\n3 1\n3 2\n1 2\n10 10\n12 10\n12 11\n10 11\n";
        let f = parse_rect_file(text.as_bytes()).unwrap();
        assert_eq!(f.polygons.len(), 2);
        assert_eq!(f.skipped, 0);
        assert_eq!(f.polygons[1].vertices[2], Point::new(12.0, 11.0));
    }

    #[test]
    fn nan_group_skipped() {
        let text = "1 1\nNaN NaN\n3 2\n1 2\n";
        let f = parse_rect_file(text.as_bytes()).unwrap();
        assert!(f.polygons.is_empty());
        assert_eq!(f.skipped, 1);
    }

    #[test]
    fn truncated() {
        let text = "1 1\n2 2\n3 3\n4 4\n5 5\n";
        assert!(matches!(
            parse_rect_file(text.as_bytes()),
            Err(IngestError::TruncatedGroup { lines: 5 })
        ));
    }

    #[test]
    fn malformed() {
        assert!(matches!(
            parse_rect_file(b"1 abc\n"),
            Err(IngestError::MalformedLine { line: 1, .. })
        ));
        assert!(matches!(
            parse_rect_file(b"1 2 3\n"),
            Err(IngestError::MalformedLine { .. })
        ));
        assert!(parse_rect_file(b"\xff\xfe").is_err());
    }

    #[test]
    fn empty_file_is_empty() {
        assert_eq!(parse_rect_file(b"").unwrap(), RectFile::default());
    }
}
