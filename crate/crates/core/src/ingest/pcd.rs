//! ASCII point cloud (PCD v0.7) reader producing an organized depth image.
//!
//! Only the `z` and `index` fields are consumed; `index` is the linear pixel
//! offset `row * width + col` in the companion color image.

use super::{DepthImage, IngestError};

#[derive(Debug, Default)]
struct Header {
    fields: Vec<String>,
    counts: Vec<usize>,
    points: Option<usize>,
}

/// Parses an ASCII PCD document into a `width x height` depth image.
pub fn parse_pcd(text: &[u8], width: usize, height: usize) -> Result<DepthImage, IngestError> {
    let pixels = width
        .checked_mul(height)
        .filter(|&n| n > 0)
        .ok_or_else(|| IngestError::BadHeader(format!("invalid target size {width}x{height}")))?;
    let text = std::str::from_utf8(text)
        .map_err(|_| IngestError::BadHeader("PCD is not valid UTF-8".into()))?;

    let mut header = Header::default();
    let mut lines = text.lines().enumerate();
    let mut saw_data = false;
    for (_, line) in lines.by_ref() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let key = tokens.next().unwrap_or_default().to_ascii_uppercase();
        let rest: Vec<&str> = tokens.collect();
        match key.as_str() {
            "FIELDS" => header.fields = rest.iter().map(|s| s.to_ascii_lowercase()).collect(),
            "COUNT" => {
                header.counts = rest
                    .iter()
                    .map(|s| s.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| IngestError::BadHeader(format!("bad COUNT line {line:?}")))?;
            }
            "POINTS" => {
                let n = rest
                    .first()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| IngestError::BadHeader(format!("bad POINTS line {line:?}")))?;
                header.points = Some(n);
            }
            "DATA" => {
                match rest.first().map(|s| s.to_ascii_lowercase()) {
                    Some(enc) if enc == "ascii" => {}
                    other => {
                        return Err(IngestError::UnsupportedEncoding(
                            other.unwrap_or_else(|| "<missing>".into()),
                        ))
                    }
                }
                saw_data = true;
                break;
            }
            // VERSION, SIZE, TYPE, WIDTH, HEIGHT, VIEWPOINT carry nothing we need
            _ => {}
        }
    }
    if !saw_data {
        return Err(IngestError::BadHeader("missing DATA line".into()));
    }
    if header.counts.is_empty() {
        header.counts = vec![1; header.fields.len()];
    }
    if header.counts.len() != header.fields.len() || header.counts.contains(&0) {
        return Err(IngestError::BadHeader("COUNT does not match FIELDS".into()));
    }

    // column offset of each field once multi-count fields are expanded
    let mut column = 0usize;
    let mut z_col = None;
    let mut index_col = None;
    for (name, &count) in header.fields.iter().zip(&header.counts) {
        match name.as_str() {
            "z" => z_col = Some(column),
            "index" => index_col = Some(column),
            _ => {}
        }
        column = column
            .checked_add(count)
            .ok_or_else(|| IngestError::BadHeader("COUNT overflow".into()))?;
    }
    let z_col = z_col.ok_or_else(|| IngestError::MissingField("z".into()))?;
    let index_col = index_col.ok_or_else(|| IngestError::MissingField("index".into()))?;
    let n_cols = column;

    let mut depth = DepthImage::invalid(width, height);
    let mut seen = 0usize;
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != n_cols {
            return Err(IngestError::MalformedLine {
                line: lineno + 1,
                content: truncate(line),
            });
        }
        let malformed = || IngestError::MalformedLine {
            line: lineno + 1,
            content: truncate(line),
        };
        let z: f64 = tokens[z_col].parse().map_err(|_| malformed())?;
        let idx: f64 = tokens[index_col].parse().map_err(|_| malformed())?;
        if !(idx.is_finite() && idx >= 0.0 && idx.fract() == 0.0) || idx >= pixels as f64 {
            return Err(IngestError::IndexOutOfRange {
                index: tokens[index_col].to_string(),
                pixels,
            });
        }
        seen += 1;
        if z.is_finite() {
            let i = idx as usize;
            depth.depth[i] = z;
            depth.valid[i] = true;
        }
    }
    if let Some(expected) = header.points {
        if expected != seen {
            return Err(IngestError::BadHeader(format!(
                "POINTS says {expected}, found {seen}"
            )));
        }
    }
    Ok(depth)
}

fn truncate(s: &str) -> String {
    s.chars().take(64).collect()
}

/// Writes an ASCII PCD with fields `x y z index` for every valid pixel.
pub fn write_pcd(depth: &DepthImage) -> String {
    let points: Vec<usize> = (0..depth.depth.len()).filter(|&i| depth.valid[i]).collect();
    let mut out = String::new();
    out.push_str("# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\n");
    out.push_str("FIELDS x y z index\nSIZE 4 4 4 4\nTYPE F F F U\nCOUNT 1 1 1 1\n");
    out.push_str(&format!("WIDTH {}\nHEIGHT 1\n", points.len()));
    out.push_str("VIEWPOINT 0 0 0 1 0 0 0\n");
    out.push_str(&format!("POINTS {}\nDATA ascii\n", points.len()));
    for i in points {
        let (col, row) = (i % depth.width, i / depth.width);
        out.push_str(&format!("{} {} {} {}\n", col, row, depth.depth[i], i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "# .PCD v0.7\nVERSION 0.7\nFIELDS x y z rgb index\nSIZE 4 4 4 4 4\n\
TYPE F F F F U\nCOUNT 1 1 1 1 1\nWIDTH 2\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS 2\n";

    #[test]
    fn places_points_by_index() {
        let text = format!("{HEADER}DATA ascii\n0.1 0.2 1.5 0 0\n0.3 0.4 2.5 0 5\n");
        let d = parse_pcd(text.as_bytes(), 4, 3).unwrap();
        assert_eq!(d.depth[0], 1.5);
        assert_eq!(d.depth[5], 2.5); // (1, 1) when width is 4
        assert_eq!(d.valid.iter().filter(|v| **v).count(), 2);
        assert_eq!(d.depth[1], 0.0);
    }

    #[test]
    fn binary_rejected() {
        let text = format!("{HEADER}DATA binary\n");
        assert!(matches!(
            parse_pcd(text.as_bytes(), 4, 3),
            Err(IngestError::UnsupportedEncoding(_))
        ));
    }

    #[test]
    fn missing_fields() {
        let text = "FIELDS x y z\nDATA ascii\n1 2 3\n";
        assert!(matches!(parse_pcd(text.as_bytes(), 2, 2), Err(IngestError::MissingField(f)) if f == "index"));
        let text = "FIELDS x y index\nDATA ascii\n1 2 3\n";
        assert!(matches!(parse_pcd(text.as_bytes(), 2, 2), Err(IngestError::MissingField(f)) if f == "z"));
    }

    #[test]
    fn index_out_of_range() {
        let text = "FIELDS z index\nDATA ascii\n1.0 4\n";
        assert!(matches!(
            parse_pcd(text.as_bytes(), 2, 2),
            Err(IngestError::IndexOutOfRange { .. })
        ));
        let text = "FIELDS z index\nDATA ascii\n1.0 -1\n";
        assert!(parse_pcd(text.as_bytes(), 2, 2).is_err());
    }

    #[test]
    fn multi_count_fields_shift_columns() {
        let text = "FIELDS normal z index\nCOUNT 3 1 1\nDATA ascii\n0 0 0 7.5 3\n";
        let d = parse_pcd(text.as_bytes(), 2, 2).unwrap();
        assert_eq!(d.depth[3], 7.5);
    }

    #[test]
    fn nan_depth_stays_invalid() {
        let text = "FIELDS z index\nDATA ascii\nnan 0\n2.0 1\n";
        let d = parse_pcd(text.as_bytes(), 2, 1).unwrap();
        assert_eq!(d.valid, vec![false, true]);
        assert_eq!(d.depth[0], 0.0);
    }

    #[test]
    fn writer_round_trip() {
        let mut d = DepthImage::invalid(3, 2);
        d.depth[1] = 0.625;
        d.valid[1] = true;
        d.depth[5] = 1.25;
        d.valid[5] = true;
        let back = parse_pcd(write_pcd(&d).as_bytes(), 3, 2).unwrap();
        assert_eq!(back, d);
    }
}
