//! Binary netpbm: P6 (RGB, maxval 255) and P5 (gray, maxval 255 or 65535,
//! 16-bit samples big-endian).

use super::{DepthImage, IngestError, RgbImage};

/// Decoded netpbm payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Netpbm {
    Rgb(RgbImage),
    Gray(DepthImage),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, IngestError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(IngestError::BadHeader(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| IngestError::BadHeader(format!("{what} out of range")))
    }
}

/// Parses a binary P5 or P6 image.
pub fn parse_netpbm(bytes: &[u8]) -> Result<Netpbm, IngestError> {
    let magic = bytes.get(..2).ok_or(IngestError::BadMagic)?;
    let rgb = match magic {
        b"P6" => true,
        b"P5" => false,
        _ => return Err(IngestError::BadMagic),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(IngestError::BadHeader(format!("empty image {width}x{height}")));
    }
    let sample_bytes = match (rgb, maxval) {
        (_, 255) => 1,
        (false, 65535) => 2,
        _ => return Err(IngestError::BadMaxval(maxval)),
    };
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(IngestError::BadHeader("missing raster separator".into())),
    }
    let channels = if rgb { 3 } else { 1 };
    let needed = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels * sample_bytes))
        .ok_or_else(|| IngestError::BadHeader("dimensions overflow".into()))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < needed {
        return Err(IngestError::ShortPayload {
            expected: needed,
            found: payload.len(),
        });
    }
    let payload = &payload[..needed];
    if rgb {
        return Ok(Netpbm::Rgb(RgbImage::new(width, height, payload.to_vec())?));
    }
    let depth: Vec<f64> = if sample_bytes == 1 {
        payload.iter().map(|&v| v as f64).collect()
    } else {
        payload
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
            .collect()
    };
    Ok(Netpbm::Gray(DepthImage::from_raw(width, height, depth)))
}

/// Encodes an RGB image as binary P6.
pub fn write_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Encodes 8-bit gray samples as binary P5.
pub fn write_pgm8(width: usize, height: usize, samples: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

/// Encodes 16-bit gray samples as binary P5 (big-endian).
pub fn write_pgm16(width: usize, height: usize, samples: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p6_round_trip() {
        let bytes = b"P6\n2 2\n255\n\x01\x02\x03\x04\x05\x06\x07\x08\x09\x0a\x0b\x0c";
        let Netpbm::Rgb(img) = parse_netpbm(bytes).unwrap() else {
            panic!("expected rgb")
        };
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.data, (1..=12).collect::<Vec<u8>>());
        assert_eq!(write_ppm(&img), bytes.to_vec());
    }

    #[test]
    fn p5_sixteen_bit() {
        let bytes = write_pgm16(2, 2, &[0, 1, 256, 65535]);
        let Netpbm::Gray(d) = parse_netpbm(&bytes).unwrap() else {
            panic!("expected gray")
        };
        assert_eq!(d.depth, vec![0.0, 1.0, 256.0, 65535.0]);
        assert_eq!(d.valid, vec![false, true, true, true]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5 # comment\n1 # w\n1\n255\n\x07";
        let Netpbm::Gray(d) = parse_netpbm(bytes).unwrap() else {
            panic!("expected gray")
        };
        assert_eq!(d.depth, vec![7.0]);
    }

    #[test]
    fn error_paths() {
        assert!(matches!(parse_netpbm(b"P3\n1 1\n255\n0 0 0"), Err(IngestError::BadMagic)));
        assert!(matches!(parse_netpbm(b""), Err(IngestError::BadMagic)));
        assert!(matches!(parse_netpbm(b"P6\n1 1\n65535\n"), Err(IngestError::BadMaxval(65535))));
        assert!(matches!(parse_netpbm(b"P5\n1 1\n100\n"), Err(IngestError::BadMaxval(100))));
        assert!(matches!(
            parse_netpbm(b"P6\n2 2\n255\n\x00"),
            Err(IngestError::ShortPayload { expected: 12, found: 1 })
        ));
        assert!(matches!(parse_netpbm(b"P5\n0 4\n255\n"), Err(IngestError::BadHeader(_))));
        assert!(matches!(
            parse_netpbm(b"P5\n99999999999999999999999 1\n255\n"),
            Err(IngestError::BadHeader(_))
        ));
        assert!(matches!(
            parse_netpbm(b"P5\n4294967296 4294967296\n255\n"),
            Err(IngestError::ShortPayload { .. }) | Err(IngestError::BadHeader(_))
        ));
    }
}
