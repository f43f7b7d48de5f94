use std::path::Path;

use super::Dataset;
use crate::error::{ParseError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, ParseError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(ParseError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> std::result::Result<(), ParseError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(ParseError::BadMagic { found, expected });
    }
    Ok(())
}

/// Returns `(count, rows, cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, Vec<f32>), ParseError> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(ParseError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..expected].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<usize>, ParseError> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(ParseError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| b as usize).collect())
}

/// Reads an IDX image/label file pair into a `[1, rows, cols]` dataset.
/// The class count is one more than the largest label seen.
pub fn ingest_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let img = std::fs::read(images)?;
    let lab = std::fs::read(labels)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img)?;
    let labels = parse_idx_labels(&lab)?;
    if labels.len() != n {
        return Err(ParseError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(vec![1, rows, cols], pixels, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_images(n: u32, r: u32, c: u32) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for d in [n, r, c] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend((0..n * r * c).map(|i| (i % 256) as u8));
        b
    }

    #[test]
    fn parses_header_and_scales() {
        let (n, r, c, px) = parse_idx_images(&idx_images(2, 2, 3)).unwrap();
        assert_eq!((n, r, c), (2, 2, 3));
        assert_eq!(px[0], 0.0);
        assert_eq!(px[5], 5.0 / 255.0);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let b = idx_images(2, 2, 3);
        assert!(matches!(parse_idx_images(&b[..20]), Err(ParseError::Truncated { .. })));
        assert!(matches!(parse_idx_labels(&b), Err(ParseError::BadMagic { .. })));
        assert!(matches!(parse_idx_images(&b[..2]), Err(ParseError::Truncated { .. })));
    }
}
