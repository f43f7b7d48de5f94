use std::path::Path;

use super::Dataset;
use crate::error::{ParseError, Result};

/// One label byte followed by 32×32 red, green and blue planes.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

pub fn parse_cifar(bytes: &[u8], num_classes: usize) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(ParseError::Truncated {
            expected: bytes.len().div_ceil(CIFAR_RECORD) * CIFAR_RECORD,
            found: bytes.len(),
        }
        .into());
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= num_classes {
            return Err(ParseError::LabelRange {
                label,
                classes: num_classes,
            }
            .into());
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(vec![3, 32, 32], data, labels, num_classes)
}

/// Concatenates several CIFAR binary batch files.
pub fn read_cifar<P: AsRef<Path>>(paths: &[P], num_classes: usize) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend(std::fs::read(p)?);
    }
    parse_cifar(&bytes, num_classes)
}
