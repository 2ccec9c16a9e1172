//! Uncompressed run-length encoding of binary masks.
//!
//! Pixels are scanned row-major. `counts` alternates unset/set runs and always
//! starts with an unset run, which is 0 when the first pixel is set. Only that
//! first run may be zero, so every mask has exactly one encoding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{ImageError, SubjectMask};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u64>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RleError {
    #[error("runs cover {actual} pixels, mask has {expected}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("run {index} has zero length")]
    ZeroRun { index: usize },
    #[error("mask has no set pixels")]
    Empty,
    #[error("mask must be at least 1x1")]
    ZeroDimension,
}

pub fn encode_bits(bits: &[bool]) -> Vec<u64> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for &b in bits {
        if b != current {
            counts.push(run);
            current = b;
            run = 0;
        }
        run += 1;
    }
    counts.push(run);
    counts
}

pub fn encode(mask: &SubjectMask) -> RleMask {
    RleMask {
        width: mask.width(),
        height: mask.height(),
        counts: encode_bits(mask.bits()),
    }
}

/// Expands runs into `width * height` bits, rejecting non-canonical input.
pub fn decode_bits(rle: &RleMask) -> Result<Vec<bool>, RleError> {
    if rle.width == 0 || rle.height == 0 {
        return Err(RleError::ZeroDimension);
    }
    let expected = u64::from(rle.width) * u64::from(rle.height);
    let actual = rle
        .counts
        .iter()
        .try_fold(0u64, |acc, &c| acc.checked_add(c))
        .unwrap_or(u64::MAX);
    if actual != expected {
        return Err(RleError::LengthMismatch { expected, actual });
    }
    if let Some(index) = rle.counts.iter().skip(1).position(|&c| c == 0) {
        return Err(RleError::ZeroRun { index: index + 1 });
    }
    let mut bits = Vec::with_capacity(expected as usize);
    for (i, &c) in rle.counts.iter().enumerate() {
        bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
    }
    Ok(bits)
}

pub fn decode(rle: &RleMask) -> Result<SubjectMask, RleError> {
    let bits = decode_bits(rle)?;
    SubjectMask::new(rle.width, rle.height, bits).map_err(|e| match e {
        ImageError::EmptyMask => RleError::Empty,
        _ => RleError::ZeroDimension,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn leading_set_pixel_gets_zero_run() {
        let mask = SubjectMask::new(3, 1, vec![true, true, false]).unwrap();
        assert_eq!(encode(&mask).counts, vec![0, 2, 1]);
    }

    #[test]
    fn known_encoding() {
        let mask = SubjectMask::new(
            4,
            2,
            vec![false, false, true, true, true, false, false, true],
        )
        .unwrap();
        let rle = encode(&mask);
        assert_eq!(rle.counts, vec![2, 3, 2, 1]);
        assert_eq!(decode(&rle).unwrap(), mask);
    }

    #[test]
    fn rejects_bad_input() {
        let rle = |counts: Vec<u64>| RleMask {
            width: 2,
            height: 2,
            counts,
        };
        assert_eq!(
            decode(&rle(vec![1, 2])),
            Err(RleError::LengthMismatch {
                expected: 4,
                actual: 3
            })
        );
        assert_eq!(
            decode(&rle(vec![1, 0, 3])),
            Err(RleError::ZeroRun { index: 1 })
        );
        assert_eq!(decode(&rle(vec![4])), Err(RleError::Empty));
        assert_eq!(
            decode(&rle(vec![u64::MAX, 2])),
            Err(RleError::LengthMismatch {
                expected: 4,
                actual: u64::MAX
            })
        );
    }

    proptest! {
        #[test]
        fn round_trip(w in 1u32..20, h in 1u32..20, seed in any::<u64>()) {
            let n = (w * h) as usize;
            let mut bits: Vec<bool> = (0..n).map(|i| (seed.rotate_left(i as u32 % 64) ^ i as u64) & 3 == 0).collect();
            bits[(seed % n as u64) as usize] = true;
            let mask = SubjectMask::new(w, h, bits).unwrap();
            let rle = encode(&mask);
            let back = decode(&rle).unwrap();
            prop_assert_eq!(&back, &mask);
            prop_assert_eq!(serde_json::to_vec(&encode(&back)).unwrap(), serde_json::to_vec(&rle).unwrap());
        }
    }
}
