//! Run-length codec for binary masks.
//!
//! Runs are taken over a row-major pixel scan and alternate between 0 and 1,
//! always starting with the count of leading zeros (which may be 0).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A run-length encoded binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u32>,
}

impl RleMask {
    /// Builds a mask, checking that the run lengths cover exactly `height * width` pixels.
    pub fn new(height: u32, width: u32, counts: Vec<u32>) -> Result<Self> {
        let expected = height as u64 * width as u64;
        let got: u64 = counts.iter().map(|&c| c as u64).sum();
        if got != expected {
            return Err(Error::LengthMismatch { expected, got });
        }
        Ok(Self {
            height,
            width,
            counts,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.height as usize * self.width as usize
    }

    /// Number of foreground (value 1) pixels.
    pub fn area(&self) -> u64 {
        self.counts
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&c| c as u64)
            .sum()
    }
}

/// Encode a binary raster (`raster[y * width + x]`, nonzero = foreground).
pub fn rle_encode(raster: &[u8], height: u32, width: u32) -> RleMask {
    assert_eq!(
        raster.len(),
        height as usize * width as usize,
        "raster length must equal height * width"
    );
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u32;
    for &px in raster {
        let v = u8::from(px != 0);
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    RleMask {
        height,
        width,
        counts,
    }
}

/// Decode to a raster of 0/1 bytes in row-major order.
pub fn rle_decode(mask: &RleMask) -> Result<Vec<u8>> {
    let expected = mask.height as u64 * mask.width as u64;
    let got: u64 = mask.counts.iter().map(|&c| c as u64).sum();
    if got != expected {
        return Err(Error::LengthMismatch { expected, got });
    }
    let mut out = Vec::with_capacity(expected as usize);
    let mut value = 0u8;
    for &c in &mask.counts {
        out.resize(out.len() + c as usize, value);
        value ^= 1;
    }
    Ok(out)
}
