//! Lossy compression: quality levels, quantization tables, the 8x8 block
//! DCT, a self-contained reference codec and corpus-level quality sweeps.

pub mod codec;
pub mod corpus;
pub mod dct;
pub mod entropy;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use codec::{compress_image_reference, ChromaSubsampling, ReferenceOptions};
pub use corpus::{
    compress_corpus, compress_corpus_detailed, rate_distortion_report, CompressedCorpus, CompressionConfig, CompressionReport,
    Engine, RateDistortionTable,
};
pub use dct::{block_dct_forward, block_dct_inverse, dequantize, quantize};

/// Encoder quality parameter in `1..=100`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct QualityLevel(u8);

impl QualityLevel {
    pub const MAX: QualityLevel = QualityLevel(100);

    pub fn new(q: u8) -> Result<Self> {
        if (1..=100).contains(&q) {
            Ok(Self(q))
        } else {
            Err(Error::arg(format!("quality must lie in 1..=100, got {q}")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for QualityLevel {
    type Error = Error;

    fn try_from(q: u8) -> Result<Self> {
        Self::new(q)
    }
}

impl From<QualityLevel> for u8 {
    fn from(q: QualityLevel) -> u8 {
        q.0
    }
}

impl fmt::Display for QualityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl std::str::FromStr for QualityLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let q: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::arg(format!("quality must be an integer in 1..=100, got '{s}'")))?;
        Self::new(q)
    }
}

/// Base luminance table, natural (row-major) order.
#[rustfmt::skip]
pub const BASE_LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16,  24,  40,  51,  61,
    12, 12, 14, 19,  26,  58,  60,  55,
    14, 13, 16, 24,  40,  57,  69,  56,
    14, 17, 22, 29,  51,  87,  80,  62,
    18, 22, 37, 56,  68, 109, 103,  77,
    24, 35, 55, 64,  81, 104, 113,  92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103,  99,
];

/// Base chrominance table, natural (row-major) order.
#[rustfmt::skip]
pub const BASE_CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// 8x8 quantization divisors in row-major order, each in `1..=255`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizationTable([u16; 64]);

impl QuantizationTable {
    pub fn new(entries: [u16; 64]) -> Result<Self> {
        if let Some(bad) = entries.iter().find(|e| !(1..=255).contains(*e)) {
            return Err(Error::arg(format!("quantization entry {bad} outside 1..=255")));
        }
        Ok(Self(entries))
    }

    pub fn uniform(step: u16) -> Result<Self> {
        Self::new([step; 64])
    }

    pub fn luma(q: QualityLevel) -> Self {
        Self::scaled(&BASE_LUMA_TABLE, q)
    }

    pub fn chroma(q: QualityLevel) -> Self {
        Self::scaled(&BASE_CHROMA_TABLE, q)
    }

    /// Scales a base table by the quality factor, clamping to `1..=255`.
    pub fn scaled(base: &[u16; 64], q: QualityLevel) -> Self {
        let scale = quality_to_scale(q);
        Self(base.map(|e| ((f64::from(e) * scale / 100.0).round()).clamp(1.0, 255.0) as u16))
    }

    pub fn entries(&self) -> &[u16; 64] {
        &self.0
    }
}

/// Percentage applied to the base tables: `5000 / q` below 50 and
/// `200 - 2q` from 50 up, so q = 50 leaves the base tables unchanged.
pub fn quality_to_scale(q: QualityLevel) -> f64 {
    let q = f64::from(q.get());
    if q < 50.0 {
        5000.0 / q
    } else {
        200.0 - 2.0 * q
    }
}
