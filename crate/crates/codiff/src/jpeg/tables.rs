//! JPEG quality factors and quantization table derivation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// JPEG quality setting, 1..=100. Lower means stronger compression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QualityFactor(u8);

impl QualityFactor {
    pub fn new(value: u8) -> Result<Self> {
        if !(1..=100).contains(&value) {
            return Err(Error::domain(format!(
                "quality factor must be in 1..=100, got {value}"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl std::fmt::Display for QualityFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// JPEG Annex K base luminance table, row-major zig-zag-free order.
pub const ANNEX_K_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// JPEG Annex K base chrominance table.
pub const ANNEX_K_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Luma and chroma quantization divisors for one quality factor.
/// Entries always lie in [1, 255].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizationTable {
    pub luma: [u8; 64],
    pub chroma: [u8; 64],
}

fn scale_table(base: &[u16; 64], scale: u32) -> [u8; 64] {
    let mut out = [1u8; 64];
    for (o, &b) in out.iter_mut().zip(base.iter()) {
        let v = (b as u32 * scale + 50) / 100;
        *o = v.clamp(1, 255) as u8;
    }
    out
}

/// Derives the quantization tables for a quality factor using the standard
/// scaling of the Annex K base tables: scale = 5000/qf below 50, otherwise
/// 200 - 2*qf, with each entry floor((base*scale + 50)/100) clamped to [1, 255].
pub fn quant_table_for_qf(qf: QualityFactor) -> QuantizationTable {
    let q = qf.value() as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    QuantizationTable {
        luma: scale_table(&ANNEX_K_LUMA, scale),
        chroma: scale_table(&ANNEX_K_CHROMA, scale),
    }
}
