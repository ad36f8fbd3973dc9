//! Orthonormal 8x8 DCT-II and scalar quantization.
//!
//! Blocks and coefficient arrays are row-major: index `8 * row + col`, where
//! for coefficients the row is the vertical frequency.

use std::sync::OnceLock;

use super::QuantizationTable;
use crate::error::{Error, Result};

pub type Block = [f64; 64];

// basis[u][x] = c(u) / 2 * cos((2x + 1) u pi / 16), c(0) = 1 / sqrt(2).
fn basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (u, row) in m.iter_mut().enumerate() {
            let c = if u == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = c / 2.0 * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        m
    })
}

pub fn forward(block: &Block) -> Block {
    let m = basis();
    // Rows first: tmp[y][u] = sum_x m[u][x] * block[y][x].
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| m[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| m[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

pub fn inverse(coeffs: &Block) -> Block {
    let m = basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| m[u][x] * coeffs[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| m[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

fn as_block(values: &[f64], what: &str) -> Result<Block> {
    values
        .try_into()
        .map_err(|_| Error::arg(format!("{what} must have 64 values (8x8), got {}", values.len())))
}

/// Forward transform of a level-shifted 8x8 block.
pub fn block_dct_forward(block: &[f64]) -> Result<Block> {
    Ok(forward(&as_block(block, "block")?))
}

pub fn block_dct_inverse(coeffs: &[f64]) -> Result<Block> {
    Ok(inverse(&as_block(coeffs, "coefficient block")?))
}

pub fn quantize(coeffs: &Block, table: &QuantizationTable) -> [i32; 64] {
    let mut out = [0i32; 64];
    for ((o, c), q) in out.iter_mut().zip(coeffs).zip(table.entries()) {
        *o = (c / f64::from(*q)).round() as i32;
    }
    out
}

pub fn dequantize(levels: &[i32; 64], table: &QuantizationTable) -> Block {
    let mut out = [0.0; 64];
    for ((o, l), q) in out.iter_mut().zip(levels).zip(table.entries()) {
        *o = f64::from(*l) * f64::from(*q);
    }
    out
}
