//! Zigzag scan, run-length symbols and canonical Huffman coding with the
//! baseline example tables.

use crate::error::{Error, Result};

/// `ZIGZAG[i]` is the row-major index of the i-th coefficient in scan order.
#[rustfmt::skip]
pub const ZIGZAG: [usize; 64] = [
     0,  1,  8, 16,  9,  2,  3, 10,
    17, 24, 32, 25, 18, 11,  4,  5,
    12, 19, 26, 33, 40, 48, 41, 34,
    27, 20, 13,  6,  7, 14, 21, 28,
    35, 42, 49, 56, 57, 50, 43, 36,
    29, 22, 15, 23, 30, 37, 44, 51,
    58, 59, 52, 45, 38, 31, 39, 46,
    53, 60, 61, 54, 47, 55, 62, 63,
];

const LUMA_DC_BITS: [u8; 16] = [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
const CHROMA_DC_BITS: [u8; 16] = [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
const DC_VALUES: [u8; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];

const LUMA_AC_BITS: [u8; 16] = [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7d];
#[rustfmt::skip]
const LUMA_AC_VALUES: [u8; 162] = [
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07,
    0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xa1, 0x08, 0x23, 0x42, 0xb1, 0xc1, 0x15, 0x52, 0xd1, 0xf0,
    0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0a, 0x16, 0x17, 0x18, 0x19, 0x1a, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2a, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49,
    0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69,
    0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7,
    0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5,
    0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe1, 0xe2,
    0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea, 0xf1, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8,
    0xf9, 0xfa,
];

const CHROMA_AC_BITS: [u8; 16] = [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77];
#[rustfmt::skip]
const CHROMA_AC_VALUES: [u8; 162] = [
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61, 0x71,
    0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xa1, 0xb1, 0xc1, 0x09, 0x23, 0x33, 0x52, 0xf0,
    0x15, 0x62, 0x72, 0xd1, 0x0a, 0x16, 0x24, 0x34, 0xe1, 0x25, 0xf1, 0x17, 0x18, 0x19, 0x1a, 0x26,
    0x27, 0x28, 0x29, 0x2a, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48,
    0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68,
    0x69, 0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87,
    0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5,
    0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3,
    0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda,
    0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8,
    0xf9, 0xfa,
];

const EOB: u8 = 0x00;
const ZRL: u8 = 0xf0;

/// Canonical Huffman table built from code-length counts and symbol values.
#[derive(Debug, Clone)]
pub struct HuffmanTable {
    // Encoder side: (code, length) per symbol, length 0 if absent.
    codes: [(u16, u8); 256],
    // Decoder side, per code length 1..=16.
    max_code: [i32; 17],
    val_ptr: [i32; 17],
    min_code: [i32; 17],
    values: Vec<u8>,
}

impl HuffmanTable {
    pub fn new(bits: &[u8; 16], values: &[u8]) -> Self {
        let mut codes = [(0u16, 0u8); 256];
        let mut max_code = [-1i32; 17];
        let mut val_ptr = [0i32; 17];
        let mut min_code = [0i32; 17];
        let mut code = 0i32;
        let mut k = 0usize;
        for len in 1..=16 {
            let count = bits[len - 1] as usize;
            if count > 0 {
                val_ptr[len] = k as i32;
                min_code[len] = code;
                for _ in 0..count {
                    codes[values[k] as usize] = (code as u16, len as u8);
                    code += 1;
                    k += 1;
                }
                max_code[len] = code - 1;
            }
            code <<= 1;
        }
        Self {
            codes,
            max_code,
            val_ptr,
            min_code,
            values: values.to_vec(),
        }
    }

    fn encode(&self, w: &mut BitWriter, symbol: u8) {
        let (code, len) = self.codes[symbol as usize];
        debug_assert!(len > 0, "symbol {symbol:#04x} has no code");
        w.put(u32::from(code), len);
    }

    fn decode(&self, r: &mut BitReader<'_>) -> Result<u8> {
        let mut code = 0i32;
        for len in 1..=16 {
            code = (code << 1) | r.bit()? as i32;
            if code <= self.max_code[len] {
                let idx = self.val_ptr[len] + code - self.min_code[len];
                return Ok(self.values[idx as usize]);
            }
        }
        Err(Error::data("invalid Huffman code in stream"))
    }
}

/// DC and AC tables used for one component class.
#[derive(Debug, Clone)]
pub struct TableSet {
    pub dc: HuffmanTable,
    pub ac: HuffmanTable,
}

impl TableSet {
    pub fn luma() -> Self {
        Self {
            dc: HuffmanTable::new(&LUMA_DC_BITS, &DC_VALUES),
            ac: HuffmanTable::new(&LUMA_AC_BITS, &LUMA_AC_VALUES),
        }
    }

    pub fn chroma() -> Self {
        Self {
            dc: HuffmanTable::new(&CHROMA_DC_BITS, &DC_VALUES),
            ac: HuffmanTable::new(&CHROMA_AC_BITS, &CHROMA_AC_VALUES),
        }
    }
}

#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u32,
    n: u8,
}

impl BitWriter {
    pub fn put(&mut self, bits: u32, len: u8) {
        for i in (0..len).rev() {
            self.acc = (self.acc << 1) | ((bits >> i) & 1);
            self.n += 1;
            if self.n == 8 {
                self.bytes.push(self.acc as u8);
                self.acc = 0;
                self.n = 0;
            }
        }
    }

    /// Pads the last byte with one-bits.
    pub fn finish(mut self) -> Vec<u8> {
        if self.n > 0 {
            let pad = 8 - self.n;
            self.put((1 << pad) - 1, pad);
        }
        self.bytes
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    bit: u8,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0, bit: 0 }
    }

    pub fn bit(&mut self) -> Result<u32> {
        let byte = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| Error::data("entropy-coded payload ended early"))?;
        let b = (byte >> (7 - self.bit)) & 1;
        self.bit += 1;
        if self.bit == 8 {
            self.bit = 0;
            self.pos += 1;
        }
        Ok(u32::from(b))
    }

    pub fn bits(&mut self, len: u8) -> Result<u32> {
        let mut v = 0;
        for _ in 0..len {
            v = (v << 1) | self.bit()?;
        }
        Ok(v)
    }
}

fn category(v: i32) -> u8 {
    (32 - v.unsigned_abs().leading_zeros()) as u8
}

fn magnitude_bits(v: i32, size: u8) -> u32 {
    if v >= 0 {
        v as u32
    } else {
        (v + (1 << size) - 1) as u32
    }
}

fn extend(bits: u32, size: u8) -> i32 {
    if size == 0 {
        0
    } else if bits < (1 << (size - 1)) {
        bits as i32 - (1 << size) + 1
    } else {
        bits as i32
    }
}

/// Writes one quantized block (row-major levels). `prev_dc` carries the DC
/// predictor between consecutive blocks of a component.
pub fn encode_block(w: &mut BitWriter, tables: &TableSet, levels: &[i32; 64], prev_dc: &mut i32) {
    let diff = levels[0] - *prev_dc;
    *prev_dc = levels[0];
    let size = category(diff);
    tables.dc.encode(w, size);
    w.put(magnitude_bits(diff, size), size);

    let mut run = 0u8;
    for &idx in &ZIGZAG[1..] {
        let v = levels[idx];
        if v == 0 {
            run += 1;
            continue;
        }
        while run > 15 {
            tables.ac.encode(w, ZRL);
            run -= 16;
        }
        let size = category(v);
        tables.ac.encode(w, (run << 4) | size);
        w.put(magnitude_bits(v, size), size);
        run = 0;
    }
    if run > 0 {
        tables.ac.encode(w, EOB);
    }
}

pub fn decode_block(r: &mut BitReader<'_>, tables: &TableSet, prev_dc: &mut i32) -> Result<[i32; 64]> {
    let mut levels = [0i32; 64];
    let size = tables.dc.decode(r)?;
    if size > 11 {
        return Err(Error::data(format!("DC category {size} out of range")));
    }
    *prev_dc += extend(r.bits(size)?, size);
    levels[0] = *prev_dc;

    let mut k = 1;
    while k < 64 {
        let symbol = tables.ac.decode(r)?;
        let (run, size) = (symbol >> 4, symbol & 0x0f);
        if size == 0 {
            if run == 15 {
                k += 16;
                continue;
            }
            break;
        }
        k += run as usize;
        if k > 63 {
            return Err(Error::data("AC run past end of block"));
        }
        levels[ZIGZAG[k]] = extend(r.bits(size)?, size);
        k += 1;
    }
    Ok(levels)
}
