//! Reference block-DCT codec and its private container.
//!
//! Encoding: RGB -> YCbCr, optional 4:2:0 chroma decimation, edge-replicated
//! padding of each plane to a multiple of 8, level shift by -128, forward
//! DCT, quantization with quality-scaled tables, zigzag/run-length symbols
//! and Huffman coding. Decoding runs the same steps backwards.
//!
//! Container layout (integers big-endian):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `MZDC`                           |
//! | 4      | 1    | version (1)                            |
//! | 5      | 4    | width                                  |
//! | 9      | 4    | height                                 |
//! | 13     | 1    | quality (1..=100)                      |
//! | 14     | 1    | chroma mode (0 = 4:4:4, 1 = 4:2:0)     |
//! | 15     | 1    | channel count (3: Y, Cb, Cr)           |
//! | 16     | ...  | per channel: u32 length, then payload  |
//!
//! Streams are not JFIF and are only read by this crate.

use serde::{Deserialize, Serialize};

use super::dct::{self, Block};
use super::entropy::{decode_block, encode_block, BitReader, BitWriter, TableSet};
use super::{QualityLevel, QuantizationTable};
use crate::error::{Error, Result};
use crate::pixels::PixelTensor;

pub const MAGIC: &[u8; 4] = b"MZDC";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChromaSubsampling {
    /// Full-resolution chroma.
    #[default]
    None,
    /// Chroma averaged over 2x2 luma pixels.
    Quarter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReferenceOptions {
    pub subsampling: ChromaSubsampling,
}

pub fn is_reference_stream(bytes: &[u8]) -> bool {
    bytes.len() >= 4 && &bytes[..4] == MAGIC
}

/// Single-channel float plane.
struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    fn at_clamped(&self, x: i64, y: i64) -> f64 {
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        self.data[y * self.width + x]
    }
}

fn to_ycbcr(img: &PixelTensor) -> [Plane; 3] {
    let rgb8 = img.to_rgb8();
    let (w, h) = (img.width(), img.height());
    let mut planes = [(); 3].map(|_| Plane {
        width: w,
        height: h,
        data: Vec::with_capacity(w * h),
    });
    for px in rgb8.pixels() {
        let [r, g, b] = px.0.map(f64::from);
        planes[0].data.push(0.299 * r + 0.587 * g + 0.114 * b);
        planes[1].data.push(-0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0);
        planes[2].data.push(0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0);
    }
    planes
}

fn from_ycbcr(planes: &[Plane; 3]) -> PixelTensor {
    let (w, h) = (planes[0].width, planes[0].height);
    PixelTensor::from_fn(w, h, |x, y| {
        let i = y * w + x;
        let (yy, cb, cr) = (planes[0].data[i], planes[1].data[i] - 128.0, planes[2].data[i] - 128.0);
        let r = yy + 1.402 * cr;
        let g = yy - 0.344_136 * cb - 0.714_136 * cr;
        let b = yy + 1.772 * cb;
        [r, g, b].map(|v| (v.round().clamp(0.0, 255.0) / 255.0) as f32)
    })
}

fn decimate(p: &Plane) -> Plane {
    let (w, h) = (p.width.div_ceil(2), p.height.div_ceil(2));
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (x0, y0) = (2 * x as i64, 2 * y as i64);
            let s = p.at_clamped(x0, y0) + p.at_clamped(x0 + 1, y0) + p.at_clamped(x0, y0 + 1) + p.at_clamped(x0 + 1, y0 + 1);
            data.push(s / 4.0);
        }
    }
    Plane { width: w, height: h, data }
}

// Bilinear upsampling; chroma sample (i, j) sits at luma position (2i + 0.5, 2j + 0.5).
fn upsample(p: &Plane, width: usize, height: usize) -> Plane {
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = (y as f64 - 0.5) / 2.0;
        let y0 = sy.floor();
        let fy = sy - y0;
        for x in 0..width {
            let sx = (x as f64 - 0.5) / 2.0;
            let x0 = sx.floor();
            let fx = sx - x0;
            let (x0, y0i) = (x0 as i64, y0 as i64);
            let top = p.at_clamped(x0, y0i) * (1.0 - fx) + p.at_clamped(x0 + 1, y0i) * fx;
            let bottom = p.at_clamped(x0, y0i + 1) * (1.0 - fx) + p.at_clamped(x0 + 1, y0i + 1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Plane { width, height, data }
}

fn encode_plane(p: &Plane, table: &QuantizationTable, huffman: &TableSet) -> Vec<u8> {
    let (bw, bh) = (p.width.div_ceil(8), p.height.div_ceil(8));
    let mut w = BitWriter::default();
    let mut prev_dc = 0;
    for by in 0..bh {
        for bx in 0..bw {
            let block: Block = std::array::from_fn(|i| {
                let (x, y) = (bx * 8 + i % 8, by * 8 + i / 8);
                p.at_clamped(x as i64, y as i64) - 128.0
            });
            let levels = dct::quantize(&dct::forward(&block), table);
            encode_block(&mut w, huffman, &levels, &mut prev_dc);
        }
    }
    w.finish()
}

fn decode_plane(payload: &[u8], width: usize, height: usize, table: &QuantizationTable, huffman: &TableSet) -> Result<Plane> {
    let (bw, bh) = (width.div_ceil(8), height.div_ceil(8));
    let mut data = vec![0.0; width * height];
    let mut r = BitReader::new(payload);
    let mut prev_dc = 0;
    for by in 0..bh {
        for bx in 0..bw {
            let levels = decode_block(&mut r, huffman, &mut prev_dc)?;
            let block = dct::inverse(&dct::dequantize(&levels, table));
            for (i, v) in block.iter().enumerate() {
                let (x, y) = (bx * 8 + i % 8, by * 8 + i / 8);
                if x < width && y < height {
                    data[y * width + x] = v + 128.0;
                }
            }
        }
    }
    Ok(Plane { width, height, data })
}

fn plane_dims(width: usize, height: usize, channel: usize, sub: ChromaSubsampling) -> (usize, usize) {
    match (channel, sub) {
        (0, _) | (_, ChromaSubsampling::None) => (width, height),
        (_, ChromaSubsampling::Quarter) => (width.div_ceil(2), height.div_ceil(2)),
    }
}

fn channel_tables(channel: usize, q: QualityLevel) -> (QuantizationTable, TableSet) {
    if channel == 0 {
        (QuantizationTable::luma(q), TableSet::luma())
    } else {
        (QuantizationTable::chroma(q), TableSet::chroma())
    }
}

pub fn encode(img: &PixelTensor, q: QualityLevel, opts: ReferenceOptions) -> Vec<u8> {
    let [y, cb, cr] = to_ycbcr(img);
    let planes = match opts.subsampling {
        ChromaSubsampling::None => [y, cb, cr],
        ChromaSubsampling::Quarter => [y, decimate(&cb), decimate(&cr)],
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(img.width() as u32).to_be_bytes());
    out.extend_from_slice(&(img.height() as u32).to_be_bytes());
    out.push(q.get());
    out.push(match opts.subsampling {
        ChromaSubsampling::None => 0,
        ChromaSubsampling::Quarter => 1,
    });
    out.push(3);
    for (c, plane) in planes.iter().enumerate() {
        let (table, huffman) = channel_tables(c, q);
        let payload = encode_plane(plane, &table, &huffman);
        out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&payload);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<PixelTensor> {
    if !is_reference_stream(bytes) {
        return Err(Error::data("missing MZDC magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::data("truncated MZDC header"));
    }
    if bytes[4] != VERSION {
        return Err(Error::data(format!("unsupported MZDC version {}", bytes[4])));
    }
    let width = u32::from_be_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let height = u32::from_be_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let q = QualityLevel::new(bytes[13]).map_err(|_| Error::data(format!("bad quality byte {}", bytes[13])))?;
    let sub = match bytes[14] {
        0 => ChromaSubsampling::None,
        1 => ChromaSubsampling::Quarter,
        m => return Err(Error::data(format!("unknown chroma mode {m}"))),
    };
    if bytes[15] != 3 {
        return Err(Error::data(format!("expected 3 channels, found {}", bytes[15])));
    }
    if width == 0 || height == 0 || width.saturating_mul(height) > 1 << 28 {
        return Err(Error::data(format!("implausible dimensions {width}x{height}")));
    }
    let mut pos = HEADER_LEN;
    let mut planes = Vec::with_capacity(3);
    for c in 0..3 {
        let len_bytes = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| Error::data("truncated channel length"))?;
        let len = u32::from_be_bytes(len_bytes.try_into().unwrap()) as usize;
        pos += 4;
        let payload = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::data("truncated channel payload"))?;
        pos += len;
        let (pw, ph) = plane_dims(width, height, c, sub);
        let (table, huffman) = channel_tables(c, q);
        let plane = decode_plane(payload, pw, ph, &table, &huffman)?;
        planes.push(if (pw, ph) == (width, height) {
            plane
        } else {
            upsample(&plane, width, height)
        });
    }
    let planes: [Plane; 3] = planes.try_into().map_err(|_| Error::data("channel count"))?;
    Ok(from_ycbcr(&planes))
}

/// Encodes with the default options and returns the stream together with
/// its decoded image.
pub fn compress_image_reference(img: &PixelTensor, q: QualityLevel) -> Result<(Vec<u8>, PixelTensor)> {
    compress_image_reference_with(img, q, ReferenceOptions::default())
}

pub fn compress_image_reference_with(img: &PixelTensor, q: QualityLevel, opts: ReferenceOptions) -> Result<(Vec<u8>, PixelTensor)> {
    let bytes = encode(img, q, opts);
    let decoded = decode(&bytes)?;
    Ok((bytes, decoded))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(v: u8) -> QualityLevel {
        QualityLevel::new(v).unwrap()
    }

    fn scene(w: usize, h: usize) -> PixelTensor {
        PixelTensor::from_fn(w, h, |x, y| {
            let (fx, fy) = (x as f32 / w as f32, y as f32 / h as f32);
            [
                0.5 + 0.4 * (fx * 9.0).sin() * fy,
                0.3 + 0.5 * fx * fy,
                0.6 - 0.3 * ((fx + fy) * 5.0).cos(),
            ]
        })
    }

    #[test]
    fn header_describes_image() {
        let img = scene(37, 21);
        let bytes = encode(&img, q(60), ReferenceOptions::default());
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(u32::from_be_bytes(bytes[5..9].try_into().unwrap()), 37);
        assert_eq!(u32::from_be_bytes(bytes[9..13].try_into().unwrap()), 21);
        assert_eq!(bytes[13], 60);
        let out = decode(&bytes).unwrap();
        assert_eq!((out.width(), out.height()), (37, 21));
    }

    #[test]
    fn near_lossless_at_q100() {
        let img = scene(45, 30);
        let (_, out) = compress_image_reference(&img, q(100)).unwrap();
        let err = img.to_rgb8().pixels().zip(out.to_rgb8().pixels())
            .flat_map(|(a, b)| (0..3).map(move |c| (a.0[c] as i32 - b.0[c] as i32).abs()))
            .max()
            .unwrap();
        assert!(err <= 2, "max error {err}");
    }

    #[test]
    fn subsampled_mode_round_trips() {
        let img = scene(33, 17);
        let opts = ReferenceOptions {
            subsampling: ChromaSubsampling::Quarter,
        };
        let (full, _) = compress_image_reference(&img, q(75)).unwrap();
        let (bytes, out) = compress_image_reference_with(&img, q(75), opts).unwrap();
        assert_eq!(bytes[14], 1);
        assert!(bytes.len() < full.len());
        assert!(out.max_abs_diff(&img) < 0.2);
    }

    #[test]
    fn deterministic_stream() {
        let img = scene(24, 24);
        assert_eq!(encode(&img, q(40), ReferenceOptions::default()), encode(&img, q(40), ReferenceOptions::default()));
    }

    #[test]
    fn corrupt_streams_are_rejected() {
        let bytes = encode(&scene(16, 16), q(50), ReferenceOptions::default());
        assert!(decode(&bytes[..10]).is_err());
        assert!(decode(&bytes[..bytes.len() - 5]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode(&bad).is_err());
        assert!(decode(b"JFIF....").is_err());
    }
}
