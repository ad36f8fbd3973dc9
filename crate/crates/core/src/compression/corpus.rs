//! Corpus re-encoding at a fixed quality and rate-distortion summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::codec::{self, ChromaSubsampling, ReferenceOptions};
use super::QualityLevel;
use crate::dataset::{DatasetManifest, ImageRecord};
use crate::error::{Error, Result};
use crate::pixels::{self, PixelTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    /// The in-crate block-DCT codec; writes `.mzdc` streams.
    Reference,
    /// Baseline JFIF through the `image` crate; writes `.jpg`.
    #[default]
    Standard,
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Engine::Reference),
            "standard" => Ok(Engine::Standard),
            other => Err(Error::arg(format!("unknown engine '{other}' (expected reference|standard)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    pub quality: QualityLevel,
    pub engine: Engine,
    /// Extra entropy-table optimization pass. Neither engine implements it.
    pub optimize: bool,
    pub subsampling: ChromaSubsampling,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            quality: QualityLevel::MAX,
            engine: Engine::Standard,
            optimize: false,
            subsampling: ChromaSubsampling::None,
        }
    }
}

impl CompressionConfig {
    pub fn with_quality(quality: QualityLevel) -> Self {
        Self {
            quality,
            ..Self::default()
        }
    }

    /// Quality 100 copies originals byte for byte.
    pub fn is_passthrough(&self) -> bool {
        self.quality == QualityLevel::MAX
    }

    pub fn validate(&self) -> Result<()> {
        if self.optimize {
            return Err(Error::arg("the optimize pass is not supported by the available encoders"));
        }
        if self.engine == Engine::Standard && self.subsampling != ChromaSubsampling::None {
            return Err(Error::arg("the standard engine only writes 4:4:4 chroma"));
        }
        Ok(())
    }

    fn extension(&self) -> Option<&'static str> {
        match (self.is_passthrough(), self.engine) {
            (true, _) => None,
            (false, Engine::Standard) => Some("jpg"),
            (false, Engine::Reference) => Some("mzdc"),
        }
    }
}

/// Encodes one image with the chosen engine and returns the file bytes.
pub fn encode_image(img: &RgbImage, cfg: &CompressionConfig) -> Result<Vec<u8>> {
    match cfg.engine {
        Engine::Standard => {
            let mut buf = Vec::new();
            JpegEncoder::new_with_quality(&mut buf, cfg.quality.get())
                .encode_image(img)
                .map_err(|e| Error::data(format!("jpeg encoding failed: {e}")))?;
            Ok(buf)
        }
        Engine::Reference => Ok(codec::encode(
            &PixelTensor::from_rgb8(img),
            cfg.quality,
            ReferenceOptions {
                subsampling: cfg.subsampling,
            },
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub quality: QualityLevel,
    pub input_bytes: u64,
    pub output_bytes: u64,
    pub image_count: usize,
    /// Mean over all pixels and channels, in 8-bit intensity units squared.
    pub mean_squared_error: f64,
    /// `None` when the output is lossless.
    pub psnr_db: Option<f64>,
}

impl CompressionReport {
    pub fn is_lossless(&self) -> bool {
        self.mean_squared_error == 0.0
    }
}

pub fn psnr_from_mse(mse: f64) -> Option<f64> {
    (mse > 0.0).then(|| 10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// Sum of squared 8-bit differences and the number of samples compared.
pub fn squared_error(a: &RgbImage, b: &RgbImage) -> Result<(f64, u64)> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::data(format!(
            "decoded size {:?} differs from original {:?}",
            b.dimensions(),
            a.dimensions()
        )));
    }
    let sse = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok((sse, a.as_raw().len() as u64))
}

/// Where a record lands under `out_root` for the given configuration.
pub fn output_path(record: &ImageRecord, out_root: &Path, cfg: &CompressionConfig) -> PathBuf {
    let file = record.path.file_name().map(PathBuf::from).unwrap_or_default();
    let file = match cfg.extension() {
        Some(ext) => file.with_extension(ext),
        None => file,
    };
    out_root.join(&record.class_id).join(file)
}

#[derive(Debug, Clone)]
pub struct CompressedCorpus {
    pub report: CompressionReport,
    /// Output records, index-aligned with the manifest's records.
    pub records: Vec<ImageRecord>,
}

impl CompressedCorpus {
    pub fn manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::from_records(self.records.clone())
    }
}

pub fn compress_corpus(manifest: &DatasetManifest, cfg: &CompressionConfig, out_root: &Path) -> Result<CompressionReport> {
    compress_corpus_detailed(manifest, cfg, out_root).map(|c| c.report)
}

/// Re-encodes every record into a mirrored tree under `out_root`.
pub fn compress_corpus_detailed(manifest: &DatasetManifest, cfg: &CompressionConfig, out_root: &Path) -> Result<CompressedCorpus> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(manifest.records().len());
    let mut seen = std::collections::HashSet::new();
    let (mut input_bytes, mut output_bytes) = (0u64, 0u64);
    let (mut sse, mut samples) = (0f64, 0u64);
    for record in manifest.records() {
        let dest = output_path(record, out_root, cfg);
        if !seen.insert(dest.clone()) {
            return Err(Error::data(format!("two inputs map to the same output {}", dest.display())));
        }
        let dir = dest.parent().expect("output path has a class directory");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let original = fs::read(&record.path).map_err(|e| Error::io(&record.path, e))?;
        let decoded_original = pixels::decode_rgb8(&original).map_err(|reason| Error::Decode {
            path: record.path.clone(),
            reason,
        })?;
        let bytes = if cfg.is_passthrough() {
            samples += decoded_original.as_raw().len() as u64;
            original.clone()
        } else {
            let encoded = encode_image(&decoded_original, cfg)?;
            let roundtrip = pixels::decode_rgb8(&encoded).map_err(|reason| Error::Decode {
                path: dest.clone(),
                reason,
            })?;
            let (e, n) = squared_error(&decoded_original, &roundtrip)?;
            sse += e;
            samples += n;
            encoded
        };
        fs::write(&dest, &bytes).map_err(|e| Error::io(&dest, e))?;
        input_bytes += original.len() as u64;
        output_bytes += bytes.len() as u64;
        records.push(ImageRecord {
            path: dest,
            byte_size: bytes.len() as u64,
            ..record.clone()
        });
    }
    let mse = if samples == 0 { 0.0 } else { sse / samples as f64 };
    Ok(CompressedCorpus {
        report: CompressionReport {
            quality: cfg.quality,
            input_bytes,
            output_bytes,
            image_count: records.len(),
            mean_squared_error: mse,
            psnr_db: psnr_from_mse(mse),
        },
        records,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateDistortionRow {
    pub report: CompressionReport,
    /// Why this row breaks the expected ordering against the row above it.
    pub violation: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateDistortionTable {
    pub rows: Vec<RateDistortionRow>,
}

pub const RD_CSV_HEADER: &str = "quality,image_count,input_bytes,output_bytes,mse,psnr_db";

/// Orders reports by falling quality and flags rows where size grows or
/// distortion shrinks relative to the previous (higher-quality) row.
pub fn rate_distortion_report(reports: &[CompressionReport]) -> Result<RateDistortionTable> {
    if reports.is_empty() {
        return Err(Error::arg("rate-distortion report needs at least one compression report"));
    }
    let mut sorted = reports.to_vec();
    sorted.sort_by_key(|r| std::cmp::Reverse(r.quality));
    let mut rows: Vec<RateDistortionRow> = Vec::with_capacity(sorted.len());
    for report in sorted {
        let violation = rows.last().and_then(|prev| {
            let p = &prev.report;
            let mut issues = Vec::new();
            if report.output_bytes > p.output_bytes {
                issues.push(format!("size grew from {} to {} bytes", p.output_bytes, report.output_bytes));
            }
            if report.mean_squared_error < p.mean_squared_error {
                issues.push(format!(
                    "mse fell from {:.4} to {:.4}",
                    p.mean_squared_error, report.mean_squared_error
                ));
            }
            (!issues.is_empty()).then(|| issues.join("; "))
        });
        rows.push(RateDistortionRow { report, violation });
    }
    Ok(RateDistortionTable { rows })
}

impl RateDistortionTable {
    pub fn is_monotone(&self) -> bool {
        self.rows.iter().all(|r| r.violation.is_none())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(RD_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let r = &row.report;
            let psnr = r.psnr_db.map_or_else(|| "lossless".to_string(), |p| format!("{p:.4}"));
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{}",
                r.quality, r.image_count, r.input_bytes, r.output_bytes, r.mean_squared_error, psnr
            );
        }
        out
    }

    /// Human-readable table with a trailing column for ordering violations.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:>7} {:>7} {:>14} {:>14} {:>10} {:>9}  flags\n",
            "quality", "images", "input_bytes", "output_bytes", "mse", "psnr_db"
        );
        for row in &self.rows {
            let r = &row.report;
            let psnr = r.psnr_db.map_or_else(|| "lossless".to_string(), |p| format!("{p:.2}"));
            let _ = writeln!(
                out,
                "{:>7} {:>7} {:>14} {:>14} {:>10.3} {:>9}  {}",
                r.quality.get(),
                r.image_count,
                r.input_bytes,
                r.output_bytes,
                r.mean_squared_error,
                psnr,
                row.violation.as_deref().unwrap_or("")
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(q: u8, out: u64, mse: f64) -> CompressionReport {
        CompressionReport {
            quality: QualityLevel::new(q).unwrap(),
            input_bytes: 1000,
            output_bytes: out,
            image_count: 4,
            mean_squared_error: mse,
            psnr_db: psnr_from_mse(mse),
        }
    }

    #[test]
    fn rd_rows_sorted_and_checked() {
        let t = rate_distortion_report(&[report(25, 100, 9.0), report(100, 1000, 0.0), report(50, 200, 4.0)]).unwrap();
        let qs: Vec<u8> = t.rows.iter().map(|r| r.report.quality.get()).collect();
        assert_eq!(qs, [100, 50, 25]);
        assert!(t.is_monotone());
        assert!(t.to_csv().starts_with("quality,image_count,input_bytes,output_bytes,mse,psnr_db\n100,4,1000,1000,0.000000,lossless\n"));
    }

    #[test]
    fn rd_flags_violations_without_failing() {
        let t = rate_distortion_report(&[report(50, 200, 4.0), report(25, 300, 3.0)]).unwrap();
        assert!(!t.is_monotone());
        let v = t.rows[1].violation.as_deref().unwrap();
        assert!(v.contains("size grew") && v.contains("mse fell"), "{v}");
        assert!(t.render().contains("size grew"));
    }

    #[test]
    fn rd_single_row_and_empty() {
        let t = rate_distortion_report(&[report(50, 200, 4.0)]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert!(t.is_monotone());
        assert!(rate_distortion_report(&[]).is_err());
    }

    #[test]
    fn psnr_values() {
        assert_eq!(psnr_from_mse(0.0), None);
        assert!((psnr_from_mse(255.0 * 255.0).unwrap()).abs() < 1e-12);
        assert!((psnr_from_mse(1.0).unwrap() - 48.1308).abs() < 1e-4);
    }

    #[test]
    fn output_paths() {
        let rec = ImageRecord {
            path: "/data/cow7/a.JPG".into(),
            class_id: "cow7".into(),
            width: 1,
            height: 1,
            byte_size: 1,
        };
        let mut cfg = CompressionConfig::default();
        assert_eq!(output_path(&rec, Path::new("/o"), &cfg), Path::new("/o/cow7/a.JPG"));
        cfg.quality = QualityLevel::new(50).unwrap();
        assert_eq!(output_path(&rec, Path::new("/o"), &cfg), Path::new("/o/cow7/a.jpg"));
        cfg.engine = Engine::Reference;
        assert_eq!(output_path(&rec, Path::new("/o"), &cfg), Path::new("/o/cow7/a.mzdc"));
    }

    #[test]
    fn unsupported_options_are_rejected() {
        let cfg = CompressionConfig {
            optimize: true,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = CompressionConfig {
            subsampling: ChromaSubsampling::Quarter,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
