use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::GridResult;
use crate::compression::QualityLevel;
use crate::error::{Error, Result};
use crate::model::BackboneName;

pub const RESULTS_HEADER: &str =
    "backbone,quality,file_size_bytes,first_epoch_acc,final_acc,epochs,total_seconds,seconds_per_epoch";

const FAILED: &str = "failed";

/// One results-CSV row. `None` fields belong to a failed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub backbone: BackboneName,
    pub quality: QualityLevel,
    pub file_size_bytes: Option<u64>,
    pub image_count: Option<usize>,
    pub first_epoch_acc: Option<f64>,
    pub final_acc: Option<f64>,
    pub epochs: Option<usize>,
    pub total_seconds: Option<f64>,
    pub seconds_per_epoch: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    pub text: String,
    pub csv: String,
}

fn rows_for(gr: &GridResult, backbone: BackboneName) -> Vec<ResultRow> {
    let mut cells: Vec<_> = gr.cells.iter().filter(|c| c.backbone == backbone).collect();
    cells.sort_by_key(|c| std::cmp::Reverse(c.quality));
    cells
        .into_iter()
        .map(|c| {
            let t = c.training.as_ref();
            ResultRow {
                backbone,
                quality: c.quality,
                file_size_bytes: c.compression.as_ref().map(|r| r.output_bytes),
                image_count: c.compression.as_ref().map(|r| r.image_count),
                first_epoch_acc: t.map(|t| t.first_epoch_accuracy),
                final_acc: t.map(|t| t.final_accuracy),
                epochs: t.map(|t| t.epochs_run),
                total_seconds: t.map(|t| t.total_seconds),
                seconds_per_epoch: t.map(|t| t.seconds_per_epoch),
            }
        })
        .collect()
}

fn field<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| FAILED.to_string(), |v| v.to_string())
}

fn csv_lines(rows: &[ResultRow], out: &mut String) {
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.backbone,
            r.quality,
            field(r.file_size_bytes),
            field(r.first_epoch_acc),
            field(r.final_acc),
            field(r.epochs),
            field(r.total_seconds),
            field(r.seconds_per_epoch)
        );
    }
}

/// Results CSV for every backbone in the grid.
pub fn results_csv(gr: &GridResult) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for b in gr.backbones() {
        csv_lines(&rows_for(gr, b), &mut out);
    }
    out
}

fn megabytes(bytes: u64) -> String {
    let mb = bytes as f64 / 1e6;
    if mb >= 10.0 {
        format!("{mb:.0}MB")
    } else {
        format!("{mb:.2}MB")
    }
}

fn duration(seconds: f64) -> String {
    let minutes = (seconds / 60.0).round() as u64;
    match (minutes / 60, minutes % 60) {
        (0, 0) => format!("{seconds:.0} s"),
        (0, m) => format!("{m} min"),
        (h, m) => format!("{h} hr {m} min"),
    }
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| FAILED.to_string(), |a| format!("{:.1}%", a * 100.0))
}

/// One backbone's rows, highest quality first, as a fixed-width table and
/// as CSV. Missing or failed cells are marked `failed`.
pub fn emit_results_table(gr: &GridResult, backbone: BackboneName) -> Result<ResultsTable> {
    let rows = rows_for(gr, backbone);
    if rows.is_empty() {
        return Err(Error::arg(format!("grid has no cells for backbone {backbone}")));
    }
    let header = [
        "Experiment",
        "File sizes",
        "Percent of the Original Quality",
        "Accuracy (first / final)",
        "Epochs (Early stopping)",
        "Total Time",
        "Time per epoch (mins)",
    ];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                if r.quality == QualityLevel::MAX { "Normal run" } else { "JPEG compression" }.to_string(),
                match (r.file_size_bytes, r.image_count) {
                    (Some(b), Some(n)) => format!("{} ({n})", megabytes(b)),
                    _ => FAILED.to_string(),
                },
                format!("{}%", r.quality),
                match (r.first_epoch_acc, r.final_acc) {
                    (Some(_), Some(_)) => format!("{} / {}", percent(r.first_epoch_acc), percent(r.final_acc)),
                    _ => FAILED.to_string(),
                },
                field(r.epochs),
                r.total_seconds.map_or_else(|| FAILED.to_string(), duration),
                r.seconds_per_epoch
                    .map_or_else(|| FAILED.to_string(), |s| format!("{:.2}", s / 60.0)),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..7)
        .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let mut text = format!("{backbone}\n");
    let line = |cols: &[&str]| {
        cols.iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let _ = writeln!(text, "{}", line(&header));
    let _ = writeln!(text, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    for r in &body {
        let cols: Vec<&str> = r.iter().map(String::as_str).collect();
        let _ = writeln!(text, "{}", line(&cols).trim_end());
    }
    let mut csv = format!("{RESULTS_HEADER}\n");
    csv_lines(&rows, &mut csv);
    Ok(ResultsTable { rows, text, csv })
}

fn opt<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<Option<T>> {
    if s == FAILED {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Parse {
        path: "results.csv".into(),
        line,
        column: 0,
        message: format!("bad {name} value '{s}'"),
    })
}

/// Reads a results CSV back into rows. Image counts are not part of the CSV
/// and come back as `None`.
pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let parse_err = |line: usize, message: String| Error::Parse {
        path: "results.csv".into(),
        line,
        column: 0,
        message,
    };
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != RESULTS_HEADER {
        return Err(parse_err(1, format!("unexpected header, want {RESULTS_HEADER}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        let backbone = rec[0].parse().map_err(|e: Error| parse_err(line, e.to_string()))?;
        let quality = rec[1].parse().map_err(|e: Error| parse_err(line, e.to_string()))?;
        rows.push(ResultRow {
            backbone,
            quality,
            file_size_bytes: opt(&rec[2], "file_size_bytes", line)?,
            image_count: None,
            first_epoch_acc: opt(&rec[3], "first_epoch_acc", line)?,
            final_acc: opt(&rec[4], "final_acc", line)?,
            epochs: opt(&rec[5], "epochs", line)?,
            total_seconds: opt(&rec[6], "total_seconds", line)?,
            seconds_per_epoch: opt(&rec[7], "seconds_per_epoch", line)?,
        });
    }
    Ok(rows)
}
