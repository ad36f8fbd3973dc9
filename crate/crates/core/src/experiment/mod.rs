//! Quality-sweep orchestration, result tables and single-image identification.
//!
//! A run directory looks like:
//!
//! ```text
//! <run_dir>/manifest.json          original corpus with the shared split
//! <run_dir>/corpus/q050/...        corpus re-encoded at each quality
//! <run_dir>/cells/<backbone>_q050/ checkpoint, metrics.csv, training_result.json
//! <run_dir>/grid_result.json
//! <run_dir>/results.csv
//! ```

mod config;
mod identify;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use self::config::{CorpusSection, ExperimentConfig, GridSection, ModelSection};
pub use self::identify::{identify, Identification, Identifier};
pub use self::report::{emit_results_table, parse_results_csv, results_csv, ResultRow, ResultsTable, RESULTS_HEADER};
use crate::augment::AugmentationConfig;
use crate::compression::{compress_corpus_detailed, CompressedCorpus, CompressionConfig, CompressionReport, QualityLevel};
use crate::dataset::{save_manifest, scan_corpus, stratified_split, DatasetManifest, ImageRecord, SplitAssignment, SplitConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, BackboneName, BackboneSpec, BuildOptions};
use crate::training::{machine_descriptor, train, TrainingConfig, TrainingResult};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub backbones: Vec<BackboneSpec>,
    pub qualities: Vec<QualityLevel>,
    pub split: SplitConfig,
    pub augmentation: AugmentationConfig,
    pub training: TrainingConfig,
    /// Engine settings; the quality field is replaced per cell.
    pub compression: CompressionConfig,
    /// Head sizes and pretrained-weight location.
    pub model: ModelSection,
    pub corpus_root: PathBuf,
    pub run_dir: PathBuf,
    pub eval_quality: Option<QualityLevel>,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.backbones.is_empty() || self.qualities.is_empty() {
            return Err(Error::arg("a grid needs at least one backbone and one quality"));
        }
        if !config::unique_qualities(&self.qualities) {
            return Err(Error::arg("grid qualities must be unique"));
        }
        let names: std::collections::BTreeSet<_> = self.backbones.iter().map(|b| b.name).collect();
        if names.len() != self.backbones.len() {
            return Err(Error::arg("grid backbones must be unique"));
        }
        for b in &self.backbones {
            b.validate()?;
        }
        self.split.validate()?;
        self.augmentation.validate()?;
        self.training.validate()?;
        self.compression.validate()
    }

    /// Grid points in execution order: backbone-major, qualities as listed.
    pub fn cells(&self) -> Vec<(BackboneName, QualityLevel)> {
        self.backbones
            .iter()
            .flat_map(|b| self.qualities.iter().map(move |q| (b.name, *q)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub backbone: BackboneName,
    pub quality: QualityLevel,
    pub split_fingerprint: String,
    pub compression: Option<CompressionReport>,
    pub training: Option<TrainingResult>,
    pub error: Option<String>,
    pub dir: PathBuf,
}

impl CellResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub split_fingerprint: String,
    pub machine: String,
    pub training: TrainingConfig,
    pub cells: Vec<CellResult>,
}

impl GridResult {
    pub fn cell(&self, backbone: BackboneName, quality: QualityLevel) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.backbone == backbone && c.quality == quality)
    }

    pub fn failures(&self) -> Vec<&CellResult> {
        self.cells.iter().filter(|c| c.failed()).collect()
    }

    pub fn backbones(&self) -> Vec<BackboneName> {
        let mut seen = Vec::new();
        for c in &self.cells {
            if !seen.contains(&c.backbone) {
                seen.push(c.backbone);
            }
        }
        seen
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("grid result serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

pub fn quality_dir(run_dir: &Path, q: QualityLevel) -> PathBuf {
    run_dir.join("corpus").join(format!("q{:03}", q.get()))
}

pub fn cell_dir(run_dir: &Path, backbone: BackboneName, q: QualityLevel) -> PathBuf {
    run_dir.join("cells").join(format!("{backbone}_q{:03}", q.get()))
}

/// Re-expresses a split over compressed copies of its records.
fn remap(split: &SplitAssignment, original: &DatasetManifest, compressed: &CompressedCorpus) -> Result<SplitAssignment> {
    let by_path: HashMap<&Path, &ImageRecord> = original
        .records()
        .iter()
        .zip(&compressed.records)
        .map(|(o, c)| (o.path.as_path(), c))
        .collect();
    let mut missing = None;
    let mapped = split.map_paths(|r| match by_path.get(r.path.as_path()) {
        Some(c) => (*c).clone(),
        None => {
            missing.get_or_insert_with(|| r.path.clone());
            r.clone()
        }
    });
    match missing {
        Some(p) => Err(Error::data(format!("{} has no compressed counterpart", p.display()))),
        None => Ok(mapped),
    }
}

/// Scans the corpus, or reloads the manifest a previous run left behind so
/// resumed runs keep their split.
fn manifest_and_split(grid: &ExperimentGrid) -> Result<(DatasetManifest, SplitAssignment)> {
    let path = grid.run_dir.join("manifest.json");
    if path.exists() {
        let manifest = crate::dataset::load_manifest(&path)?;
        if let Some(split) = manifest.stored_split() {
            if manifest.seed() == Some(grid.split.seed) && manifest.train_fraction() == Some(grid.split.train_fraction) {
                log::info!("reusing split from {}", path.display());
                return Ok((manifest, split));
            }
        }
    }
    let mut manifest = scan_corpus(&grid.corpus_root)?;
    let split = stratified_split(&manifest, &grid.split)?;
    manifest.attach_split(&split, &grid.split)?;
    save_manifest(&manifest, &path)?;
    Ok((manifest, split))
}

fn run_cell(
    grid: &ExperimentGrid,
    spec: &BackboneSpec,
    split: &SplitAssignment,
    classes: &[String],
    dir: &Path,
) -> Result<TrainingResult> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let opts = BuildOptions {
        seed: grid.training.seed,
        pretrained_weights: grid.model.weights_path(spec.name),
    };
    let mut model = build_model(spec, &grid.model.head_spec(classes.len()), &opts)?;
    train(&mut model, split, classes, &grid.augmentation, &grid.training, Some(dir))
}

/// Runs every (backbone, quality) cell over one shared split. A failing
/// cell is recorded and the grid moves on.
pub fn run_grid(grid: &ExperimentGrid) -> Result<GridResult> {
    grid.validate()?;
    std::fs::create_dir_all(&grid.run_dir).map_err(|e| Error::io(&grid.run_dir, e))?;
    let (manifest, split) = manifest_and_split(grid)?;
    let fingerprint = split.fingerprint();
    let classes = manifest.classes().to_vec();

    let mut corpora: BTreeMap<QualityLevel, std::result::Result<CompressedCorpus, String>> = BTreeMap::new();
    let mut compressed = |q: QualityLevel| -> std::result::Result<CompressedCorpus, String> {
        corpora
            .entry(q)
            .or_insert_with(|| {
                let cfg = CompressionConfig {
                    quality: q,
                    ..grid.compression
                };
                log::info!("compressing corpus at quality {q}");
                compress_corpus_detailed(&manifest, &cfg, &quality_dir(&grid.run_dir, q)).map_err(|e| e.to_string())
            })
            .clone()
    };

    let mut cells = Vec::new();
    for (name, q) in grid.cells() {
        let spec = grid.backbones.iter().find(|b| b.name == name).expect("cell backbone in grid");
        let dir = cell_dir(&grid.run_dir, name, q);
        log::info!("cell {name} q{q}");
        let mut cell = CellResult {
            backbone: name,
            quality: q,
            split_fingerprint: fingerprint.clone(),
            compression: None,
            training: None,
            error: None,
            dir: dir.clone(),
        };
        let outcome = compressed(q).and_then(|corpus| {
            cell.compression = Some(corpus.report.clone());
            let mut cell_split = remap(&split, &manifest, &corpus).map_err(|e| e.to_string())?;
            if let Some(eq) = grid.eval_quality {
                let eval = compressed(eq)?;
                cell_split.test = remap(&split, &manifest, &eval).map_err(|e| e.to_string())?.test;
            }
            run_cell(grid, spec, &cell_split, &classes, &dir).map_err(|e| e.to_string())
        });
        match outcome {
            Ok(r) => cell.training = Some(r),
            Err(e) => {
                log::error!("cell {name} q{q} failed: {e}");
                cell.error = Some(e);
            }
        }
        cells.push(cell);
    }

    let result = GridResult {
        split_fingerprint: fingerprint,
        machine: machine_descriptor(),
        training: grid.training.clone(),
        cells,
    };
    result.save(&grid.run_dir.join("grid_result.json"))?;
    let csv = results_csv(&result);
    let path = grid.run_dir.join("results.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(path, e))?;
    Ok(result)
}
