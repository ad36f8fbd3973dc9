//! Single-document TOML experiment configuration.
//!
//! ```toml
//! [corpus]
//! root = "data/muzzles"
//!
//! [split]
//! train_fraction = 0.7
//! seed = 0
//!
//! [augmentation]
//! target_size = 300
//!
//! [compression]
//! engine = "standard"
//!
//! [model]
//! backbone = "wide_resnet50"
//! weights_dir = "weights"
//!
//! [training]
//! max_epochs = 50
//!
//! [grid]
//! backbones = ["wide_resnet50", "vgg16_bn"]
//! qualities = [100, 50, 25]
//! run_dir = "runs/sweep"
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentGrid;
use crate::augment::AugmentationConfig;
use crate::compression::{CompressionConfig, QualityLevel};
use crate::dataset::SplitConfig;
use crate::error::{Error, Result};
use crate::model::{BackboneName, BackboneScale, BackboneSpec, HeadSpec};
use crate::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub root: PathBuf,
}

/// Architecture choices shared by every backbone in a run. The class count
/// comes from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Backbone for single-model commands; sweeps use `grid.backbones`.
    pub backbone: BackboneName,
    pub pretrained: bool,
    pub scale: BackboneScale,
    pub output_dim: usize,
    pub hidden_dim: usize,
    pub dropout_p: f64,
    /// Directory holding `<backbone>.safetensors` pretrained weights.
    pub weights_dir: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = BackboneSpec::default();
        let h = HeadSpec::default();
        Self {
            backbone: b.name,
            pretrained: b.pretrained,
            scale: b.scale,
            output_dim: b.output_dim,
            hidden_dim: h.hidden_dim,
            dropout_p: h.dropout_p,
            weights_dir: None,
        }
    }
}

impl ModelSection {
    pub fn backbone_spec(&self, name: BackboneName) -> BackboneSpec {
        BackboneSpec {
            name,
            pretrained: self.pretrained,
            output_dim: self.output_dim,
            scale: self.scale,
        }
    }

    pub fn head_spec(&self, num_classes: usize) -> HeadSpec {
        HeadSpec {
            hidden_dim: self.hidden_dim,
            dropout_p: self.dropout_p,
            num_classes,
        }
    }

    pub fn weights_path(&self, name: BackboneName) -> Option<PathBuf> {
        self.weights_dir.as_ref().map(|d| d.join(format!("{name}.safetensors")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub backbones: Vec<BackboneName>,
    pub qualities: Vec<QualityLevel>,
    pub run_dir: PathBuf,
    /// Evaluate every cell on test images at this quality instead of the
    /// cell's own.
    pub eval_quality: Option<QualityLevel>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            backbones: vec![BackboneName::WideResnet50, BackboneName::Vgg16Bn],
            qualities: [100, 50, 25].map(|q| QualityLevel::new(q).expect("valid quality")).to_vec(),
            run_dir: PathBuf::from("runs/sweep"),
            eval_quality: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSection,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    #[serde(default)]
    pub compression: CompressionConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub grid: GridSection,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, column)
}

impl ExperimentConfig {
    /// Parses a config document. Relative paths resolve against the
    /// directory holding `path`.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            Error::Parse {
                path: path.to_path_buf(),
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.corpus.root);
        resolve(&mut cfg.grid.run_dir);
        if let Some(w) = cfg.model.weights_dir.as_mut() {
            resolve(w);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.augmentation.validate()?;
        self.compression.validate()?;
        self.training.validate()?;
        self.model.head_spec(2).validate()?;
        self.model.backbone_spec(self.model.backbone).validate()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<ExperimentGrid> {
        let grid = ExperimentGrid {
            backbones: self.grid.backbones.iter().map(|b| self.model.backbone_spec(*b)).collect(),
            qualities: self.grid.qualities.clone(),
            split: self.split,
            augmentation: self.augmentation.clone(),
            training: self.training.clone(),
            compression: self.compression,
            model: self.model.clone(),
            corpus_root: self.corpus.root.clone(),
            run_dir: self.grid.run_dir.clone(),
            eval_quality: self.grid.eval_quality,
        };
        grid.validate()?;
        Ok(grid)
    }
}

pub(crate) fn unique_qualities(q: &[QualityLevel]) -> bool {
    q.iter().collect::<BTreeSet<_>>().len() == q.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_takes_defaults() {
        let cfg = ExperimentConfig::parse("[corpus]\nroot = \"data\"\n", Path::new("/x/exp.toml")).unwrap();
        assert_eq!(cfg.corpus.root, PathBuf::from("/x/data"));
        assert_eq!(cfg.training, TrainingConfig::default());
        assert_eq!(cfg.grid.qualities.iter().map(|q| q.get()).collect::<Vec<_>>(), [100, 50, 25]);
        assert_eq!(cfg.grid().unwrap().cells().len(), 6);
    }

    #[test]
    fn errors_carry_position() {
        let text = "[corpus]\nroot = \"data\"\n[training]\nmax_epochs = \"many\"\n";
        match ExperimentConfig::parse(text, Path::new("exp.toml")) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (4, 14)),
            other => panic!("expected parse error, got {other:?}"),
        }
        let err = ExperimentConfig::parse("[corpus]\nroot = \"d\"\n[grid]\nqualities = [50, 50]\n", Path::new("e.toml"));
        assert!(matches!(err.unwrap().grid(), Err(Error::Argument(_))));
        assert!(ExperimentConfig::parse("[corpus]\nroot = \"d\"\n[grid]\nqualities = [0]\n", Path::new("e.toml")).is_err());
        assert!(ExperimentConfig::parse("[corpus]\nroot = \"d\"\n[nonsense]\n", Path::new("e.toml")).is_err());
    }
}
