use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneName {
    Vgg16Bn,
    WideResnet50,
}

impl BackboneName {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneName::Vgg16Bn => "vgg16_bn",
            BackboneName::WideResnet50 => "wide_resnet50",
        }
    }
}

impl fmt::Display for BackboneName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg16_bn" => Ok(BackboneName::Vgg16Bn),
            "wide_resnet50" | "wide_resnet50_2" => Ok(BackboneName::WideResnet50),
            other => Err(Error::arg(format!(
                "unknown backbone '{other}' (expected vgg16_bn or wide_resnet50)"
            ))),
        }
    }
}

/// Layer widths and depths of the backbone.
///
/// `Full` is the published architecture and is what pretrained weights fit.
/// `Desk` keeps the block structure (batch-normed 3x3 stacks for VGG,
/// widened bottlenecks for the residual net) at a fraction of the width and
/// depth so it trains on a CPU in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneScale {
    #[default]
    Full,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: BackboneName,
    pub pretrained: bool,
    pub output_dim: usize,
    pub scale: BackboneScale,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            name: BackboneName::WideResnet50,
            pretrained: true,
            output_dim: 1000,
            scale: BackboneScale::Full,
        }
    }
}

impl BackboneSpec {
    pub fn new(name: BackboneName) -> Self {
        Self {
            name,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 {
            return Err(Error::arg("backbone output_dim must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSpec {
    pub hidden_dim: usize,
    pub dropout_p: f64,
    pub num_classes: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            dropout_p: 0.5,
            num_classes: 268,
        }
    }
}

impl HeadSpec {
    pub fn with_classes(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::arg("head hidden_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::arg(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::arg(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    /// Weights and biases of both head layers for a backbone emitting `n` features.
    pub fn parameter_count(&self, n: usize) -> usize {
        n * self.hidden_dim + self.hidden_dim + self.hidden_dim * self.num_classes + self.num_classes
    }
}
