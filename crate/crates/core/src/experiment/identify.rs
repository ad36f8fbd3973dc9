use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{build_pipeline, AugmentationConfig, Mode};
use crate::error::{Error, Result};
use crate::model::{images_to_batch, load_checkpoint, Checkpoint};
use crate::pixels::load_image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identification {
    pub predicted_class: String,
    pub confidence: f32,
    /// Highest probability first.
    pub top_k: Vec<(String, f32)>,
    pub latency_seconds: f64,
}

/// A loaded checkpoint ready to answer repeated queries.
pub struct Identifier {
    checkpoint: Checkpoint,
    augmentation: AugmentationConfig,
}

impl Identifier {
    pub fn open(checkpoint_path: &Path) -> Result<Self> {
        let mut checkpoint = load_checkpoint(checkpoint_path)?;
        checkpoint.model.set_mode(Mode::Eval);
        let augmentation = checkpoint.meta.augmentation.clone().unwrap_or_default();
        Ok(Self {
            checkpoint,
            augmentation,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.checkpoint.meta.classes
    }

    /// Ranks the `k` most probable classes for one image. Latency covers
    /// decoding through ranking.
    pub fn identify(&self, image_path: &Path, k: usize) -> Result<Identification> {
        let n = self.classes().len();
        if k == 0 || k > n {
            return Err(Error::arg(format!("top-k must lie in 1..={n}, got {k}")));
        }
        let start = Instant::now();
        let img = load_image(image_path)?;
        let mut pipeline = build_pipeline(&self.augmentation, Mode::Eval)?;
        let input = pipeline.apply(&img)?;
        let model = &self.checkpoint.model;
        let batch = images_to_batch(&[input], model.device())?;
        let probs = model.forward_probabilities(&batch)?.squeeze(0)?.to_vec1::<f32>()?;
        let mut ranked: Vec<(usize, f32)> = probs.into_iter().enumerate().collect();
        // Ties keep class-index order.
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let top_k: Vec<(String, f32)> = ranked
            .into_iter()
            .take(k)
            .map(|(i, p)| (self.classes()[i].clone(), p))
            .collect();
        let latency_seconds = start.elapsed().as_secs_f64();
        Ok(Identification {
            predicted_class: top_k[0].0.clone(),
            confidence: top_k[0].1,
            top_k,
            latency_seconds,
        })
    }
}

pub fn identify(checkpoint_path: &Path, image_path: &Path, k: usize) -> Result<Identification> {
    Identifier::open(checkpoint_path)?.identify(image_path, k)
}
