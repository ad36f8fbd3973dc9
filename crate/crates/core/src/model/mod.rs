//! Transfer-learning classifier: a convolutional backbone followed by the
//! identification head `linear(n -> hidden) -> ReLU -> dropout -> linear(hidden -> classes)`.
//!
//! The head is appended after the backbone's own `n`-way output layer
//! rather than replacing it. Training consumes logits; probabilities are
//! the softmax of those logits.

mod backbone;
pub mod checkpoint;
pub mod spec;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::{linear, Linear, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use self::backbone::adaptive_avg_pool2d;
use self::backbone::Backbone;
pub use self::checkpoint::{load_checkpoint, load_checkpoint_into, save_checkpoint, Checkpoint, CheckpointMeta};
pub use self::spec::{BackboneName, BackboneScale, BackboneSpec, HeadSpec};
pub use crate::augment::Mode;
use crate::error::{Error, Result};
use crate::pixels::{PixelTensor, CHANNELS};

const BACKBONE_PREFIX: &str = "backbone";
const HEAD_PREFIX: &str = "head";

/// Inverted dropout with its own seeded mask stream.
pub(crate) struct Dropout {
    p: f32,
    rng: Mutex<ChaCha8Rng>,
}

impl Dropout {
    pub(crate) fn new(p: f64, seed: u64) -> Self {
        Self {
            p: p as f32,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub(crate) fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        if !train || self.p == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.p;
        let mask: Vec<f32> = {
            let mut rng = self.rng.lock().expect("dropout rng poisoned");
            (0..x.elem_count())
                .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        };
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
        x * mask
    }
}

struct Head {
    fc1: Linear,
    dropout: Dropout,
    fc2: Linear,
}

impl Head {
    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let h = self.fc1.forward(x)?.relu()?;
        let h = self.dropout.forward_t(&h, train)?;
        self.fc2.forward(&h)
    }
}

pub struct ClassifierModel {
    backbone_spec: BackboneSpec,
    head_spec: HeadSpec,
    varmap: VarMap,
    backbone: Backbone,
    head: Head,
    mode: Mode,
    device: Device,
}

/// Options controlling weight initialization.
#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    pub seed: u64,
    /// Safetensors file with backbone weights under torchvision names.
    /// Required when the backbone spec asks for pretraining.
    pub pretrained_weights: Option<std::path::PathBuf>,
}

/// Builds a classifier with seeded fresh weights, loading pretrained
/// backbone weights when the spec asks for them.
pub fn build_model(backbone: &BackboneSpec, head: &HeadSpec, opts: &BuildOptions) -> Result<ClassifierModel> {
    let model = ClassifierModel::new_uninitialized(backbone, head, opts.seed)?;
    model.initialize(opts.seed)?;
    if backbone.pretrained {
        let path = opts.pretrained_weights.as_deref().ok_or_else(|| {
            Error::arg(format!(
                "backbone {} is marked pretrained but no weights file was given; convert the torchvision weights to safetensors or set pretrained = false",
                backbone.name
            ))
        })?;
        model.load_backbone_weights(path)?;
    }
    Ok(model)
}

impl ClassifierModel {
    fn new_uninitialized(backbone_spec: &BackboneSpec, head_spec: &HeadSpec, seed: u64) -> Result<Self> {
        backbone_spec.validate()?;
        head_spec.validate()?;
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &device);
        let backbone = Backbone::new(backbone_spec, vb.pp(BACKBONE_PREFIX), seed)?;
        let hvb = vb.pp(HEAD_PREFIX);
        let head = Head {
            fc1: linear(backbone_spec.output_dim, head_spec.hidden_dim, hvb.pp("fc1"))?,
            dropout: Dropout::new(head_spec.dropout_p, seed ^ 0x4845_4144),
            fc2: linear(head_spec.hidden_dim, head_spec.num_classes, hvb.pp("fc2"))?,
        };
        Ok(Self {
            backbone_spec: backbone_spec.clone(),
            head_spec: head_spec.clone(),
            varmap,
            backbone,
            head,
            mode: Mode::Eval,
            device,
        })
    }

    /// Seeded re-initialization: convolutions use Kaiming-normal (fan-out),
    /// linear layers the uniform fan-in scheme for weights and biases,
    /// convolution biases zero. Normalization parameters keep their
    /// constant defaults.
    fn initialize(&self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vars = self.sorted_vars();
        let shapes: HashMap<&str, Vec<usize>> = vars.iter().map(|(n, v)| (n.as_str(), v.dims().to_vec())).collect();
        for (name, var) in &vars {
            let dims = var.dims();
            let values: Option<Vec<f32>> = match dims.len() {
                4 => {
                    let fan_out = (dims[0] * dims[2] * dims[3]) as f32;
                    let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("finite std");
                    Some((0..var.elem_count()).map(|_| normal.sample(&mut rng)).collect())
                }
                2 => Some(uniform_fan_in(&mut rng, var.elem_count(), dims[1])),
                1 if name.ends_with(".bias") => {
                    let weight = format!("{}.weight", name.trim_end_matches(".bias"));
                    match shapes.get(weight.as_str()).map(|d| d.as_slice()) {
                        Some([_, fan_in]) => Some(uniform_fan_in(&mut rng, var.elem_count(), *fan_in)),
                        Some([_, _, _, _]) => Some(vec![0.0; var.elem_count()]),
                        _ => None,
                    }
                }
                _ => None,
            };
            if let Some(values) = values {
                var.set(&Tensor::from_vec(values, dims, &self.device)?)?;
            }
        }
        Ok(())
    }

    /// Variables sorted by name, for reproducible iteration.
    pub(crate) fn sorted_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap poisoned");
        let mut vars: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    /// Copies backbone tensors from a safetensors file keyed by torchvision names.
    pub fn load_backbone_weights(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device).map_err(|e| Error::Integrity {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let prefix = format!("{BACKBONE_PREFIX}.");
        for (name, var) in self.sorted_vars() {
            let Some(key) = name.strip_prefix(&prefix) else { continue };
            let t = tensors.get(key).ok_or_else(|| Error::SpecMismatch {
                expected: format!("{} with tensor '{key}'", self.backbone_spec.name),
                found: format!("weights file {} without it", path.display()),
            })?;
            if t.dims() != var.dims() {
                return Err(Error::SpecMismatch {
                    expected: format!("'{key}' of shape {:?}", var.dims()),
                    found: format!("shape {:?}", t.dims()),
                });
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    pub fn backbone_spec(&self) -> &BackboneSpec {
        &self.backbone_spec
    }

    pub fn head_spec(&self) -> &HeadSpec {
        &self.head_spec
    }

    pub fn num_classes(&self) -> usize {
        self.head_spec.num_classes
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// `(fan_in, fan_out)` of the two head layers.
    pub fn head_shapes(&self) -> [(usize, usize); 2] {
        let dims = |name: &str| {
            let v = self.var(name).expect("head variable exists");
            let d = v.dims();
            (d[1], d[0])
        };
        [dims("head.fc1.weight"), dims("head.fc2.weight")]
    }

    fn var(&self, name: &str) -> Option<Var> {
        self.varmap.data().lock().expect("varmap poisoned").get(name).cloned()
    }

    pub fn parameter_count(&self) -> usize {
        self.count_params(|_| true)
    }

    pub fn backbone_parameter_count(&self) -> usize {
        self.count_params(|n| n.starts_with(BACKBONE_PREFIX))
    }

    pub fn head_parameter_count(&self) -> usize {
        self.count_params(|n| n.starts_with(HEAD_PREFIX))
    }

    fn count_params(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.sorted_vars()
            .iter()
            .filter(|(n, _)| keep(n) && !n.ends_with("running_mean") && !n.ends_with("running_var"))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Variables updated by the optimizer. Normalization running statistics
    /// are excluded; they are updated by the forward pass.
    pub fn trainable_vars(&self, freeze_backbone: bool) -> Vec<Var> {
        self.sorted_vars()
            .into_iter()
            .filter(|(n, _)| !n.ends_with("running_mean") && !n.ends_with("running_var"))
            .filter(|(n, _)| !freeze_backbone || n.starts_with(HEAD_PREFIX))
            .map(|(_, v)| v)
            .collect()
    }

    /// Raw class scores of shape `(batch, num_classes)`.
    pub fn forward_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let dims = batch.dims();
        if dims.len() != 4 || dims[1] != CHANNELS || dims[0] == 0 {
            return Err(Error::arg(format!("expected a (batch, 3, height, width) tensor, got {dims:?}")));
        }
        let train = self.mode == Mode::Train;
        let features = self.backbone.forward_t(batch, train)?;
        Ok(self.head.forward_t(&features, train)?)
    }

    /// Backbone output alone, shape `(batch, output_dim)`.
    pub fn backbone_features(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.backbone.forward_t(batch, self.mode == Mode::Train)?)
    }

    pub fn forward_probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        let logits = self.forward_logits(batch)?;
        Ok(candle_nn::ops::softmax_last_dim(&logits)?)
    }

    /// Snapshot of every variable, for best-weight restore.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.sorted_vars()
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &[(String, Tensor)]) -> Result<()> {
        let data = self.varmap.data().lock().expect("varmap poisoned");
        for (name, t) in snapshot {
            let var = data
                .get(name)
                .ok_or_else(|| Error::data(format!("snapshot variable '{name}' not in model")))?;
            var.set(t)?;
        }
        Ok(())
    }
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Stacks equally sized images into a `(batch, 3, height, width)` tensor.
pub fn images_to_batch(images: &[PixelTensor], device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::arg("empty batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data: Vec<f32> = Vec::with_capacity(images.len() * CHANNELS * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::arg(format!(
                "batch mixes image sizes {}x{} and {w}x{h}",
                img.width(),
                img.height()
            )));
        }
        for c in 0..CHANNELS {
            data.extend(img.data().iter().skip(c).step_by(CHANNELS));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), CHANNELS, h, w), device)?)
}
