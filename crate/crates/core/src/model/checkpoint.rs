//! Self-describing checkpoints: a safetensors file whose header metadata
//! carries the model specs, the class-index list, the training config and
//! a SHA-256 digest of the tensor payload.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackboneSpec, ClassifierModel, HeadSpec};
use crate::augment::AugmentationConfig;
use crate::error::{Error, Result};
use crate::training::TrainingConfig;

const FORMAT_TAG: &str = "muzzle-id/checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    /// Class ids in model output order.
    pub classes: Vec<String>,
    pub training: Option<TrainingConfig>,
    /// Sizing and normalization the model was trained with.
    pub augmentation: Option<AugmentationConfig>,
}

pub struct Checkpoint {
    pub model: ClassifierModel,
    pub meta: CheckpointMeta,
}

fn integrity(path: &Path, reason: impl ToString) -> Error {
    Error::Integrity {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("checkpoint metadata serializes")
}

pub fn save_checkpoint(
    model: &ClassifierModel,
    classes: &[String],
    training: Option<&TrainingConfig>,
    augmentation: Option<&AugmentationConfig>,
    path: &Path,
) -> Result<()> {
    if classes.len() != model.num_classes() {
        return Err(Error::arg(format!(
            "{} class ids given for a {}-class model",
            classes.len(),
            model.num_classes()
        )));
    }
    let vars = model.sorted_vars();
    let tensors: Vec<(String, Tensor)> = vars.iter().map(|(n, v)| (n.clone(), v.as_tensor().clone())).collect();
    // Digest over the payload in serialization order, which safetensors
    // fixes by dtype alignment then name.
    let payload = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), None)
        .map_err(|e| Error::data(e.to_string()))?;
    let digest = payload_digest(&payload).ok_or_else(|| Error::data("serialized checkpoint has no header"))?;

    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT_TAG.to_string());
    meta.insert("backbone".to_string(), json(model.backbone_spec()));
    meta.insert("head".to_string(), json(model.head_spec()));
    meta.insert("classes".to_string(), json(&classes));
    meta.insert("training".to_string(), json(&training));
    meta.insert("augmentation".to_string(), json(&augmentation));
    meta.insert("sha256".to_string(), digest);
    let bytes = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(meta))
        .map_err(|e| Error::data(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn payload_digest(bytes: &[u8]) -> Option<String> {
    let n = u64::from_le_bytes(bytes.get(..8)?.try_into().ok()?) as usize;
    let data = bytes.get(8 + n..)?;
    Some(hex::encode(Sha256::digest(data)))
}

struct Parsed {
    meta: CheckpointMeta,
    tensors: HashMap<String, Tensor>,
}

fn parse(path: &Path) -> Result<Parsed> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| integrity(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| integrity(path, e))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| integrity(path, "no checkpoint metadata"))?;
    let field = |key: &str| meta.get(key).ok_or_else(|| integrity(path, format!("metadata lacks '{key}'")));
    if field("format")? != FORMAT_TAG {
        return Err(integrity(path, format!("unknown format tag '{}'", field("format")?)));
    }
    let digest = payload_digest(&bytes).ok_or_else(|| integrity(path, "truncated header"))?;
    if &digest != field("sha256")? {
        return Err(integrity(path, "payload digest does not match"));
    }
    let decode = |key: &str| -> Result<serde_json::Value> {
        serde_json::from_str(field(key)?).map_err(|e| integrity(path, format!("metadata '{key}': {e}")))
    };
    let meta = CheckpointMeta {
        backbone: serde_json::from_value(decode("backbone")?).map_err(|e| integrity(path, e))?,
        head: serde_json::from_value(decode("head")?).map_err(|e| integrity(path, e))?,
        classes: serde_json::from_value(decode("classes")?).map_err(|e| integrity(path, e))?,
        training: serde_json::from_value(decode("training")?).map_err(|e| integrity(path, e))?,
        augmentation: serde_json::from_value(decode("augmentation")?).map_err(|e| integrity(path, e))?,
    };
    let device = candle_core::Device::Cpu;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        let t = candle_core::safetensors::Load::load(&view, &device)?;
        tensors.insert(name, t.to_dtype(DType::F32)?);
    }
    Ok(Parsed { meta, tensors })
}

fn describe(b: &BackboneSpec, h: &HeadSpec) -> String {
    format!(
        "backbone {} ({:?} scale, {} outputs), head {}->{}->{} (dropout {})",
        b.name, b.scale, b.output_dim, b.output_dim, h.hidden_dim, h.num_classes, h.dropout_p
    )
}

fn same_architecture(a: &BackboneSpec, b: &BackboneSpec) -> bool {
    a.name == b.name && a.scale == b.scale && a.output_dim == b.output_dim
}

fn copy_into(model: &ClassifierModel, tensors: &HashMap<String, Tensor>, path: &Path) -> Result<()> {
    let vars = model.sorted_vars();
    if vars.len() != tensors.len() {
        return Err(integrity(path, format!("{} tensors stored, model has {}", tensors.len(), vars.len())));
    }
    for (name, var) in vars {
        let t = tensors.get(&name).ok_or_else(|| integrity(path, format!("tensor '{name}' missing")))?;
        if t.dims() != var.dims() {
            return Err(integrity(path, format!("tensor '{name}' has shape {:?}, expected {:?}", t.dims(), var.dims())));
        }
        var.set(t)?;
    }
    Ok(())
}

/// Rebuilds the model a checkpoint describes.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let parsed = parse(path)?;
    let model = ClassifierModel::new_uninitialized(&parsed.meta.backbone, &parsed.meta.head, 0)?;
    copy_into(&model, &parsed.tensors, path)?;
    Ok(Checkpoint { model, meta: parsed.meta })
}

/// Loads weights into an existing model, refusing checkpoints built for a
/// different architecture or class count.
pub fn load_checkpoint_into(model: &ClassifierModel, path: &Path) -> Result<CheckpointMeta> {
    let parsed = parse(path)?;
    let (b, h) = (&parsed.meta.backbone, &parsed.meta.head);
    if !same_architecture(b, model.backbone_spec()) || h != model.head_spec() {
        return Err(Error::SpecMismatch {
            expected: describe(model.backbone_spec(), model.head_spec()),
            found: describe(b, h),
        });
    }
    copy_into(model, &parsed.tensors, path)?;
    Ok(parsed.meta)
}

/// Default checkpoint file name inside a run directory.
pub fn checkpoint_file(dir: &Path) -> PathBuf {
    dir.join("best.safetensors")
}
