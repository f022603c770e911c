//! Named-tensor persistence: encoder weights, checkpoints and feature caches
//! all use the WMAN v1 manifest format.

mod manifest;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use manifest::{
    align_up, layout, load_manifest, load_weights, save_manifest, save_weights, write_atomic,
    Manifest, ManifestIndex, TensorEntry, ALIGN, FORMAT_VERSION, WMAN_MAGIC,
};

use crate::error::{Error, Result};
use crate::lstm::{BiLSTMWeights, LSTMConfig};
use crate::params::ParamStore;
use crate::train::{AdamState, Model, TrainConfig};
use crate::vit::{SliceSequence, ViTConfig, ViTWeights};
use crate::volume::NormConstants;

const VIT_PREFIX: &str = "vit/";
const LSTM_PREFIX: &str = "lstm/";
const ADAM_PREFIX: &str = "adam/";
const FEATURE_PREFIX: &str = "features/";

/// Encoder layer indices present under `encoder.layer.{i}.`.
pub fn discover_layers(params: &ParamStore) -> BTreeSet<usize> {
    params
        .names()
        .filter_map(|n| {
            n.strip_prefix("encoder.layer.")?
                .split('.')
                .next()?
                .parse()
                .ok()
        })
        .collect()
}

fn kind(m: &Manifest) -> Option<&str> {
    m.metadata.get("kind").and_then(|k| k.as_str())
}

pub fn save_vit(w: &ViTWeights, norm: &NormConstants, path: &Path) -> Result<()> {
    let m = Manifest {
        descriptor: Some(w.config().clone()),
        normalization: Some(norm.clone()),
        metadata: json!({"kind": "vit"}),
        tensors: w.params().clone(),
    };
    save_manifest(&m, path)
}

/// Encoder weights checked against `cfg`, plus the normalization constants
/// the manifest carries (defaults if it carries none).
pub fn load_pretrained(path: &Path, cfg: &ViTConfig) -> Result<(ViTWeights, NormConstants)> {
    vit_from_manifest(load_manifest(path)?, cfg)
}

/// Like [`load_pretrained`] but takes the configuration from the manifest.
pub fn load_vit(path: &Path) -> Result<(ViTWeights, NormConstants)> {
    let m = load_manifest(path)?;
    let cfg = m
        .descriptor
        .clone()
        .ok_or_else(|| Error::Format("manifest has no model descriptor".into()))?;
    vit_from_manifest(m, &cfg)
}

fn vit_from_manifest(m: Manifest, cfg: &ViTConfig) -> Result<(ViTWeights, NormConstants)> {
    if let Some(d) = &m.descriptor {
        if d != cfg {
            return Err(Error::Compatibility(format!(
                "manifest describes {d:?}, requested {cfg:?}"
            )));
        }
    }
    let layers = discover_layers(&m.tensors);
    if layers.len() != cfg.layers
        || layers
            .iter()
            .next_back()
            .is_some_and(|&l| l + 1 != layers.len())
    {
        return Err(Error::Compatibility(format!(
            "manifest holds encoder layers {layers:?}, configuration expects {}",
            cfg.layers
        )));
    }
    let norm = m.normalization.unwrap_or_default();
    norm.validate(cfg.channels)?;
    Ok((ViTWeights::from_params(cfg.clone(), m.tensors)?, norm))
}

/// Trained classifier state, optionally with a jointly trained encoder and
/// the optimizer state needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Option<AdamState>,
    pub epoch: usize,
    pub fold: usize,
    pub config: TrainConfig,
    /// Encoder configuration the features came from.
    pub encoder: Option<ViTConfig>,
    pub normalization: Option<NormConstants>,
    pub classes: Vec<String>,
    pub slices: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    seed: u64,
    epoch: usize,
    fold: usize,
    config: TrainConfig,
    adam_step: Option<u64>,
    fine_tuned_encoder: bool,
    classes: Vec<String>,
    slices: usize,
}

impl Checkpoint {
    pub fn to_manifest(&self) -> Manifest {
        let mut tensors = self.model.lstm.params().with_prefix(LSTM_PREFIX);
        if let Some(v) = &self.model.vit {
            tensors.extend(v.params().with_prefix(VIT_PREFIX));
        }
        if let Some(a) = &self.adam {
            tensors.extend(a.to_params().with_prefix(ADAM_PREFIX));
        }
        let meta = CheckpointMeta {
            kind: "checkpoint".into(),
            seed: self.config.seed,
            epoch: self.epoch,
            fold: self.fold,
            config: self.config.clone(),
            adam_step: self.adam.as_ref().map(|a| a.step),
            fine_tuned_encoder: self.model.vit.is_some(),
            classes: self.classes.clone(),
            slices: self.slices,
        };
        Manifest {
            descriptor: self.encoder.clone(),
            normalization: self.normalization.clone(),
            metadata: serde_json::to_value(meta).expect("metadata serializes"),
            tensors,
        }
    }

    pub fn from_manifest(m: Manifest) -> Result<Self> {
        if kind(&m) != Some("checkpoint") {
            return Err(Error::Format("manifest is not a checkpoint".into()));
        }
        let meta: CheckpointMeta = serde_json::from_value(m.metadata.clone())
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let lstm = BiLSTMWeights::from_params(
            meta.config.lstm.clone(),
            m.tensors.strip_prefix(LSTM_PREFIX),
        )?;
        let vit = if meta.fine_tuned_encoder {
            let cfg = m.descriptor.clone().ok_or_else(|| {
                Error::Format("fine-tuned checkpoint lacks an encoder descriptor".into())
            })?;
            Some(ViTWeights::from_params(
                cfg,
                m.tensors.strip_prefix(VIT_PREFIX),
            )?)
        } else {
            None
        };
        let adam = match meta.adam_step {
            Some(step) => Some(AdamState::from_params(
                step,
                &m.tensors.strip_prefix(ADAM_PREFIX),
            )?),
            None => None,
        };
        let known = m
            .tensors
            .names()
            .filter(|n| {
                [LSTM_PREFIX, VIT_PREFIX, ADAM_PREFIX]
                    .iter()
                    .any(|p| n.starts_with(p))
            })
            .count();
        if known != m.tensors.len() {
            return Err(Error::Format(
                "checkpoint holds tensors outside its groups".into(),
            ));
        }
        Ok(Self {
            model: Model { lstm, vit },
            adam,
            epoch: meta.epoch,
            fold: meta.fold,
            config: meta.config,
            encoder: m.descriptor,
            normalization: m.normalization,
            classes: meta.classes,
            slices: meta.slices,
        })
    }

    /// Optimizer state and epoch for resuming; refused when the checkpoint
    /// was saved for inference only.
    pub fn resume_state(&self) -> Result<(AdamState, usize)> {
        match &self.adam {
            Some(a) => Ok((a.clone(), self.epoch)),
            None => Err(Error::Compatibility(
                "checkpoint has no optimizer state; it can be used for inference but training cannot resume from it".into(),
            )),
        }
    }

    /// Fails unless the stored classifier matches `cfg`.
    pub fn check_config(&self, cfg: &LSTMConfig) -> Result<()> {
        let mine = &self.config.lstm;
        let same = mine.input_dim == cfg.input_dim
            && mine.units == cfg.units
            && mine.layers == cfg.layers
            && mine.num_classes == cfg.num_classes;
        if !same {
            return Err(Error::Compatibility(format!(
                "checkpoint classifier {mine:?} does not match requested {cfg:?}"
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    save_manifest(&c.to_manifest(), path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_manifest(load_manifest(path)?)
}

/// Slice-feature sequences for a labeled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub encoder: ViTConfig,
    pub classes: Vec<String>,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub sequences: Vec<SliceSequence>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureMeta {
    kind: String,
    classes: Vec<String>,
    samples: Vec<FeatureSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureSample {
    id: String,
    label: usize,
}

impl FeatureCache {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = ParamStore::new();
        for (id, s) in self.ids.iter().zip(&self.sequences) {
            tensors.insert(format!("{FEATURE_PREFIX}{id}"), s.features.clone());
        }
        let meta = FeatureMeta {
            kind: "features".into(),
            classes: self.classes.clone(),
            samples: self
                .ids
                .iter()
                .zip(&self.labels)
                .map(|(id, &label)| FeatureSample {
                    id: id.clone(),
                    label,
                })
                .collect(),
        };
        save_manifest(
            &Manifest {
                descriptor: Some(self.encoder.clone()),
                normalization: None,
                metadata: serde_json::to_value(meta).expect("metadata serializes"),
                tensors,
            },
            path,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = load_manifest(path)?;
        if kind(&m) != Some("features") {
            return Err(Error::Format(format!(
                "{} is not a feature cache",
                path.display()
            )));
        }
        let meta: FeatureMeta = serde_json::from_value(m.metadata.clone())
            .map_err(|e| Error::Format(format!("feature cache metadata: {e}")))?;
        let encoder = m
            .descriptor
            .clone()
            .ok_or_else(|| Error::Format("feature cache lacks an encoder descriptor".into()))?;
        let mut sequences = Vec::with_capacity(meta.samples.len());
        for s in &meta.samples {
            let t = m.tensors.get(&format!("{FEATURE_PREFIX}{}", s.id))?;
            sequences.push(SliceSequence::new(t.clone())?);
        }
        if m.tensors.len() != meta.samples.len() {
            return Err(Error::Format("feature cache holds unlisted tensors".into()));
        }
        Ok(Self {
            encoder,
            classes: meta.classes,
            ids: meta.samples.iter().map(|s| s.id.clone()).collect(),
            labels: meta.samples.iter().map(|s| s.label).collect(),
            sequences,
        })
    }
}

/// Summary of a manifest for operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inspection {
    pub format_version: u32,
    pub kind: Option<String>,
    pub descriptor: Option<ViTConfig>,
    pub normalization: Option<NormConstants>,
    pub tensors: usize,
    pub parameters: usize,
    pub encoder_layers: usize,
    /// Contract audit against the descriptor, when there is one.
    pub audit: Option<std::result::Result<(), String>>,
}

pub fn inspect(path: &Path) -> Result<Inspection> {
    let m = load_manifest(path)?;
    let encoder_params = match kind(&m) {
        Some("checkpoint") => m.tensors.strip_prefix(VIT_PREFIX),
        _ => m.tensors.clone(),
    };
    let audit = match (&m.descriptor, kind(&m)) {
        (Some(d), Some("vit") | None) => Some(
            encoder_params
                .audit(&ViTWeights::contract(d))
                .map_err(|e| e.to_string()),
        ),
        _ => None,
    };
    Ok(Inspection {
        format_version: FORMAT_VERSION,
        kind: kind(&m).map(str::to_string),
        descriptor: m.descriptor.clone(),
        normalization: m.normalization.clone(),
        tensors: m.tensors.len(),
        parameters: m.tensors.count(),
        encoder_layers: discover_layers(&encoder_params).len(),
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Tensor;
    use crate::vit::layer_name;

    fn toy_vit() -> ViTWeights {
        ViTWeights::init(ViTConfig::toy(16, 8, 2, 8, 2), 1).unwrap()
    }

    #[test]
    fn vit_round_trip_and_layer_discovery() {
        let w = toy_vit();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vit.wman");
        save_vit(&w, &NormConstants::default(), &p).unwrap();
        let (back, norm) = load_pretrained(&p, w.config()).unwrap();
        assert_eq!(back, w);
        assert_eq!(norm, NormConstants::default());
        assert_eq!(discover_layers(back.params()).len(), 2);
        let ins = inspect(&p).unwrap();
        assert_eq!(ins.encoder_layers, 2);
        assert_eq!(ins.audit, Some(Ok(())));
        assert_eq!(ins.parameters, ViTWeights::parameter_count(w.config()));
    }

    #[test]
    fn missing_query_is_named() {
        let w = toy_vit();
        let mut params = w.params().clone();
        let q = layer_name(1, "attention.query.weight");
        params.remove(&q);
        let m = Manifest {
            descriptor: Some(w.config().clone()),
            tensors: params,
            ..Manifest::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.wman");
        save_manifest(&m, &p).unwrap();
        let err = load_pretrained(&p, w.config()).unwrap_err();
        assert!(matches!(&err, Error::MissingTensor(n) if *n == q), "{err}");
    }

    #[test]
    fn descriptor_mismatch_is_compatibility_error() {
        let w = toy_vit();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vit.wman");
        save_vit(&w, &NormConstants::default(), &p).unwrap();
        let other = ViTConfig::toy(16, 8, 3, 8, 2);
        assert!(matches!(
            load_pretrained(&p, &other),
            Err(Error::Compatibility(_))
        ));
    }

    fn checkpoint(with_adam: bool) -> Checkpoint {
        let cfg = TrainConfig {
            lstm: LSTMConfig {
                input_dim: 4,
                units: 3,
                layers: 2,
                dropout: 0.0,
                num_classes: 2,
            },
            ..TrainConfig::default()
        };
        let lstm = BiLSTMWeights::init(cfg.lstm.clone(), 3).unwrap();
        let adam = with_adam.then(|| {
            let mut a = AdamState::new();
            let mut p = lstm.params().clone();
            let g: ParamStore = p
                .iter()
                .map(|(k, t)| (k.to_string(), Tensor::full(t.shape().to_vec(), 0.1)))
                .collect();
            a.update(&cfg.adam, &mut [("lstm/", &mut p, &g)]).unwrap();
            a
        });
        Checkpoint {
            model: Model { lstm, vit: None },
            adam,
            epoch: 4,
            fold: 10,
            config: cfg,
            encoder: Some(ViTConfig::toy(16, 8, 1, 4, 1)),
            normalization: Some(NormConstants::default()),
            classes: vec!["NC".into(), "AD".into()],
            slices: 5,
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = checkpoint(true);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.wman");
        save_checkpoint(&c, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, c);
        let (a, e) = back.resume_state().unwrap();
        assert_eq!((a.step, e), (1, 4));
    }

    #[test]
    fn checkpoint_without_optimizer_refuses_resume() {
        let c = checkpoint(false);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.wman");
        save_checkpoint(&c, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        let err = back.resume_state().unwrap_err();
        assert!(err.to_string().contains("inference"));
    }

    #[test]
    fn truncated_checkpoint_is_corruption() {
        let bytes = checkpoint(true).to_manifest().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 9];
        assert!(matches!(
            Manifest::from_bytes(cut),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn config_echo_mismatch() {
        let c = checkpoint(false);
        let mut other = c.config.lstm.clone();
        other.units = 5;
        assert!(matches!(
            c.check_config(&other),
            Err(Error::Compatibility(_))
        ));
        c.check_config(&c.config.lstm).unwrap();
    }

    #[test]
    fn feature_cache_round_trip() {
        let cache = FeatureCache {
            encoder: ViTConfig::toy(16, 8, 1, 4, 1),
            classes: vec!["a".into(), "b".into()],
            ids: vec!["s0".into(), "s1".into()],
            labels: vec![1, 0],
            sequences: (0..2)
                .map(|k| SliceSequence::new(Tensor::from_fn([3, 4], |i| (i + k) as f32)).unwrap())
                .collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("features.wman");
        cache.save(&p).unwrap();
        assert_eq!(FeatureCache::load(&p).unwrap(), cache);
    }
}
