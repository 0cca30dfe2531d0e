use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::duq::{DuqConfig, DuqHead};
use super::loss_predictor::LossPredictor;
use super::model::{Backbone, ClassifierModel, ClassifierSpec, ForwardOutput};
use crate::error::{DiscError, Result};
use crate::nn::{load_tensors, save_tensors};
use crate::seed;

pub const SCHEMA_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Plain,
    Dep,
    Duq,
}

/// Per-sample training cross-entropy over correctly classified samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LossStats {
    pub count: usize,
    pub mean: f64,
    pub p05: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

impl LossStats {
    pub fn from_losses(losses: &[f64]) -> Self {
        if losses.is_empty() {
            return Self::default();
        }
        let mut v = losses.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p05: q(0.05),
            p25: q(0.25),
            p50: q(0.5),
            p75: q(0.75),
            p95: q(0.95),
        }
    }
}

/// JSON manifest written next to the weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub schema_version: u32,
    pub mode: TrainMode,
    pub num_classes: usize,
    pub input_size: usize,
    pub channels: usize,
    pub class_names: Vec<String>,
    pub backbone: Backbone,
    pub tap_names: Vec<String>,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub predictor_width: Option<usize>,
    pub duq: Option<DuqConfig>,
    pub train_loss_stats: LossStats,
    pub seeds: BundleSeeds,
    pub val_accuracy: f64,
    pub duq_val_accuracy: Option<f64>,
    pub epochs_run: usize,
    pub steps_run: usize,
    /// Free-form note on reproducibility limits of this build.
    pub determinism: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSeeds {
    pub train: u64,
    pub init: u64,
    pub shuffle: u64,
}

/// Classifier plus the optional manifold-consistency heads.
#[derive(Debug)]
pub struct TrainedBundle {
    pub classifier: ClassifierModel,
    pub loss_predictor: Option<LossPredictor>,
    pub duq_head: Option<DuqHead>,
    pub manifest: BundleManifest,
}

impl TrainedBundle {
    pub fn train_loss_stats(&self) -> &LossStats {
        &self.manifest.train_loss_stats
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn tap_names(&self) -> &[String] {
        self.classifier.tap_names()
    }

    /// Loss-predictor estimates ŝ for a forward pass.
    pub fn loss_estimate(&self, out: &ForwardOutput) -> Result<Tensor> {
        let g = self
            .loss_predictor
            .as_ref()
            .ok_or_else(|| DiscError::Incompatible("bundle lacks loss predictor".into()))?;
        g.forward(&out.taps)
    }

    /// DUQ kernel similarities (N, K) for a forward pass.
    pub fn kernel(&self, out: &ForwardOutput) -> Result<Tensor> {
        let h = self
            .duq_head
            .as_ref()
            .ok_or_else(|| DiscError::Incompatible("bundle lacks DUQ head".into()))?;
        h.kernel(&out.features)
    }

    fn tensors(&self) -> Result<HashMap<String, Tensor>> {
        let mut map = HashMap::new();
        self.classifier.params().export("classifier.", &mut map)?;
        if let Some(g) = &self.loss_predictor {
            g.params().export("loss_predictor.", &mut map)?;
        }
        if let Some(d) = &self.duq_head {
            d.params().export("duq.", &mut map)?;
        }
        Ok(map)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| DiscError::io(dir, e))?;
        save_tensors(&self.tensors()?, &dir.join(WEIGHTS_FILE))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?).map_err(|e| DiscError::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(DiscError::MissingArtifact(format!("bundle manifest {}", path.display())));
        }
        let raw = std::fs::read(&path).map_err(|e| DiscError::io(&path, e))?;
        let manifest: BundleManifest = serde_json::from_slice(&raw)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(DiscError::Config(format!(
                "bundle schema_version {} unsupported (expected {SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        let weights = load_tensors(&dir.join(WEIGHTS_FILE))?;
        let bundle = Self::skeleton(manifest, DType::F32)?;
        bundle.classifier.params().import("classifier.", &weights)?;
        if let Some(g) = &bundle.loss_predictor {
            g.params().import("loss_predictor.", &weights)?;
        }
        if let Some(d) = &bundle.duq_head {
            d.params().import("duq.", &weights)?;
        }
        Ok(bundle)
    }

    /// Freshly initialized components matching `manifest`.
    pub(crate) fn skeleton(manifest: BundleManifest, dtype: DType) -> Result<Self> {
        let spec = ClassifierSpec {
            image_size: manifest.input_size,
            channels: manifest.channels,
            num_classes: manifest.num_classes,
            backbone: manifest.backbone.clone(),
        };
        let mut rng = seed::rng(manifest.seeds.init);
        let classifier = ClassifierModel::new(spec, &mut rng, dtype)?;
        let loss_predictor = match manifest.predictor_width {
            Some(w) => Some(LossPredictor::new(classifier.tap_channels(), w, &mut rng, dtype)?),
            None => None,
        };
        let duq_head = match &manifest.duq {
            Some(cfg) => Some(DuqHead::new(
                classifier.feature_dim(),
                manifest.num_classes,
                cfg.clone(),
                &mut rng,
                dtype,
            )?),
            None => None,
        };
        Ok(Self {
            classifier,
            loss_predictor,
            duq_head,
            manifest,
        })
    }
}

/// Evaluation-mode forward returning logits and taps in declared order.
pub fn predict_with_taps(bundle: &TrainedBundle, x: &Tensor) -> Result<ForwardOutput> {
    bundle.classifier.forward_with_taps(x)
}
