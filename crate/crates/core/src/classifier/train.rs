use candle_core::{DType, Tensor, D};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::bundle::{BundleManifest, BundleSeeds, LossStats, TrainMode, TrainedBundle, SCHEMA_VERSION};
use super::contrastive::{batch_pairs, contrastive_aux_loss_tensor};
use super::duq::{uncertainty, DuqConfig};
use super::model::{Backbone, ClassifierModel, INPUT_SCALE};
use crate::datasets::{LabeledImageSet, Split};
use crate::error::{DiscError, Result};
use crate::nn::{adam, cross_entropy_per_sample, device, normal, scalar};
use crate::seed;

/// Classifier training hyperparameters. `min_steps` lifts the epoch count
/// for small training sets so every run sees a comparable number of updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub backbone: Backbone,
    pub epochs: usize,
    pub min_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub hflip: bool,
    pub val_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub predictor_width: usize,
    pub duq: DuqConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Plain,
            backbone: Backbone::default(),
            epochs: 12,
            min_steps: 400,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
            hflip: true,
            val_fraction: 0.1,
            beta1: 1.0,
            beta2: 0.5,
            gamma: 1.0,
            predictor_width: 128,
            duq: DuqConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(DiscError::Config("batch_size must be at least 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(DiscError::Config("lr must be positive".into()));
        }
        if self.beta1 < 0.0 || self.beta2 < 0.0 || self.gamma < 0.0 {
            return Err(DiscError::Config("beta1, beta2 and gamma must be non-negative".into()));
        }
        if self.mode == TrainMode::Duq {
            self.duq.validate()?;
        }
        Ok(())
    }
}

/// Cross-entropy training of the classifier alone.
pub fn train_classifier(data: &LabeledImageSet, config: &TrainConfig) -> Result<TrainedBundle> {
    train(data, &TrainConfig { mode: TrainMode::Plain, ..config.clone() })
}

/// Joint training of classifier and loss predictor on β1·L_pri + β2·L_aux.
pub fn train_joint_dep(data: &LabeledImageSet, config: &TrainConfig) -> Result<TrainedBundle> {
    train(data, &TrainConfig { mode: TrainMode::Dep, ..config.clone() })
}

/// Backbone plus RBF head with EMA centroids and a two-sided gradient penalty.
pub fn train_duq(data: &LabeledImageSet, config: &TrainConfig) -> Result<TrainedBundle> {
    train(data, &TrainConfig { mode: TrainMode::Duq, ..config.clone() })
}

/// Dispatch on `config.mode`.
pub fn train(data: &LabeledImageSet, config: &TrainConfig) -> Result<TrainedBundle> {
    config.validate()?;
    if data.split() != Split::Train {
        return Err(DiscError::Config(format!("training requires a train split, got {:?}", data.split())));
    }
    let (train_set, val_set) = data.stratified_split(config.val_fraction.max(0.05), seed::derive_tag(config.seed, "split"))?;
    let (c, h, _) = train_set.image_dims();
    let seeds = BundleSeeds {
        train: config.seed,
        init: seed::derive_tag(config.seed, "init"),
        shuffle: seed::derive_tag(config.seed, "shuffle"),
    };
    let manifest = BundleManifest {
        schema_version: SCHEMA_VERSION,
        mode: config.mode,
        num_classes: data.num_classes(),
        input_size: h,
        channels: c,
        class_names: data.class_names().to_vec(),
        backbone: config.backbone.clone(),
        tap_names: Vec::new(),
        beta1: config.beta1,
        beta2: config.beta2,
        gamma: config.gamma,
        predictor_width: (config.mode == TrainMode::Dep).then_some(config.predictor_width),
        duq: (config.mode == TrainMode::Duq).then(|| config.duq.clone()),
        train_loss_stats: LossStats::default(),
        seeds,
        val_accuracy: 0.0,
        duq_val_accuracy: None,
        epochs_run: 0,
        steps_run: 0,
        determinism: "bitwise reproducible on a fixed CPU build; BLAS kernel selection may differ across CPU families".into(),
    };
    let mut bundle = TrainedBundle::skeleton(manifest, DType::F32)?;
    bundle.manifest.tap_names = bundle.classifier.tap_names().to_vec();

    let mut vars = bundle.classifier.vars();
    if let Some(g) = &bundle.loss_predictor {
        vars.extend(g.vars());
    }
    if let Some(d) = &bundle.duq_head {
        vars.extend(d.vars());
    }
    let mut opt = adam(vars, config.lr)?;

    let n = train_set.len();
    let bs = config.batch_size.min(n).max(2);
    let batches_per_epoch = n.div_ceil(bs);
    let epochs = config.epochs.max(config.min_steps.div_ceil(batches_per_epoch.max(1)));
    let labels_all = train_set.labels_tensor()?;
    let mut rng = seed::rng(bundle.manifest.seeds.shuffle);
    let mut steps = 0usize;
    let w = train_set.image_dims().2;
    let flip_idx = Tensor::new((0..w as u32).rev().collect::<Vec<u32>>().as_slice(), &device())?;

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(bs).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let ids = Tensor::new(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>().as_slice(), &device())?;
            let mut x = train_set.images().index_select(&ids, 0)?;
            if config.hflip {
                let mask: Vec<u8> = chunk.iter().map(|_| u8::from(rng.random_bool(0.5))).collect();
                let mask = Tensor::new(mask.as_slice(), &device())?.reshape((chunk.len(), 1, 1, 1))?;
                let flipped = x.index_select(&flip_idx, 3)?;
                x = mask.broadcast_as(x.shape())?.where_cond(&flipped, &x)?;
            }
            let y = labels_all.index_select(&ids, 0)?;
            let y_host: Vec<u32> = y.to_vec1()?;
            let out = bundle.classifier.forward_t(&x, true)?;
            let loss = match config.mode {
                TrainMode::Plain => cross_entropy_per_sample(&out.logits, &y)?.mean_all()?,
                TrainMode::Dep => {
                    let ce = cross_entropy_per_sample(&out.logits, &y)?;
                    let s: Vec<f64> = ce.detach().to_dtype(DType::F64)?.to_vec1()?;
                    let shat = bundle.loss_estimate(&out)?;
                    let pairs = batch_pairs(chunk.len());
                    let aux = (contrastive_aux_loss_tensor(&s, &shat, &pairs, config.gamma)? / pairs.len().max(1) as f64)?;
                    ((ce.mean_all()? * config.beta1)? + (aux * config.beta2)?)?
                }
                TrainMode::Duq => {
                    let head = bundle.duq_head.as_ref().expect("duq head present in duq mode");
                    let emb = head.embed(&out.features)?;
                    let bce = duq_bce(&head.sq_distances(&emb)?, head.length_scale(), &y_host)?;
                    let gp = gradient_penalty_estimate(&bundle, &x, &mut rng)?;
                    let head_ce = cross_entropy_per_sample(&bundle.classifier.head_forward(&out.features.detach())?, &y)?.mean_all()?;
                    head.update_centroids(&emb, &y_host)?;
                    ((bce + (gp * config.duq.gradient_penalty)?)? + head_ce)?
                }
            };
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(DiscError::Divergence(format!("non-finite loss {v} at epoch {epoch}, batch {b}")));
            }
            opt.backward_step(&loss)?;
            steps += 1;
        }
    }
    bundle.manifest.epochs_run = epochs;
    bundle.manifest.steps_run = steps;
    bundle.manifest.val_accuracy = accuracy(&bundle.classifier, &val_set)?;
    if bundle.duq_head.is_some() {
        bundle.manifest.duq_val_accuracy = Some(duq_accuracy(&bundle, &val_set)?);
    }
    bundle.manifest.train_loss_stats = correct_sample_loss_stats(&bundle.classifier, &train_set)?;
    Ok(bundle)
}

/// Binary cross entropy of kernel values against one-hot labels, averaged
/// over all (sample, class) entries. log K is taken from the kernel's
/// exponent to stay finite far from the centroids.
fn duq_bce(d2: &Tensor, length_scale: f64, labels: &[u32]) -> Result<Tensor> {
    let (n, nc) = d2.dims2()?;
    let log_k = (d2 * (-1.0 / (2.0 * length_scale * length_scale)))?;
    let onehot: Vec<f32> = labels
        .iter()
        .flat_map(|&l| (0..nc).map(move |c| if c as u32 == l { 1.0 } else { 0.0 }))
        .collect();
    let t = Tensor::from_vec(onehot, (n, nc), &device())?.to_dtype(d2.dtype())?;
    let pos = (t.clone() * &log_k)?;
    let one_minus_k = log_k.exp()?.affine(-1.0, 1.0)?.clamp(1e-6, 1.0)?;
    let neg = (t.affine(-1.0, 1.0)? * one_minus_k.log()?)?;
    Ok((pos + neg)?.neg()?.mean_all()?)
}

/// Stochastic estimate of the two-sided penalty mean_i (‖∇_u Σ_c K_c‖ - 1)²,
/// with u the standardized network input. For Gaussian probes v,
/// E[(∇·v)²] = ‖∇‖²; directional derivatives come from central differences
/// so the estimate stays differentiable with first-order autodiff, and
/// several probes are averaged to tame the variance.
fn gradient_penalty_estimate(bundle: &TrainedBundle, x: &Tensor, rng: &mut seed::Rng) -> Result<Tensor> {
    const STEP: f64 = 1e-2;
    const PROBES: usize = 2;
    let head = bundle.duq_head.as_ref().expect("duq head");
    let n = x.dim(0)?;
    let mut dims = x.dims().to_vec();
    dims[0] *= PROBES;
    let probe = (normal(rng, &dims, 0.0, 1.0, x.dtype())? * STEP)?;
    let base = Tensor::cat(&vec![x.clone(); PROBES], 0)?;
    let both = Tensor::cat(&[(&base + &probe)?, (&base - &probe)?], 0)?;
    let k = head.kernel(&bundle.classifier.forward_t(&both, true)?.features)?.sum(D::Minus1)?;
    let half = n * PROBES;
    let dir = ((k.narrow(0, 0, half)? - k.narrow(0, half, half)?)? / (2.0 * STEP))?;
    let norm = ((dir.sqr()?.reshape((PROBES, n))?.mean(0)? + 1e-12)?.sqrt()? / INPUT_SCALE)?;
    Ok((norm - 1.0)?.sqr()?.mean_all()?)
}

pub fn accuracy(model: &ClassifierModel, set: &LabeledImageSet) -> Result<f64> {
    let logits = model.predict_logits_batched(set.images(), 256)?;
    let pred: Vec<u32> = logits.argmax(D::Minus1)?.to_vec1()?;
    let hits = pred.iter().zip(set.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / set.len() as f64)
}

/// Classification accuracy of argmax_y K(x, y).
pub fn duq_accuracy(bundle: &TrainedBundle, set: &LabeledImageSet) -> Result<f64> {
    let k = duq_kernels(bundle, set.images())?;
    let pred: Vec<u32> = k.argmax(D::Minus1)?.to_vec1()?;
    let hits = pred.iter().zip(set.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / set.len() as f64)
}

pub fn duq_kernels(bundle: &TrainedBundle, images: &Tensor) -> Result<Tensor> {
    let n = images.dim(0)?;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = 256.min(n - start);
        let out = bundle.classifier.forward_with_taps(&images.narrow(0, start, len)?)?;
        parts.push(bundle.kernel(&out)?.detach());
        start += len;
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// DUQ uncertainty 1 - max_y K for each image.
pub fn duq_uncertainty(bundle: &TrainedBundle, images: &Tensor) -> Result<Vec<f64>> {
    Ok(uncertainty(&duq_kernels(bundle, images)?)?.to_dtype(DType::F64)?.to_vec1()?)
}

/// True per-sample cross entropy under the classifier.
pub fn per_sample_losses(model: &ClassifierModel, set: &LabeledImageSet) -> Result<Vec<f64>> {
    let logits = model.predict_logits_batched(set.images(), 256)?;
    Ok(cross_entropy_per_sample(&logits, &set.labels_tensor()?)?
        .to_dtype(DType::F64)?
        .to_vec1()?)
}

/// Loss-predictor estimates ŝ for each image.
pub fn loss_estimates(bundle: &TrainedBundle, images: &Tensor) -> Result<Vec<f64>> {
    let n = images.dim(0)?;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = 256.min(n - start);
        let fwd = bundle.classifier.forward_with_taps(&images.narrow(0, start, len)?)?;
        let s: Vec<f64> = bundle.loss_estimate(&fwd)?.to_dtype(DType::F64)?.to_vec1()?;
        out.extend(s);
        start += len;
    }
    Ok(out)
}

fn correct_sample_loss_stats(model: &ClassifierModel, set: &LabeledImageSet) -> Result<LossStats> {
    let logits = model.predict_logits_batched(set.images(), 256)?;
    let pred: Vec<u32> = logits.argmax(D::Minus1)?.to_vec1()?;
    let losses: Vec<f64> = cross_entropy_per_sample(&logits, &set.labels_tensor()?)?
        .to_dtype(DType::F64)?
        .to_vec1()?;
    let correct: Vec<f64> = losses
        .iter()
        .zip(pred.iter().zip(set.labels()))
        .filter(|(_, (p, l))| p == l)
        .map(|(&s, _)| s)
        .collect();
    Ok(LossStats::from_losses(&correct))
}
