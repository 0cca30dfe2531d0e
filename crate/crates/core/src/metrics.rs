//! Counterfactual quality measures: pixel MSE, concentration of the edit,
//! and classifier discrepancy.

use std::path::Path;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::classifier::{accuracy, train, TrainConfig, TrainMode, TrainedBundle};
use crate::datasets::{LabeledImageSet, Split};
use crate::engine::CFResult;
use crate::error::{DiscError, Result};
use crate::seed;

pub const DEFAULT_THRESHOLD: f64 = 0.05;
pub const REPORT_FILE: &str = "report.json";
pub const PER_SAMPLE_FILE: &str = "per_sample.csv";

fn same_shape(x: &Tensor, xbar: &Tensor) -> Result<()> {
    if x.dims() != xbar.dims() {
        return Err(DiscError::Shape {
            expected: x.dims().to_vec(),
            got: xbar.dims().to_vec(),
        });
    }
    Ok(())
}

/// Mean squared pixel error.
pub fn mse(x: &Tensor, xbar: &Tensor) -> Result<f64> {
    same_shape(x, xbar)?;
    let d = (x.to_dtype(DType::F64)? - xbar.to_dtype(DType::F64)?)?;
    Ok(d.sqr()?.mean_all()?.to_scalar::<f64>()?)
}

/// Peak signal-to-noise ratio in dB for images in [0, 1].
pub fn psnr(x: &Tensor, xbar: &Tensor) -> Result<f64> {
    Ok(-10.0 * mse(x, xbar)?.log10())
}

/// Area fraction of the bounding box around every pixel whose change
/// (max over channels of |x - x̄|) reaches `threshold`; 0 when nothing does.
pub fn concentration(x: &Tensor, xbar: &Tensor, threshold: f64) -> Result<f64> {
    same_shape(x, xbar)?;
    let x = if x.rank() == 4 { x.squeeze(0)? } else { x.clone() };
    let xbar = if xbar.rank() == 4 { xbar.squeeze(0)? } else { xbar.clone() };
    let d = (x.to_dtype(DType::F64)? - xbar.to_dtype(DType::F64)?)?.abs()?;
    let d: Vec<Vec<f64>> = d.max(0)?.to_vec2()?;
    let h = d.len();
    let w = d.first().map_or(0, Vec::len);
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for (i, row) in d.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v >= threshold {
                r0 = r0.min(i);
                r1 = r1.max(i);
                c0 = c0.min(j);
                c1 = c1.max(j);
            }
        }
    }
    if r0 == usize::MAX {
        return Ok(0.0);
    }
    Ok(((r1 - r0 + 1) * (c1 - c0 + 1)) as f64 / (h * w) as f64)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdReport {
    pub cd: f64,
    pub std: f64,
    pub repeats: usize,
    pub dropped: usize,
    pub reference_accuracy: f64,
    /// Test accuracy of each secondary classifier that finished training.
    pub secondary_accuracies: Vec<f64>,
    /// Per-repeat Acc(F) - Acc(F^c).
    pub per_repeat: Vec<f64>,
}

/// Acc(F, test) - Acc(F^c, test), where F^c is trained from scratch on
/// `x0` labeled 0 and `xbar1` labeled 1, repeated with fresh seeds.
pub fn classifier_discrepancy(
    x0: &Tensor,
    xbar1: &Tensor,
    test: &LabeledImageSet,
    reference: &TrainedBundle,
    trainer: &TrainConfig,
    repeats: usize,
    seed: u64,
) -> Result<CdReport> {
    if xbar1.dim(0)? == 0 {
        return Err(DiscError::Data("classifier discrepancy needs at least one counterfactual".into()));
    }
    if x0.dim(0)? == 0 {
        return Err(DiscError::Data("classifier discrepancy needs at least one class-0 image".into()));
    }
    if repeats == 0 {
        return Err(DiscError::Config("cd repeats must be at least 1".into()));
    }
    let n0 = x0.dim(0)?;
    let n1 = xbar1.dim(0)?;
    let images = Tensor::cat(&[x0.to_dtype(DType::F32)?, xbar1.to_dtype(DType::F32)?], 0)?.clamp(0f32, 1f32)?;
    let labels: Vec<u32> = std::iter::repeat_n(0, n0).chain(std::iter::repeat_n(1, n1)).collect();
    let names = reference.manifest.class_names.clone();
    let set = LabeledImageSet::new(images, labels, names, Split::Train)?;
    let reference_accuracy = accuracy(&reference.classifier, test)?;
    let mut secondary = Vec::new();
    let mut dropped = 0;
    for r in 0..repeats {
        let cfg = TrainConfig {
            mode: TrainMode::Plain,
            seed: seed::derive(seed, r as u64),
            ..trainer.clone()
        };
        match train(&set, &cfg) {
            Ok(b) => secondary.push(accuracy(&b.classifier, test)?),
            Err(DiscError::Divergence(msg)) => {
                log::warn!("secondary classifier repeat {r} diverged: {msg}");
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if secondary.is_empty() {
        return Err(DiscError::Divergence("every secondary classifier repeat diverged".into()));
    }
    let per_repeat: Vec<f64> = secondary.iter().map(|a| reference_accuracy - a).collect();
    let stats = MeanStd::of(&per_repeat).expect("non-empty");
    Ok(CdReport {
        cd: stats.mean,
        std: stats.std,
        repeats: secondary.len(),
        dropped,
        reference_accuracy,
        secondary_accuracies: secondary,
        per_repeat,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub idx: usize,
    pub success: bool,
    pub mse: f64,
    pub concentration: f64,
    pub final_fc_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub num_success: usize,
    pub success_rate: f64,
    pub threshold: f64,
    /// Over successful counterfactuals; absent when there are none.
    pub mse: Option<MeanStd>,
    pub concentration: Option<MeanStd>,
    pub cd: Option<CdReport>,
    pub fingerprint: String,
}

/// Settings for the discrepancy part of a report.
#[derive(Debug, Clone)]
pub struct CdSettings<'a> {
    pub test: &'a LabeledImageSet,
    pub trainer: &'a TrainConfig,
    pub repeats: usize,
    pub seed: u64,
}

pub fn per_sample_metrics(results: &[CFResult], threshold: f64) -> Result<Vec<SampleMetrics>> {
    results
        .iter()
        .enumerate()
        .map(|(idx, r)| {
            let (m, c) = if r.error.is_some() {
                (f64::NAN, f64::NAN)
            } else {
                (mse(&r.query, &r.counterfactual)?, concentration(&r.query, &r.counterfactual, threshold)?)
            };
            Ok(SampleMetrics {
                idx,
                success: r.success,
                mse: m,
                concentration: c,
                final_fc_prob: r.final_prob,
            })
        })
        .collect()
}

/// Summarize a batch: MSE and concentration over successful CFs, and CD
/// with the queries as X_0 and every produced CF as X̄_1 when `cd` is given.
pub fn aggregate_report(
    results: &[CFResult],
    bundle: &TrainedBundle,
    cd: Option<CdSettings<'_>>,
    threshold: f64,
    fingerprint: &str,
) -> Result<(MetricReport, Vec<SampleMetrics>)> {
    if results.is_empty() {
        return Err(DiscError::Data("aggregate_report needs at least one result".into()));
    }
    let samples = per_sample_metrics(results, threshold)?;
    let report = report_from_samples(&samples, threshold, fingerprint);
    let cd = match cd {
        Some(s) if report.num_success > 0 => {
            let ok: Vec<&CFResult> = results.iter().filter(|r| r.error.is_none()).collect();
            let x0 = Tensor::stack(&ok.iter().map(|r| r.query.clone()).collect::<Vec<_>>(), 0)?;
            let x1 = Tensor::stack(&ok.iter().map(|r| r.counterfactual.clone()).collect::<Vec<_>>(), 0)?;
            Some(classifier_discrepancy(&x0, &x1, s.test, bundle, s.trainer, s.repeats, s.seed)?)
        }
        _ => None,
    };
    Ok((MetricReport { cd, ..report }, samples))
}

/// Report fields that follow from the per-sample rows alone.
pub fn report_from_samples(samples: &[SampleMetrics], threshold: f64, fingerprint: &str) -> MetricReport {
    let ok: Vec<&SampleMetrics> = samples.iter().filter(|s| s.success).collect();
    let n = samples.len();
    MetricReport {
        n,
        num_success: ok.len(),
        success_rate: if n == 0 { 0.0 } else { ok.len() as f64 / n as f64 },
        threshold,
        mse: MeanStd::of(&ok.iter().map(|s| s.mse).collect::<Vec<_>>()),
        concentration: MeanStd::of(&ok.iter().map(|s| s.concentration).collect::<Vec<_>>()),
        cd: None,
        fingerprint: fingerprint.to_string(),
    }
}

pub fn write_report(dir: &Path, report: &MetricReport, samples: &[SampleMetrics]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DiscError::io(dir, e))?;
    let path = dir.join(REPORT_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(report)?).map_err(|e| DiscError::io(&path, e))?;
    let mut w = csv::Writer::from_path(dir.join(PER_SAMPLE_FILE))?;
    for s in samples {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| DiscError::io(dir.join(PER_SAMPLE_FILE), e))?;
    Ok(())
}

pub fn read_per_sample(path: &Path) -> Result<Vec<SampleMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<SampleMetrics>, _>>()?)
}

/// Per-image (N, C, H, W) predicted labels of a classifier.
pub fn predicted_labels(bundle: &TrainedBundle, images: &Tensor) -> Result<Vec<u32>> {
    Ok(bundle
        .classifier
        .predict_logits_batched(images, 256)?
        .argmax(D::Minus1)?
        .to_vec1()?)
}
