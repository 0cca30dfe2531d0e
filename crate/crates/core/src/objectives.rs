//! The composite counterfactual objective
//! λ1·L_semantics + λ2·L_mc + λ3·L_fc (+ TV/ℓ2 image regularizers for raw
//! pixel priors).

use std::fmt;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::classifier::{ForwardOutput, TrainedBundle};
use crate::error::{DiscError, Result};
use crate::nn::{cross_entropy_per_sample, device, scalar};
use crate::priors::{l2_norm, tv_norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    #[default]
    FlipToClass,
}

/// Desired prediction change: flip from `source_label` to `target_label`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub target_label: u32,
    pub source_label: u32,
    #[serde(default)]
    pub mode: TargetMode,
}

impl TargetSpec {
    pub fn flip(source_label: u32, target_label: u32) -> Self {
        Self {
            target_label,
            source_label,
            mode: TargetMode::FlipToClass,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.target_label == self.source_label {
            return Err(DiscError::Config(format!(
                "target label {} equals source label",
                self.target_label
            )));
        }
        if self.target_label as usize >= num_classes || self.source_label as usize >= num_classes {
            return Err(DiscError::Config(format!(
                "labels {} -> {} outside 0..{num_classes}",
                self.source_label, self.target_label
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SemanticsMode {
    Iso,
    #[default]
    Lso,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyMode {
    None,
    #[default]
    Dep,
    Duq,
}

impl fmt::Display for SemanticsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SemanticsMode::Iso => "iso",
            SemanticsMode::Lso => "lso",
        })
    }
}

impl fmt::Display for ConsistencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConsistencyMode::None => "none",
            ConsistencyMode::Dep => "dep",
            ConsistencyMode::Duq => "duq",
        })
    }
}

/// Target loss s* for the DEP term: `"auto"` (mean training loss of
/// correctly classified samples) or an explicit value.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SStar {
    #[default]
    Auto,
    Value(f64),
}

impl Serialize for SStar {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SStar::Auto => s.serialize_str("auto"),
            SStar::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for SStar {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(SStar::Value(v)),
            Raw::Str(s) if s == "auto" => Ok(SStar::Auto),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "s_star must be \"auto\" or a number, got \"{s}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub kappa: f64,
    pub semantics: SemanticsMode,
    /// Taps compared by LSO; `None` means every declared tap.
    pub taps: Option<Vec<String>>,
    pub consistency: ConsistencyMode,
    pub s_star: SStar,
    pub tau: f64,
    /// TV weight, applied only to raw pixel priors.
    pub tv_weight: f64,
    /// ℓ2 weight, applied only to raw pixel priors.
    pub l2_weight: f64,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.05,
            lambda3: 1.0,
            kappa: 2.0,
            semantics: SemanticsMode::Lso,
            taps: None,
            consistency: ConsistencyMode::Dep,
            s_star: SStar::Auto,
            tau: 0.5,
            tv_weight: 1e-3,
            l2_weight: 1e-3,
        }
    }
}

impl ObjectiveSpec {
    /// Checks weights and that the bundle carries what the modes need.
    pub fn validate(&self, bundle: &TrainedBundle) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("tau", self.tau),
            ("tv_weight", self.tv_weight),
            ("l2_weight", self.l2_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(DiscError::Config(format!("objective.{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.kappa.is_finite() && self.kappa > 1.0) {
            return Err(DiscError::Config(format!("objective.kappa must be > 1, got {}", self.kappa)));
        }
        if let SStar::Value(v) = self.s_star {
            if !v.is_finite() || v < 0.0 {
                return Err(DiscError::Config(format!("objective.s_star must be >= 0, got {v}")));
            }
        }
        if self.semantics == SemanticsMode::Lso {
            self.tap_indices(bundle)?;
        }
        match self.consistency {
            ConsistencyMode::Dep if bundle.loss_predictor.is_none() => {
                Err(DiscError::Incompatible("bundle lacks loss predictor".into()))
            }
            ConsistencyMode::Duq if bundle.duq_head.is_none() => {
                Err(DiscError::Incompatible("bundle lacks DUQ head".into()))
            }
            _ => Ok(()),
        }
    }

    /// Positions of the selected LSO taps in the bundle's tap order.
    pub fn tap_indices(&self, bundle: &TrainedBundle) -> Result<Vec<usize>> {
        let names = bundle.tap_names();
        match &self.taps {
            None => Ok((0..names.len()).collect()),
            Some(sel) if sel.is_empty() => Err(DiscError::Config("objective.taps: LSO needs at least one tap".into())),
            Some(sel) => sel
                .iter()
                .map(|t| {
                    names.iter().position(|n| n == t).ok_or_else(|| {
                        DiscError::Config(format!("objective.taps: unknown tap '{t}' (available: {})", names.join(", ")))
                    })
                })
                .collect(),
        }
    }

    pub fn resolve_s_star(&self, bundle: &TrainedBundle) -> f64 {
        match self.s_star {
            SStar::Auto => bundle.train_loss_stats().mean,
            SStar::Value(v) => v,
        }
    }
}

fn batched(x: &Tensor) -> Result<Tensor> {
    Ok(if x.rank() == 3 { x.unsqueeze(0)? } else { x.clone() })
}

/// Mean squared pixel error.
pub fn iso_loss(xbar: &Tensor, x: &Tensor) -> Result<Tensor> {
    if xbar.dims() != x.dims() {
        return Err(DiscError::Shape {
            expected: x.dims().to_vec(),
            got: xbar.dims().to_vec(),
        });
    }
    Ok((xbar - x)?.sqr()?.mean_all()?)
}

/// Σ over selected taps of mean squared feature difference.
pub fn lso_loss_from_taps(taps_bar: &[Tensor], taps_x: &[Tensor], indices: &[usize]) -> Result<Tensor> {
    if indices.is_empty() {
        return Err(DiscError::Config("LSO needs at least one tap".into()));
    }
    let mut total: Option<Tensor> = None;
    for &i in indices {
        let term = (&taps_bar[i] - &taps_x[i].to_dtype(taps_bar[i].dtype())?)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty taps"))
}

/// Semantics-preservation term between candidate x̄ and query x.
pub fn semantics_loss(xbar: &Tensor, x: &Tensor, bundle: &TrainedBundle, spec: &ObjectiveSpec) -> Result<Tensor> {
    match spec.semantics {
        SemanticsMode::Iso => iso_loss(xbar, x),
        SemanticsMode::Lso => {
            let idx = spec.tap_indices(bundle)?;
            let tb = bundle.classifier.forward_with_taps(&batched(xbar)?)?;
            let tx = bundle.classifier.forward_with_taps(&batched(x)?)?;
            let taps_x: Vec<Tensor> = tx.taps.iter().map(|t| t.detach()).collect();
            lso_loss_from_taps(&tb.taps, &taps_x, &idx)
        }
    }
}

/// |ŝ - s*|, averaged over the batch.
pub fn dep_margin(shat: &Tensor, s_star: f64) -> Result<Tensor> {
    Ok((shat - s_star)?.abs()?.mean_all()?)
}

/// max(K_source - K_target + τ, 0), averaged over the batch; `kernel` is (N, K).
pub fn duq_margin(kernel: &Tensor, target: &TargetSpec, tau: f64) -> Result<Tensor> {
    let ks = kernel.narrow(D::Minus1, target.source_label as usize, 1)?;
    let kt = kernel.narrow(D::Minus1, target.target_label as usize, 1)?;
    Ok(((ks - kt)? + tau)?.relu()?.mean_all()?)
}

pub fn mc_loss_dep(xbar: &Tensor, bundle: &TrainedBundle, s_star: f64) -> Result<Tensor> {
    let out = bundle.classifier.forward_with_taps(&batched(xbar)?)?;
    dep_margin(&bundle.loss_estimate(&out)?, s_star)
}

pub fn mc_loss_duq(xbar: &Tensor, bundle: &TrainedBundle, target: &TargetSpec, tau: f64) -> Result<Tensor> {
    let out = bundle.classifier.forward_with_taps(&batched(xbar)?)?;
    duq_margin(&bundle.kernel(&out)?, target, tau)
}

/// Cross entropy of softmax(logits) against ȳ, averaged over the batch.
pub fn fc_loss(logits: &Tensor, target: &TargetSpec) -> Result<Tensor> {
    let logits = if logits.rank() == 1 { logits.unsqueeze(0)? } else { logits.clone() };
    let n = logits.dim(0)?;
    let labels = Tensor::new(vec![target.target_label; n].as_slice(), &device())?;
    Ok(cross_entropy_per_sample(&logits, &labels)?.mean_all()?)
}

/// Unweighted and weighted values of every term of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub semantics: f64,
    pub mc: f64,
    pub fc: f64,
    pub tv: f64,
    pub l2: f64,
    pub weighted_semantics: f64,
    pub weighted_mc: f64,
    pub weighted_fc: f64,
    pub weighted_tv: f64,
    pub weighted_l2: f64,
    pub total: f64,
}

/// One evaluation of the objective on a candidate image.
#[derive(Debug)]
pub struct Evaluation {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    pub logits: Tensor,
}

/// Objective bound to one query: taps of the query are computed once and
/// held constant, and each evaluation costs a single classifier forward.
#[derive(Debug)]
pub struct ObjectiveContext<'a> {
    bundle: &'a TrainedBundle,
    spec: ObjectiveSpec,
    target: TargetSpec,
    query: Tensor,
    query_taps: Vec<Tensor>,
    tap_indices: Vec<usize>,
    s_star: f64,
    regularize: bool,
}

impl<'a> ObjectiveContext<'a> {
    /// `regularize` switches on the TV/ℓ2 terms (raw pixel priors).
    pub fn new(
        bundle: &'a TrainedBundle,
        spec: &ObjectiveSpec,
        target: TargetSpec,
        query: &Tensor,
        regularize: bool,
    ) -> Result<Self> {
        spec.validate(bundle)?;
        target.validate(bundle.num_classes())?;
        let query = batched(query)?.to_dtype(bundle.classifier.dtype())?;
        let out = bundle.classifier.forward_with_taps(&query)?;
        let tap_indices = match spec.semantics {
            SemanticsMode::Lso => spec.tap_indices(bundle)?,
            SemanticsMode::Iso => Vec::new(),
        };
        Ok(Self {
            bundle,
            s_star: spec.resolve_s_star(bundle),
            spec: spec.clone(),
            target,
            query_taps: out.taps.iter().map(|t| t.detach()).collect(),
            query,
            tap_indices,
            regularize,
        })
    }

    pub fn spec(&self) -> &ObjectiveSpec {
        &self.spec
    }

    pub fn target(&self) -> &TargetSpec {
        &self.target
    }

    pub fn s_star(&self) -> f64 {
        self.s_star
    }

    pub fn evaluate(&self, xbar: &Tensor) -> Result<Evaluation> {
        self.evaluate_with_lambda1(xbar, self.spec.lambda1)
    }

    /// Evaluate with λ1 replaced (the engine relaxes λ1 per stage).
    pub fn evaluate_with_lambda1(&self, xbar: &Tensor, lambda1: f64) -> Result<Evaluation> {
        let xb = batched(xbar)?;
        let out = self.bundle.classifier.forward_with_taps(&xb)?;
        self.combine(&xb, &out, lambda1)
    }

    fn combine(&self, xb: &Tensor, out: &ForwardOutput, lambda1: f64) -> Result<Evaluation> {
        let s = &self.spec;
        let sem = match s.semantics {
            SemanticsMode::Iso => iso_loss(xb, &self.query)?,
            SemanticsMode::Lso => lso_loss_from_taps(&out.taps, &self.query_taps, &self.tap_indices)?,
        };
        let mc = match s.consistency {
            ConsistencyMode::None => None,
            ConsistencyMode::Dep => Some(dep_margin(&self.bundle.loss_estimate(out)?, self.s_star)?),
            ConsistencyMode::Duq => Some(duq_margin(&self.bundle.kernel(out)?, &self.target, s.tau)?),
        };
        let fc = fc_loss(&out.logits, &self.target)?;
        let (tv, l2) = if self.regularize {
            (Some(tv_norm(xb)?), Some(l2_norm(xb)?))
        } else {
            (None, None)
        };

        let mut total = (&sem * lambda1)?;
        if let Some(m) = &mc {
            total = (total + (m * s.lambda2)?)?;
        }
        total = (total + (&fc * s.lambda3)?)?;
        if let Some(t) = &tv {
            total = (total + (t * s.tv_weight)?)?;
        }
        if let Some(l) = &l2 {
            total = (total + (l * s.l2_weight)?)?;
        }

        let val = |t: &Option<Tensor>| -> Result<f64> { t.as_ref().map(scalar).transpose().map(|v| v.unwrap_or(0.0)) };
        let semantics = scalar(&sem)?;
        let mc_v = val(&mc)?;
        let fc_v = scalar(&fc)?;
        let tv_v = val(&tv)?;
        let l2_v = val(&l2)?;
        let breakdown = LossBreakdown {
            semantics,
            mc: mc_v,
            fc: fc_v,
            tv: tv_v,
            l2: l2_v,
            weighted_semantics: lambda1 * semantics,
            weighted_mc: if mc.is_some() { s.lambda2 * mc_v } else { 0.0 },
            weighted_fc: s.lambda3 * fc_v,
            weighted_tv: if tv.is_some() { s.tv_weight * tv_v } else { 0.0 },
            weighted_l2: if l2.is_some() { s.l2_weight * l2_v } else { 0.0 },
            total: scalar(&total)?,
        };
        Ok(Evaluation {
            total,
            breakdown,
            logits: out.logits.clone(),
        })
    }
}

/// One-shot composite objective for a single candidate (builds a fresh context).
pub fn total_objective(
    xbar: &Tensor,
    x: &Tensor,
    bundle: &TrainedBundle,
    spec: &ObjectiveSpec,
    target: &TargetSpec,
    regularize: bool,
) -> Result<(Tensor, LossBreakdown)> {
    let ctx = ObjectiveContext::new(bundle, spec, *target, x, regularize)?;
    let ev = ctx.evaluate(xbar)?;
    Ok((ev.total, ev.breakdown))
}

/// Softmax probability of `label` for logits (1, K) or (K,).
pub fn class_probability(logits: &Tensor, label: u32) -> Result<f64> {
    let l = if logits.rank() == 2 { logits.get(0)? } else { logits.clone() };
    let p = candle_nn::ops::softmax(&l.to_dtype(DType::F64)?, D::Minus1)?;
    Ok(p.get(label as usize)?.to_scalar::<f64>()?)
}

pub fn predicted_label(logits: &Tensor) -> Result<u32> {
    let l = if logits.rank() == 2 { logits.get(0)? } else { logits.clone() };
    Ok(l.argmax(D::Minus1)?.to_scalar::<u32>()?)
}
