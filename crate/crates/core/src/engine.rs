//! Progressive counterfactual optimization: warm start the prior on the
//! query, then unlock layer groups stage by stage while relaxing λ1.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Tensor, Var};
use candle_nn::Optimizer;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::TrainedBundle;
use crate::datasets::{save_png, LabeledImageSet};
use crate::error::{DiscError, Result};
use crate::nn::{adam, load_tensors, save_tensors, scalar};
use crate::objectives::{class_probability, predicted_label, LossBreakdown, ObjectiveContext, ObjectiveSpec, TargetSpec};
use crate::priors::{GeneratorState, PriorConfig, PriorKind};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePolicy {
    pub steps_per_stage: usize,
    pub plateau_window: usize,
    pub plateau_rel_tol: f64,
    /// Number of stages to run; `None` runs all L groups, larger values are clamped to L.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_stages: Option<usize>,
    pub lr: f64,
    /// Probability of ȳ required (with an argmax flip) to stop after a stage.
    pub success_prob: f64,
}

impl Default for StagePolicy {
    fn default() -> Self {
        Self {
            steps_per_stage: 150,
            plateau_window: 50,
            plateau_rel_tol: 1e-3,
            max_stages: None,
            lr: 1e-3,
            success_prob: 0.9,
        }
    }
}

impl StagePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(DiscError::Config("policy.lr must be positive".into()));
        }
        if self.plateau_rel_tol < 0.0 || !(0.0..=1.0).contains(&self.success_prob) {
            return Err(DiscError::Config(
                "policy.plateau_rel_tol must be >= 0 and policy.success_prob in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn stages_for(&self, num_groups: usize) -> usize {
        self.max_stages.map_or(num_groups, |m| m.min(num_groups))
    }
}

/// λ1 in effect during stage `stage` (1-based): λ1 / κ^(stage-1).
pub fn stage_lambda1(lambda1: f64, kappa: f64, stage: usize) -> f64 {
    lambda1 / kappa.powi(stage.saturating_sub(1) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: usize,
    /// Global step index across stages.
    pub step: usize,
    pub stage_step: usize,
    pub lambda1: f64,
    pub losses: LossBreakdown,
    pub predicted_label: u32,
    pub target_prob: f64,
}

/// Outcome of one counterfactual search.
#[derive(Debug, Clone)]
pub struct CFResult {
    /// Final counterfactual (C, H, W).
    pub counterfactual: Tensor,
    pub query: Tensor,
    pub target: TargetSpec,
    pub trajectory: Vec<StepRecord>,
    /// Rendered image at the end of each executed stage.
    pub stage_snapshots: Vec<Tensor>,
    pub stages_run: usize,
    /// Unlock index in effect when the run ended.
    pub final_unlock: usize,
    /// argmax F(counterfactual) == ȳ, from an independent forward pass.
    pub success: bool,
    pub final_label: u32,
    pub final_prob: f64,
    pub diverged: bool,
    /// Frozen groups matched their snapshot at every stage boundary.
    pub frozen_verified: bool,
    pub fingerprint: String,
    pub seed: u64,
    /// Set when the run failed before producing a counterfactual.
    pub error: Option<String>,
}

/// Sha-256 over the canonical JSON of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn copy_values(vars: &[Var]) -> Result<Vec<Tensor>> {
    Ok(vars.iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<Vec<_>>>()?)
}

/// Fit render(state) to `query` by MSE with every group unlocked, keep the
/// best iterate, then make it the new initialization and return to stage 0.
pub fn warm_start_prior(state: &mut GeneratorState, query: &Tensor, steps: usize, lr: f64) -> Result<()> {
    if steps > 0 {
        let l = state.num_groups();
        state.set_unlock(l)?;
        let vars = state.groups().trainable_vars();
        let mut opt = adam(vars.clone(), lr)?;
        let target = query.to_dtype(state.render()?.dtype())?;
        let mut best = f64::INFINITY;
        let mut best_vals = copy_values(&vars)?;
        for i in 0..=steps {
            let loss = (state.render()? - &target)?.sqr()?.mean_all()?;
            let v = scalar(&loss)?;
            if v.is_finite() && v < best {
                best = v;
                best_vals = copy_values(&vars)?;
            }
            if i == steps || !v.is_finite() {
                break;
            }
            opt.backward_step(&loss)?;
        }
        for (var, t) in vars.iter().zip(&best_vals) {
            var.set(t)?;
        }
    }
    state.groups_mut().snapshot_init()?;
    state.set_unlock(0)?;
    Ok(())
}

fn check_stage(
    state: &GeneratorState,
    ctx: &ObjectiveContext<'_>,
) -> Result<(u32, f64)> {
    let img = state.render()?.detach();
    let ev = ctx.evaluate(&img)?;
    Ok((predicted_label(&ev.logits)?, class_probability(&ev.logits, ctx.target().target_label)?))
}

/// Progressive optimization of `state` towards a counterfactual of `query`.
/// `state` should already be warm-started; its groups are unlocked one
/// stage at a time.
pub fn generate_cf(
    query: &Tensor,
    target: TargetSpec,
    bundle: &TrainedBundle,
    state: &mut GeneratorState,
    spec: &ObjectiveSpec,
    policy: &StagePolicy,
) -> Result<CFResult> {
    policy.validate()?;
    let regularize = state.kind() == PriorKind::Pixel;
    let ctx = ObjectiveContext::new(bundle, spec, target, query, regularize)?;
    let stages = policy.stages_for(state.num_groups());
    let fp = fingerprint(&(spec, policy, &target, state.kind()))?;

    let mut trajectory = Vec::new();
    let mut snapshots = Vec::new();
    let mut diverged = false;
    let mut frozen_verified = state.groups().verify_frozen()?;
    let mut last_finite = state.render()?.detach();
    let mut stages_run = 0;
    let mut global = 0;

    for stage in 1..=stages {
        state.set_unlock(stage)?;
        stages_run = stage;
        let lambda1 = stage_lambda1(spec.lambda1, spec.kappa, stage);
        let mut opt = adam(state.groups().trainable_vars(), policy.lr)?;
        let mut best_fc: Vec<f64> = Vec::with_capacity(policy.steps_per_stage);
        for stage_step in 0..policy.steps_per_stage {
            let img = state.render()?;
            let ev = ctx.evaluate_with_lambda1(&img, lambda1)?;
            let total = ev.breakdown.total;
            if !total.is_finite() {
                diverged = true;
                break;
            }
            last_finite = img.detach();
            trajectory.push(StepRecord {
                stage,
                step: global,
                stage_step,
                lambda1,
                losses: ev.breakdown,
                predicted_label: predicted_label(&ev.logits)?,
                target_prob: class_probability(&ev.logits, target.target_label)?,
            });
            global += 1;
            let prev = best_fc.last().copied().unwrap_or(f64::INFINITY);
            best_fc.push(prev.min(ev.breakdown.fc));
            opt.backward_step(&ev.total)?;
            let t = best_fc.len();
            if policy.plateau_window > 0 && t > policy.plateau_window {
                let then = best_fc[t - 1 - policy.plateau_window];
                let now = best_fc[t - 1];
                if then - now <= policy.plateau_rel_tol * then.abs() {
                    break;
                }
            }
        }
        frozen_verified &= state.groups().verify_frozen()?;
        if diverged {
            snapshots.push(last_finite.clone());
            break;
        }
        let img = state.render()?.detach();
        if !finite_image(&img)? {
            diverged = true;
            snapshots.push(last_finite.clone());
            break;
        }
        last_finite = img.clone();
        snapshots.push(img);
        let (label, prob) = check_stage(state, &ctx)?;
        if label == target.target_label && prob >= policy.success_prob {
            break;
        }
    }

    let counterfactual = last_finite;
    let logits = bundle.classifier.logits(&counterfactual)?;
    let final_label = predicted_label(&logits)?;
    let final_prob = class_probability(&logits, target.target_label)?;
    Ok(CFResult {
        counterfactual,
        query: query.clone(),
        target,
        trajectory,
        stage_snapshots: snapshots,
        stages_run,
        final_unlock: state.unlock_index(),
        success: final_label == target.target_label,
        final_label,
        final_prob,
        diverged,
        frozen_verified,
        fingerprint: fp,
        seed: 0,
        error: None,
    })
}

fn finite_image(t: &Tensor) -> Result<bool> {
    Ok(scalar(&t.sum_all()?)?.is_finite())
}

/// Everything that determines one query's run besides the query itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub prior: PriorConfig,
    pub objective: ObjectiveSpec,
    pub policy: StagePolicy,
    pub master_seed: u64,
}

impl RunSettings {
    pub fn fingerprint(&self) -> Result<String> {
        fingerprint(&(&self.prior.resolved(), &self.objective, &self.policy, self.master_seed))
    }
}

/// Build the prior, warm start it on the query and run [`generate_cf`].
pub fn run_query(
    query: &Tensor,
    target: TargetSpec,
    bundle: &TrainedBundle,
    settings: &RunSettings,
    query_seed: u64,
) -> Result<CFResult> {
    settings.objective.validate(bundle)?;
    let mut state = GeneratorState::build(&settings.prior, query, query_seed)?;
    warm_start_prior(
        &mut state,
        query,
        settings.prior.warm_start_steps(),
        settings.prior.warm_start_lr,
    )?;
    let mut res = generate_cf(query, target, bundle, &mut state, &settings.objective, &settings.policy)?;
    res.fingerprint = settings.fingerprint()?;
    res.seed = query_seed;
    Ok(res)
}

/// Maps source labels to counterfactual target labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRule {
    pub pairs: Vec<(u32, u32)>,
}

impl TargetRule {
    pub fn flip(source: u32, target: u32) -> Self {
        Self {
            pairs: vec![(source, target)],
        }
    }

    pub fn target_for(&self, label: u32) -> Option<TargetSpec> {
        self.pairs
            .iter()
            .find(|(s, _)| *s == label)
            .map(|&(s, t)| TargetSpec::flip(s, t))
    }
}

/// Independent runs for every query, order-aligned with the input. Seeds
/// derive from (master seed, index), so results do not depend on `workers`.
/// Per-query failures are recorded in the result instead of aborting.
pub fn batch_generate(
    queries: &LabeledImageSet,
    rule: &TargetRule,
    bundle: &TrainedBundle,
    settings: &RunSettings,
    workers: usize,
    progress: Option<&(dyn Fn(usize, &CFResult) + Sync)>,
) -> Result<Vec<CFResult>> {
    settings.objective.validate(bundle)?;
    settings.policy.validate()?;
    let fp = settings.fingerprint()?;
    let run_one = |i: usize| -> CFResult {
        let query_seed = seed::derive(settings.master_seed, i as u64);
        let label = queries.labels()[i];
        let outcome = queries.image(i).and_then(|q| {
            let target = rule
                .target_for(label)
                .ok_or_else(|| DiscError::Config(format!("no target rule for label {label}")))?;
            run_query(&q, target, bundle, settings, query_seed)
        });
        let res = match outcome {
            Ok(r) => r,
            Err(e) => failed_result(queries, i, rule, &fp, query_seed, e),
        };
        if let Some(cb) = progress {
            cb(i, &res);
        }
        res
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| DiscError::Config(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(|| (0..queries.len()).into_par_iter().map(run_one).collect()))
}

fn failed_result(queries: &LabeledImageSet, i: usize, rule: &TargetRule, fp: &str, seed: u64, e: DiscError) -> CFResult {
    let label = queries.labels()[i];
    let query = queries
        .image(i)
        .unwrap_or_else(|_| Tensor::zeros(1, candle_core::DType::F32, &crate::nn::device()).expect("cpu tensor"));
    CFResult {
        counterfactual: query.clone(),
        query,
        target: rule.target_for(label).unwrap_or(TargetSpec::flip(label, label)),
        trajectory: Vec::new(),
        stage_snapshots: Vec::new(),
        stages_run: 0,
        final_unlock: 0,
        success: false,
        final_label: label,
        final_prob: 0.0,
        diverged: matches!(e, DiscError::Divergence(_)),
        frozen_verified: true,
        fingerprint: fp.to_string(),
        seed,
        error: Some(e.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySummary {
    pub idx: usize,
    pub source_label: u32,
    pub target_label: u32,
    pub success: bool,
    pub final_label: u32,
    pub final_prob: f64,
    pub stages_run: usize,
    pub steps: usize,
    pub diverged: bool,
    pub frozen_verified: bool,
    pub seed: u64,
    pub error: Option<String>,
}

/// Batch-level summary written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub fingerprint: String,
    pub num_queries: usize,
    pub num_success: usize,
    pub success_rate: f64,
    pub num_diverged: usize,
    pub num_failed: usize,
    pub mean_final_prob: f64,
    pub queries: Vec<QuerySummary>,
}

impl GenerationSummary {
    pub fn from_results(results: &[CFResult], fingerprint: &str) -> Self {
        let n = results.len();
        let num_success = results.iter().filter(|r| r.success).count();
        let queries: Vec<QuerySummary> = results
            .iter()
            .enumerate()
            .map(|(idx, r)| QuerySummary {
                idx,
                source_label: r.target.source_label,
                target_label: r.target.target_label,
                success: r.success,
                final_label: r.final_label,
                final_prob: r.final_prob,
                stages_run: r.stages_run,
                steps: r.trajectory.len(),
                diverged: r.diverged,
                frozen_verified: r.frozen_verified,
                seed: r.seed,
                error: r.error.clone(),
            })
            .collect();
        Self {
            fingerprint: fingerprint.to_string(),
            num_queries: n,
            num_success,
            success_rate: if n == 0 { 0.0 } else { num_success as f64 / n as f64 },
            num_diverged: results.iter().filter(|r| r.diverged).count(),
            num_failed: results.iter().filter(|r| r.error.is_some()).count(),
            mean_final_prob: if n == 0 {
                0.0
            } else {
                results.iter().map(|r| r.final_prob).sum::<f64>() / n as f64
            },
            queries,
        }
    }
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const CF_TENSORS_FILE: &str = "counterfactuals.safetensors";

/// |x - x̄| reduced over channels by max, rescaled so the largest change is white.
pub fn diff_image(query: &Tensor, cf: &Tensor) -> Result<Tensor> {
    let d = (query - cf)?.abs()?.max_keepdim(0)?;
    let m = scalar(&d.flatten_all()?.max(0)?)?;
    let d = if m > 0.0 { (d / m)? } else { d };
    Ok(d.repeat((3, 1, 1))?)
}

/// Write PNGs, trajectories, exact tensors and `summary.json` into `dir`.
pub fn write_outputs(dir: &Path, results: &[CFResult], fingerprint: &str) -> Result<GenerationSummary> {
    std::fs::create_dir_all(dir).map_err(|e| DiscError::io(dir, e))?;
    let mut tensors = HashMap::new();
    for (i, r) in results.iter().enumerate() {
        if r.error.is_none() {
            save_png(&r.counterfactual, &dir.join(format!("cf_{i}.png")))?;
            save_png(&r.query, &dir.join(format!("query_{i}.png")))?;
            save_png(&diff_image(&r.query, &r.counterfactual)?, &dir.join(format!("diff_{i}.png")))?;
            tensors.insert(format!("cf_{i}"), r.counterfactual.clone());
            tensors.insert(format!("query_{i}"), r.query.clone());
        }
        let path = dir.join(format!("trajectory_{i}.json"));
        let body = serde_json::json!({
            "idx": i,
            "target": r.target,
            "success": r.success,
            "diverged": r.diverged,
            "stages_run": r.stages_run,
            "final_unlock": r.final_unlock,
            "final_prob": r.final_prob,
            "error": r.error,
            "steps": r.trajectory,
        });
        std::fs::write(&path, serde_json::to_vec_pretty(&body)?).map_err(|e| DiscError::io(&path, e))?;
    }
    if !tensors.is_empty() {
        save_tensors(&tensors, &dir.join(CF_TENSORS_FILE))?;
    }
    let summary = GenerationSummary::from_results(results, fingerprint);
    let path = dir.join(SUMMARY_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&summary)?).map_err(|e| DiscError::io(&path, e))?;
    Ok(summary)
}

/// Reload a directory written by [`write_outputs`]. Trajectories and stage
/// snapshots are not restored.
pub fn load_outputs(dir: &Path) -> Result<(GenerationSummary, Vec<CFResult>)> {
    let path = dir.join(SUMMARY_FILE);
    if !path.exists() {
        return Err(DiscError::MissingArtifact(format!("{} not found", path.display())));
    }
    let text = std::fs::read(&path).map_err(|e| DiscError::io(&path, e))?;
    let summary: GenerationSummary = serde_json::from_slice(&text)?;
    let tensors_path = dir.join(CF_TENSORS_FILE);
    let mut tensors = if summary.queries.iter().any(|q| q.error.is_none()) {
        if !tensors_path.exists() {
            return Err(DiscError::MissingArtifact(format!("{} not found", tensors_path.display())));
        }
        load_tensors(&tensors_path)?
    } else {
        HashMap::new()
    };
    let empty = Tensor::zeros(1, candle_core::DType::F32, &crate::nn::device())?;
    let mut results = Vec::with_capacity(summary.queries.len());
    for q in &summary.queries {
        let (query, counterfactual) = if q.error.is_none() {
            let mut take = |name: String| {
                tensors
                    .remove(&name)
                    .ok_or_else(|| DiscError::MissingArtifact(format!("tensor {name} missing from {}", tensors_path.display())))
            };
            (take(format!("query_{}", q.idx))?, take(format!("cf_{}", q.idx))?)
        } else {
            (empty.clone(), empty.clone())
        };
        results.push(CFResult {
            counterfactual,
            query,
            target: TargetSpec::flip(q.source_label, q.target_label),
            trajectory: Vec::new(),
            stage_snapshots: Vec::new(),
            stages_run: q.stages_run,
            final_unlock: q.stages_run,
            success: q.success,
            final_label: q.final_label,
            final_prob: q.final_prob,
            diverged: q.diverged,
            frozen_verified: q.frozen_verified,
            fingerprint: summary.fingerprint.clone(),
            seed: q.seed,
            error: q.error.clone(),
        });
    }
    Ok((summary, results))
}
