use candle_core::{DType, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::error::{DiscError, Result};
use crate::nn::{device, normal, Linear, ParamSet, SharedBuffer};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DuqConfig {
    pub embedding_dim: usize,
    pub length_scale: f64,
    pub centroid_momentum: f64,
    pub gradient_penalty: f64,
}

impl Default for DuqConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            length_scale: 0.5,
            centroid_momentum: 0.999,
            gradient_penalty: 0.5,
        }
    }
}

impl DuqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || !(self.length_scale > 0.0) {
            return Err(DiscError::Config("duq needs embedding_dim > 0 and length_scale > 0".into()));
        }
        if !(self.centroid_momentum > 0.0 && self.centroid_momentum < 1.0) {
            return Err(DiscError::Config("duq centroid_momentum must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// RBF head: embeds backbone features and compares them against one
/// centroid per class. Centroids are exponential moving averages kept as
/// running sums `m` and counts `n`, with φ(y) = m_y / n_y.
#[derive(Debug)]
pub struct DuqHead {
    params: ParamSet,
    embed: Linear,
    sums: SharedBuffer,
    counts: SharedBuffer,
    config: DuqConfig,
}

impl DuqHead {
    pub fn new(feature_dim: usize, num_classes: usize, config: DuqConfig, rng: &mut Rng, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let embed = Linear::new(&mut ps, "embed", feature_dim, config.embedding_dim, rng, dtype)?;
        let n0 = 13.0;
        let init = (normal(rng, &[num_classes, config.embedding_dim], 0.0, 0.05, dtype)? * n0)?;
        let sums = ps.buffer("centroid_sums", init);
        let counts = ps.buffer("centroid_counts", Tensor::full(n0, num_classes, &device())?.to_dtype(dtype)?);
        Ok(Self {
            params: ps,
            embed,
            sums,
            counts,
            config,
        })
    }

    pub fn config(&self) -> &DuqConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.vars()
    }

    /// (K, E) centroid matrix φ.
    pub fn centroids(&self) -> Result<Tensor> {
        Ok(self.sums.get().broadcast_div(&self.counts.get().unsqueeze(1)?)?)
    }

    pub fn embed(&self, features: &Tensor) -> Result<Tensor> {
        self.embed.forward(features)
    }

    /// Kernel similarity K(x, y) = exp(-‖e(x) - φ(y)‖² / (2ℓ²)) for every
    /// class; input (N, E) embeddings, output (N, K).
    pub fn kernel_from_embedding(&self, emb: &Tensor) -> Result<Tensor> {
        kernel_similarity(emb, &self.centroids()?.to_dtype(emb.dtype())?, self.config.length_scale)
    }

    /// Squared embedding–centroid distances (N, K).
    pub fn sq_distances(&self, emb: &Tensor) -> Result<Tensor> {
        sq_distances(emb, &self.centroids()?.to_dtype(emb.dtype())?)
    }

    pub fn length_scale(&self) -> f64 {
        self.config.length_scale
    }

    pub fn kernel(&self, features: &Tensor) -> Result<Tensor> {
        self.kernel_from_embedding(&self.embed(features)?)
    }

    /// EMA centroid update from detached embeddings of one batch.
    pub fn update_centroids(&self, emb: &Tensor, labels: &[u32]) -> Result<()> {
        let k = self.counts.get().dim(0)?;
        let emb = emb.detach().to_dtype(DType::F64)?;
        let onehot: Vec<f64> = labels
            .iter()
            .flat_map(|&l| (0..k).map(move |c| if c as u32 == l { 1.0 } else { 0.0 }))
            .collect();
        let onehot = Tensor::from_vec(onehot, (labels.len(), k), &device())?;
        let batch_counts = onehot.sum(0)?;
        let batch_sums = onehot.t()?.matmul(&emb)?;
        let g = self.config.centroid_momentum;
        let dtype = self.sums.get().dtype();
        let counts = ((self.counts.get().to_dtype(DType::F64)? * g)? + (batch_counts * (1.0 - g))?)?;
        let sums = ((self.sums.get().to_dtype(DType::F64)? * g)? + (batch_sums * (1.0 - g))?)?;
        self.counts.set(counts.to_dtype(dtype)?);
        self.sums.set(sums.to_dtype(dtype)?);
        Ok(())
    }
}

/// exp(-‖e_n - φ_k‖² / (2ℓ²)) for every (n, k).
pub fn kernel_similarity(emb: &Tensor, centroids: &Tensor, length_scale: f64) -> Result<Tensor> {
    let d2 = sq_distances(emb, centroids)?;
    Ok((d2 * (-1.0 / (2.0 * length_scale * length_scale)))?.exp()?)
}

fn sq_distances(emb: &Tensor, centroids: &Tensor) -> Result<Tensor> {
    let diff = emb.unsqueeze(1)?.broadcast_sub(&centroids.unsqueeze(0)?)?;
    Ok(diff.sqr()?.sum(D::Minus1)?)
}

/// Uncertainty score 1 - max_y K.
pub fn uncertainty(kernel: &Tensor) -> Result<Tensor> {
    Ok(kernel.max(D::Minus1)?.affine(-1.0, 1.0)?)
}
