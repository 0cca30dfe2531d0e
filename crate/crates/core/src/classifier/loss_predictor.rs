use candle_core::{DType, Tensor, Var, D};

use crate::error::{DiscError, Result};
use crate::nn::{softplus, Linear, ParamSet};
use crate::seed::Rng;

/// Loss predictor G: global-average-pool every tap, project each through a
/// ReLU layer, fuse the projections linearly and map through softplus so the
/// estimate ŝ is non-negative.
#[derive(Debug)]
pub struct LossPredictor {
    params: ParamSet,
    projections: Vec<Linear>,
    fusion: Linear,
    width: usize,
}

impl LossPredictor {
    pub fn new(tap_channels: &[usize], width: usize, rng: &mut Rng, dtype: DType) -> Result<Self> {
        if tap_channels.is_empty() {
            return Err(DiscError::Config("loss predictor needs at least one tap".into()));
        }
        let mut ps = ParamSet::new();
        let projections = tap_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(&mut ps, &format!("proj{i}"), c, width, rng, dtype))
            .collect::<Result<Vec<_>>>()?;
        let fusion = Linear::new(&mut ps, "fusion", width * tap_channels.len(), 1, rng, dtype)?;
        Ok(Self {
            params: ps,
            projections,
            fusion,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.vars()
    }

    /// Returns ŝ with shape (N,).
    pub fn forward(&self, taps: &[Tensor]) -> Result<Tensor> {
        if taps.len() != self.projections.len() {
            return Err(DiscError::Config(format!(
                "loss predictor built for {} taps, got {}",
                self.projections.len(),
                taps.len()
            )));
        }
        let mut parts = Vec::with_capacity(taps.len());
        for (t, proj) in taps.iter().zip(&self.projections) {
            let pooled = t.mean(D::Minus1)?.mean(D::Minus1)?;
            parts.push(proj.forward(&pooled)?.relu()?);
        }
        let fused = self.fusion.forward(&Tensor::cat(&parts, 1)?)?;
        softplus(&fused.squeeze(1)?)
    }
}
