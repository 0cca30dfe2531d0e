use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::fourier::{coord_grid, fourier_embed, FourierBank};
use super::groups::LayerGroups;
use crate::error::{DiscError, Result};
use crate::nn::{sigmoid, Linear, ParamSet};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InrConfig {
    pub num_frequencies: usize,
    pub freq_variance: f64,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Frequency factor ω0 of the sinusoid activations.
    pub omega0: f64,
}

impl Default for InrConfig {
    fn default() -> Self {
        Self {
            num_frequencies: 256,
            freq_variance: 100.0,
            hidden_layers: 3,
            hidden_width: 64,
            omega0: 1.0,
        }
    }
}

impl InrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_frequencies == 0 || self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(DiscError::Config(
                "inr needs num_frequencies, hidden_layers and hidden_width > 0".into(),
            ));
        }
        if !(self.freq_variance >= 0.0) || !(self.omega0 > 0.0) {
            return Err(DiscError::Config("inr needs freq_variance >= 0 and omega0 > 0".into()));
        }
        Ok(())
    }
}

/// Coordinate network: Fourier-embedded pixel coordinates through
/// sin(ω0(Wx + b)) layers and a sigmoid output layer. Groups are the MLP
/// layers in input-to-output order; the Fourier bank is never trained.
#[derive(Debug)]
pub struct InrGenerator {
    config: InrConfig,
    bank: FourierBank,
    embedding: Tensor,
    hidden: Vec<Linear>,
    out: Linear,
    groups: LayerGroups,
    params: ParamSet,
    dims: (usize, usize, usize),
}

impl InrGenerator {
    pub fn new(config: &InrConfig, dims: (usize, usize, usize), rng: &mut Rng, dtype: DType) -> Result<Self> {
        config.validate()?;
        let (c, h, w) = dims;
        let bank = FourierBank::new(config.num_frequencies, config.freq_variance, rng, dtype)?;
        let embedding = fourier_embed(&coord_grid(h, w, dtype)?, &bank)?;
        let mut ps = ParamSet::new();
        let mut hidden = Vec::new();
        let mut inp = bank.embedding_dim();
        let w0 = config.omega0;
        for i in 0..config.hidden_layers {
            // SIREN init: U(-1/n, 1/n) for the first layer, U(-sqrt(6/n)/ω0, ..) after.
            let bound = if i == 0 {
                1.0 / inp as f64
            } else {
                (6.0 / inp as f64).sqrt() / w0
            };
            let b_bound = 1.0 / (inp as f64).sqrt();
            hidden.push(Linear::with_bounds(
                &mut ps,
                &format!("layer{i}"),
                inp,
                config.hidden_width,
                bound,
                b_bound,
                rng,
                dtype,
            )?);
            inp = config.hidden_width;
        }
        let bound = (6.0 / inp as f64).sqrt() / w0;
        let out = Linear::with_bounds(&mut ps, "out", inp, c, bound, 1.0 / (inp as f64).sqrt(), rng, dtype)?;
        let mut named: Vec<(String, Vec<Var>)> = hidden
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("layer{i}"), l.vars()))
            .collect();
        named.push(("out".into(), out.vars()));
        let groups = LayerGroups::new(named)?;
        Ok(Self {
            config: config.clone(),
            bank,
            embedding,
            hidden,
            out,
            groups,
            params: ps,
            dims,
        })
    }

    pub fn config(&self) -> &InrConfig {
        &self.config
    }

    pub fn bank(&self) -> &FourierBank {
        &self.bank
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn render(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims;
        let mut x = self.embedding.clone();
        for layer in &self.hidden {
            x = (layer.forward(&x)? * self.config.omega0)?.sin()?;
        }
        let rgb = sigmoid(&self.out.forward(&x)?)?;
        Ok(rgb.t()?.reshape((c, h, w))?)
    }

    pub fn groups(&self) -> &LayerGroups {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut LayerGroups {
        &mut self.groups
    }
}
