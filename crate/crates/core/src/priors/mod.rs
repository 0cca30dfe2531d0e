//! Image parameterizations for inversion (raw pixels, deep image prior,
//! implicit neural representation), analytic image regularizers and the
//! layer-unlock interface used by progressive optimization.

mod dip;
mod fourier;
mod groups;
mod inr;
mod pixel;
mod regularizers;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use dip::{DipConfig, DipGenerator};
pub use fourier::{coord_grid, fourier_embed, FourierBank};
pub use groups::{bitwise_equal, LayerGroups};
pub use inr::{InrConfig, InrGenerator};
pub use pixel::PixelParam;
pub use regularizers::{l2_norm, tv_norm, TV_EPS};

use crate::error::{DiscError, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Pixel,
    Dip,
    #[default]
    Inr,
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorKind::Pixel => "pixel",
            PriorKind::Dip => "dip",
            PriorKind::Inr => "inr",
        })
    }
}

impl FromStr for PriorKind {
    type Err = DiscError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(PriorKind::Pixel),
            "dip" => Ok(PriorKind::Dip),
            "inr" => Ok(PriorKind::Inr),
            other => Err(DiscError::Config(format!("unknown prior kind '{other}'"))),
        }
    }
}

/// Prior block of a run config. `warm_start_steps` of `None` picks the
/// per-kind default (0 pixel, 3000 DIP, 2000 INR).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub dip: DipConfig,
    pub inr: InrConfig,
    pub warm_start_steps: Option<usize>,
    pub warm_start_lr: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            kind: PriorKind::Inr,
            dip: DipConfig::default(),
            inr: InrConfig::default(),
            warm_start_steps: None,
            warm_start_lr: 5e-4,
        }
    }
}

impl PriorConfig {
    pub fn warm_start_steps(&self) -> usize {
        self.warm_start_steps.unwrap_or(match self.kind {
            PriorKind::Pixel => 0,
            PriorKind::Dip => 3000,
            PriorKind::Inr => 2000,
        })
    }

    /// Fills `warm_start_steps` with the per-kind default.
    pub fn resolved(&self) -> Self {
        Self {
            warm_start_steps: Some(self.warm_start_steps()),
            ..self.clone()
        }
    }
}

/// A prior parameterization together with its fixed input and unlock index.
#[derive(Debug)]
pub enum GeneratorState {
    Pixel(PixelParam),
    Dip(DipGenerator),
    Inr(InrGenerator),
}

impl GeneratorState {
    /// Fresh state for `query` (C, H, W). Pixel priors start at the query;
    /// DIP and INR start from their seeded random initialization.
    pub fn build(config: &PriorConfig, query: &Tensor, seed: u64) -> Result<Self> {
        let (c, h, w) = query.dims3()?;
        let mut rng = seed::rng(seed);
        Ok(match config.kind {
            PriorKind::Pixel => GeneratorState::Pixel(PixelParam::from_image(query, DType::F32)?),
            PriorKind::Dip => GeneratorState::Dip(DipGenerator::new(&config.dip, (c, h, w), &mut rng, DType::F32)?),
            PriorKind::Inr => GeneratorState::Inr(InrGenerator::new(&config.inr, (c, h, w), &mut rng, DType::F32)?),
        })
    }

    pub fn kind(&self) -> PriorKind {
        match self {
            GeneratorState::Pixel(_) => PriorKind::Pixel,
            GeneratorState::Dip(_) => PriorKind::Dip,
            GeneratorState::Inr(_) => PriorKind::Inr,
        }
    }

    /// Current image (C, H, W) in [0, 1], differentiable w.r.t. the generator parameters.
    pub fn render(&self) -> Result<Tensor> {
        match self {
            GeneratorState::Pixel(p) => p.render(),
            GeneratorState::Dip(d) => d.render(),
            GeneratorState::Inr(g) => g.render(),
        }
    }

    pub fn groups(&self) -> &LayerGroups {
        match self {
            GeneratorState::Pixel(p) => p.groups(),
            GeneratorState::Dip(d) => d.groups(),
            GeneratorState::Inr(g) => g.groups(),
        }
    }

    pub fn groups_mut(&mut self) -> &mut LayerGroups {
        match self {
            GeneratorState::Pixel(p) => p.groups_mut(),
            GeneratorState::Dip(d) => d.groups_mut(),
            GeneratorState::Inr(g) => g.groups_mut(),
        }
    }

    /// L, the number of unlockable layer groups.
    pub fn num_groups(&self) -> usize {
        self.groups().len()
    }

    pub fn unlock_index(&self) -> usize {
        self.groups().unlock_index()
    }

    pub fn set_unlock(&mut self, i: usize) -> Result<()> {
        self.groups_mut().set_unlock(i)
    }
}

/// Free-function form of [`GeneratorState::render`].
pub fn render(state: &GeneratorState) -> Result<Tensor> {
    state.render()
}

/// Free-function form of [`GeneratorState::set_unlock`].
pub fn set_unlock(state: &mut GeneratorState, i: usize) -> Result<()> {
    state.set_unlock(i)
}
