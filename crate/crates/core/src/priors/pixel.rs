use candle_core::{DType, Tensor, Var};

use super::groups::LayerGroups;
use crate::error::Result;
use crate::nn::sigmoid;

const LOGIT_CLAMP: f64 = 1e-6;

/// Direct pixel parameterization: render = sigmoid(raw), one layer group.
#[derive(Debug)]
pub struct PixelParam {
    raw: Var,
    groups: LayerGroups,
}

impl PixelParam {
    /// Initialize raw = logit(image) so the first render reproduces `image`.
    pub fn from_image(image: &Tensor, dtype: DType) -> Result<Self> {
        let img = image.to_dtype(DType::F64)?.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)?;
        let raw = (img.log()? - img.affine(-1.0, 1.0)?.log()?)?.to_dtype(dtype)?;
        let raw = Var::from_tensor(&raw)?;
        let groups = LayerGroups::new(vec![("pixels".into(), vec![raw.clone()])])?;
        Ok(Self { raw, groups })
    }

    pub fn render(&self) -> Result<Tensor> {
        sigmoid(self.raw.as_tensor())
    }

    pub fn raw(&self) -> &Var {
        &self.raw
    }

    pub fn groups(&self) -> &LayerGroups {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut LayerGroups {
        &mut self.groups
    }
}
