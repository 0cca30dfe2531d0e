use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::groups::LayerGroups;
use crate::error::{DiscError, Result};
use crate::nn::{sigmoid, uniform, Conv2d, ParamSet};
use crate::seed::Rng;

const SKIP_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DipConfig {
    pub scales: usize,
    pub width: usize,
    pub noise_channels: usize,
}

impl Default for DipConfig {
    fn default() -> Self {
        Self {
            scales: 4,
            width: 16,
            noise_channels: 32,
        }
    }
}

impl DipConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.scales == 0 || self.width == 0 || self.noise_channels == 0 {
            return Err(DiscError::Config("dip needs scales, width and noise_channels > 0".into()));
        }
        if image_size % (1 << self.scales) != 0 {
            return Err(DiscError::Config(format!(
                "dip with {} scales needs image size divisible by {}, got {image_size}",
                self.scales,
                1 << self.scales
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Encoder {
    conv_a: Conv2d,
    conv_b: Conv2d,
}

#[derive(Debug)]
struct Decoder {
    skip: Conv2d,
    conv_a: Conv2d,
    conv_b: Conv2d,
}

/// U-Net style encoder-decoder with skip connections over a fixed noise
/// input z ~ U[-1, 1]. Layer groups run encoder-shallow to bottleneck to
/// decoder-deep: enc_0..enc_{S-1}, dec_{S-1}..dec_0, with each skip
/// projection and the output layer grouped with the decoder block that
/// consumes them.
#[derive(Debug)]
pub struct DipGenerator {
    config: DipConfig,
    noise: Tensor,
    encoders: Vec<Encoder>,
    decoders: Vec<Decoder>,
    out: Conv2d,
    groups: LayerGroups,
    params: ParamSet,
}

fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * 0.2)?)?)
}

/// Nearest-neighbour ×2 upsampling built from broadcast + reshape so the
/// backward pass accumulates correctly.
fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

impl DipGenerator {
    pub fn new(config: &DipConfig, dims: (usize, usize, usize), rng: &mut Rng, dtype: DType) -> Result<Self> {
        let (c, h, w) = dims;
        config.validate(h)?;
        config.validate(w)?;
        let noise = uniform(rng, &[1, config.noise_channels, h, w], -1.0, 1.0, dtype)?;
        let mut ps = ParamSet::new();
        let width = config.width;
        let mut encoders = Vec::new();
        let mut inp = config.noise_channels;
        let mut in_channels = Vec::new();
        for k in 0..config.scales {
            in_channels.push(inp);
            encoders.push(Encoder {
                conv_a: Conv2d::new(&mut ps, &format!("enc{k}.a"), inp, width, 3, 1, true, rng, dtype)?,
                conv_b: Conv2d::new(&mut ps, &format!("enc{k}.b"), width, width, 3, 1, true, rng, dtype)?,
            });
            inp = width;
        }
        let mut decoders = Vec::new();
        for k in 0..config.scales {
            decoders.push(Decoder {
                skip: Conv2d::new(&mut ps, &format!("skip{k}"), in_channels[k], SKIP_CHANNELS, 1, 1, true, rng, dtype)?,
                conv_a: Conv2d::new(
                    &mut ps,
                    &format!("dec{k}.a"),
                    width + SKIP_CHANNELS,
                    width,
                    3,
                    1,
                    true,
                    rng,
                    dtype,
                )?,
                conv_b: Conv2d::new(&mut ps, &format!("dec{k}.b"), width, width, 1, 1, true, rng, dtype)?,
            });
        }
        let out = Conv2d::new(&mut ps, "out", width, c, 1, 1, true, rng, dtype)?;
        let mut named: Vec<(String, Vec<Var>)> = encoders
            .iter()
            .enumerate()
            .map(|(k, e)| (format!("enc{k}"), [e.conv_a.vars(), e.conv_b.vars()].concat()))
            .collect();
        for k in (0..config.scales).rev() {
            let d = &decoders[k];
            let mut vars = [d.skip.vars(), d.conv_a.vars(), d.conv_b.vars()].concat();
            if k == 0 {
                vars.extend(out.vars());
            }
            named.push((format!("dec{k}"), vars));
        }
        let groups = LayerGroups::new(named)?;
        Ok(Self {
            config: config.clone(),
            noise,
            encoders,
            decoders,
            out,
            groups,
            params: ps,
        })
    }

    pub fn config(&self) -> &DipConfig {
        &self.config
    }

    pub fn noise(&self) -> &Tensor {
        &self.noise
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn render(&self) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = self.noise.clone();
        for (enc, dec) in self.encoders.iter().zip(&self.decoders) {
            skips.push(leaky_relu(&dec.skip.forward(&h)?)?);
            let a = leaky_relu(&enc.conv_a.forward(&h)?)?.avg_pool2d(2)?;
            h = leaky_relu(&enc.conv_b.forward(&a)?)?;
        }
        for (dec, skip) in self.decoders.iter().zip(&skips).rev() {
            let u = Tensor::cat(&[upsample2(&h)?, skip.clone()], 1)?;
            let a = leaky_relu(&dec.conv_a.forward(&u)?)?;
            h = leaky_relu(&dec.conv_b.forward(&a)?)?;
        }
        Ok(sigmoid(&self.out.forward(&h)?)?.squeeze(0)?)
    }

    pub fn groups(&self) -> &LayerGroups {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut LayerGroups {
        &mut self.groups
    }
}
