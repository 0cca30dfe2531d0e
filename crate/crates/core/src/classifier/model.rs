use candle_core::{DType, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::error::{DiscError, Result};
use crate::nn::{BatchNorm2d, Conv2d, Linear, ParamSet};
use crate::seed::Rng;

/// Pixels in [0, 1] are mapped to (x - 0.5) * INPUT_SCALE before the first layer.
pub const INPUT_SCALE: f64 = 4.0;

/// Convolutional feature extractor. `Small` is the desk-scale default;
/// `Resnet18` is the full-size residual network with the same tap interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Backbone {
    Small { widths: Vec<usize> },
    Resnet18 { base_width: usize },
}

impl Default for Backbone {
    fn default() -> Self {
        Backbone::Small {
            widths: vec![16, 32, 32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub backbone: Backbone,
}

/// Logits plus the intermediate feature maps exposed as taps and the pooled
/// feature vector feeding the linear head.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub taps: Vec<Tensor>,
    pub features: Tensor,
}

#[derive(Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(ps: &mut ParamSet, name: &str, inp: usize, out: usize, stride: usize, rng: &mut Rng, dtype: DType) -> Result<Self> {
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), inp, out, 3, stride, false, rng, dtype)?;
        let bn1 = BatchNorm2d::new(ps, &format!("{name}.bn1"), out, dtype)?;
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), out, out, 3, 1, false, rng, dtype)?;
        let bn2 = BatchNorm2d::new(ps, &format!("{name}.bn2"), out, dtype)?;
        let shortcut = if stride != 1 || inp != out {
            Some((
                Conv2d::new(ps, &format!("{name}.down"), inp, out, 1, stride, false, rng, dtype)?,
                BatchNorm2d::new(ps, &format!("{name}.down_bn"), out, dtype)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, train)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Debug)]
enum Body {
    Small(Vec<Conv2d>),
    Resnet {
        stem: (Conv2d, BatchNorm2d),
        stages: Vec<Vec<BasicBlock>>,
    },
}

/// The classifier F with taps Ψ_l after every block.
#[derive(Debug)]
pub struct ClassifierModel {
    spec: ClassifierSpec,
    params: ParamSet,
    body: Body,
    head: Linear,
    tap_names: Vec<String>,
    tap_channels: Vec<usize>,
    dtype: DType,
}

impl ClassifierModel {
    pub fn new(spec: ClassifierSpec, rng: &mut Rng, dtype: DType) -> Result<Self> {
        let mut ps = ParamSet::new();
        let (body, tap_names, tap_channels) = match &spec.backbone {
            Backbone::Small { widths } => {
                if widths.is_empty() {
                    return Err(DiscError::Config("backbone needs at least one block".into()));
                }
                let factor = 1usize << widths.len();
                if spec.image_size % factor != 0 {
                    return Err(DiscError::Config(format!(
                        "image_size {} not divisible by 2^{} for a {}-block backbone",
                        spec.image_size,
                        widths.len(),
                        widths.len()
                    )));
                }
                let mut convs = Vec::new();
                let mut inp = spec.channels;
                for (i, &w) in widths.iter().enumerate() {
                    convs.push(Conv2d::new(&mut ps, &format!("block{}", i + 1), inp, w, 3, 1, true, rng, dtype)?);
                    inp = w;
                }
                let names = (1..=widths.len()).map(|i| format!("block{i}")).collect();
                (Body::Small(convs), names, widths.clone())
            }
            Backbone::Resnet18 { base_width } => {
                let w = *base_width;
                let stem = (
                    Conv2d::new(&mut ps, "stem.conv", spec.channels, w, 3, 1, false, rng, dtype)?,
                    BatchNorm2d::new(&mut ps, "stem.bn", w, dtype)?,
                );
                let widths = [w, 2 * w, 4 * w, 8 * w];
                let mut stages = Vec::new();
                let mut inp = w;
                for (s, &out) in widths.iter().enumerate() {
                    let stride = if s == 0 { 1 } else { 2 };
                    let b1 = BasicBlock::new(&mut ps, &format!("layer{}.0", s + 1), inp, out, stride, rng, dtype)?;
                    let b2 = BasicBlock::new(&mut ps, &format!("layer{}.1", s + 1), out, out, 1, rng, dtype)?;
                    stages.push(vec![b1, b2]);
                    inp = out;
                }
                let names = (1..=4).map(|i| format!("layer{i}")).collect();
                (Body::Resnet { stem, stages }, names, widths.to_vec())
            }
        };
        let feat = *tap_channels.last().expect("non-empty backbone");
        let head = Linear::new(&mut ps, "head", feat, spec.num_classes, rng, dtype)?;
        Ok(Self {
            spec,
            params: ps,
            body,
            head,
            tap_names,
            tap_channels,
            dtype,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn tap_names(&self) -> &[String] {
        &self.tap_names
    }

    pub fn tap_channels(&self) -> &[usize] {
        &self.tap_channels
    }

    pub fn feature_dim(&self) -> usize {
        *self.tap_channels.last().expect("non-empty backbone")
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.vars()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [self.spec.channels, self.spec.image_size, self.spec.image_size]
    }

    /// Accepts (N, C, H, W) or a single (C, H, W) image.
    pub fn check_input(&self, x: &Tensor) -> Result<Tensor> {
        let x = if x.rank() == 3 { x.unsqueeze(0)? } else { x.clone() };
        let want = self.input_dims();
        let d = x.dims();
        if d.len() != 4 || d[1..] != want {
            return Err(DiscError::Shape {
                expected: vec![d.first().copied().unwrap_or(1), want[0], want[1], want[2]],
                got: d.to_vec(),
            });
        }
        Ok(x.to_dtype(self.dtype)?)
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<ForwardOutput> {
        let x = self.check_input(x)?;
        // Standardization lives inside the model so callers stay in [0, 1] pixel space.
        let mut h = ((x - 0.5)? * INPUT_SCALE)?;
        let mut taps = Vec::with_capacity(self.tap_names.len());
        match &self.body {
            Body::Small(convs) => {
                for conv in convs {
                    h = conv.forward(&h)?.relu()?.avg_pool2d(2)?;
                    taps.push(h.clone());
                }
            }
            Body::Resnet { stem, stages } => {
                h = stem.1.forward(&stem.0.forward(&h)?, train)?.relu()?;
                for stage in stages {
                    for block in stage {
                        h = block.forward(&h, train)?;
                    }
                    taps.push(h.clone());
                }
            }
        }
        let features = h.mean(D::Minus1)?.mean(D::Minus1)?;
        let logits = self.head.forward(&features)?;
        Ok(ForwardOutput { logits, taps, features })
    }

    /// Linear head applied to pooled features.
    pub fn head_forward(&self, features: &Tensor) -> Result<Tensor> {
        self.head.forward(features)
    }

    /// Evaluation-mode forward.
    pub fn forward_with_taps(&self, x: &Tensor) -> Result<ForwardOutput> {
        self.forward_t(x, false)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_t(x, false)?.logits)
    }

    /// Logits for a large set, evaluated in chunks.
    pub fn predict_logits_batched(&self, images: &Tensor, batch: usize) -> Result<Tensor> {
        let n = images.dim(0)?;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = batch.min(n - start);
            parts.push(self.logits(&images.narrow(0, start, len)?)?.detach());
            start += len;
        }
        Ok(Tensor::cat(&parts, 0)?)
    }
}
