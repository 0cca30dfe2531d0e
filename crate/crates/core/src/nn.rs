//! Minimal layer toolkit on top of candle: parameter registry, seeded
//! initializers and the few layers the classifier and generators need.

use std::collections::HashMap;
use std::path::Path;
use std::sync::RwLock;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DiscError, Result};
use crate::seed::Rng;

pub fn device() -> Device {
    Device::Cpu
}

/// Tensor of the given shape with entries drawn from U[lo, hi).
pub fn uniform(rng: &mut Rng, dims: &[usize], lo: f64, hi: f64, dtype: DType) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(data, dims, &device())?.to_dtype(dtype)?)
}

/// Tensor of the given shape with entries drawn from N(mean, std²).
pub fn normal(rng: &mut Rng, dims: &[usize], mean: f64, std: f64, dtype: DType) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            mean + std * z
        })
        .collect();
    Ok(Tensor::from_vec(data, dims, &device())?.to_dtype(dtype)?)
}

/// Ordered collection of named trainable tensors plus non-trainable buffers.
#[derive(Debug, Default)]
pub struct ParamSet {
    params: Vec<(String, Var)>,
    buffers: Vec<(String, SharedBuffer)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(&mut self, name: impl Into<String>, init: Tensor) -> Result<Var> {
        let name = name.into();
        if self.params.iter().any(|(n, _)| *n == name) {
            return Err(DiscError::Config(format!("duplicate parameter name {name}")));
        }
        let v = Var::from_tensor(&init)?;
        self.params.push((name, v.clone()));
        Ok(v)
    }

    pub fn buffer(&mut self, name: impl Into<String>, init: Tensor) -> SharedBuffer {
        let b = SharedBuffer::new(init);
        self.buffers.push((name.into(), b.clone()));
        b
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named_vars(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Snapshot of every parameter and buffer, keyed by `<prefix><name>`.
    pub fn export(&self, prefix: &str, out: &mut HashMap<String, Tensor>) -> Result<()> {
        for (n, v) in &self.params {
            out.insert(format!("{prefix}{n}"), v.as_tensor().copy()?);
        }
        for (n, b) in &self.buffers {
            out.insert(format!("{prefix}{n}"), b.get());
        }
        Ok(())
    }

    /// Overwrite every parameter and buffer from `map`; all names must be present.
    pub fn import(&self, prefix: &str, map: &HashMap<String, Tensor>) -> Result<()> {
        for (n, v) in &self.params {
            let key = format!("{prefix}{n}");
            let t = map
                .get(&key)
                .ok_or_else(|| DiscError::MissingArtifact(format!("tensor {key} absent from checkpoint")))?;
            if t.dims() != v.dims() {
                return Err(DiscError::Shape {
                    expected: v.dims().to_vec(),
                    got: t.dims().to_vec(),
                });
            }
            v.set(&t.to_dtype(v.dtype())?)?;
        }
        for (n, b) in &self.buffers {
            let key = format!("{prefix}{n}");
            let t = map
                .get(&key)
                .ok_or_else(|| DiscError::MissingArtifact(format!("tensor {key} absent from checkpoint")))?;
            b.set(t.clone());
        }
        Ok(())
    }
}

/// A non-trainable tensor that training code mutates in place (running
/// statistics, centroid accumulators).
#[derive(Debug, Clone)]
pub struct SharedBuffer(std::sync::Arc<RwLock<Tensor>>);

impl SharedBuffer {
    pub fn new(t: Tensor) -> Self {
        Self(std::sync::Arc::new(RwLock::new(t)))
    }

    pub fn get(&self) -> Tensor {
        self.0.read().expect("buffer lock poisoned").clone()
    }

    pub fn set(&self, t: Tensor) {
        *self.0.write().expect("buffer lock poisoned") = t;
    }
}

pub fn save_tensors(map: &HashMap<String, Tensor>, path: &Path) -> Result<()> {
    candle_core::safetensors::save(map, path)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(DiscError::MissingArtifact(path.display().to_string()));
    }
    Ok(candle_core::safetensors::load(path, &device())?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// PyTorch-style default init: U(-1/sqrt(in), 1/sqrt(in)).
    pub fn new(ps: &mut ParamSet, name: &str, inp: usize, out: usize, rng: &mut Rng, dtype: DType) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        Self::with_bounds(ps, name, inp, out, bound, bound, rng, dtype)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_bounds(
        ps: &mut ParamSet,
        name: &str,
        inp: usize,
        out: usize,
        w_bound: f64,
        b_bound: f64,
        rng: &mut Rng,
        dtype: DType,
    ) -> Result<Self> {
        let weight = ps.var(format!("{name}.weight"), uniform(rng, &[out, inp], -w_bound, w_bound, dtype)?)?;
        let bias = ps.var(format!("{name}.bias"), uniform(rng, &[out], -b_bound, b_bound, dtype)?)?;
        Ok(Self { weight, bias })
    }

    /// `x` is (N, in); returns (N, out).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub padding: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut Rng,
        dtype: DType,
    ) -> Result<Self> {
        let fan_in = (inp * kernel * kernel) as f64;
        // Kaiming-uniform for ReLU-family activations.
        let bound = (6.0 / fan_in).sqrt();
        let weight = ps.var(
            format!("{name}.weight"),
            uniform(rng, &[out, inp, kernel, kernel], -bound, bound, dtype)?,
        )?;
        let bias = if bias {
            let bb = 1.0 / fan_in.sqrt();
            Some(ps.var(format!("{name}.bias"), uniform(rng, &[out], -bb, bb, dtype)?)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => {
                let c = b.dim(0)?;
                Ok(y.broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)?)
            }
            None => Ok(y),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.weight.clone()];
        if let Some(b) = &self.bias {
            v.push(b.clone());
        }
        v
    }
}

/// Batch normalization over (N, C, H, W) with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    running_mean: SharedBuffer,
    running_var: SharedBuffer,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, dtype: DType) -> Result<Self> {
        let dev = device();
        let gamma = ps.var(format!("{name}.gamma"), Tensor::ones(channels, dtype, &dev)?)?;
        let beta = ps.var(format!("{name}.beta"), Tensor::zeros(channels, dtype, &dev)?)?;
        let running_mean = ps.buffer(format!("{name}.running_mean"), Tensor::zeros(channels, dtype, &dev)?);
        let running_var = ps.buffer(format!("{name}.running_var"), Tensor::ones(channels, dtype, &dev)?);
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (mean, var) = if train {
            let xt = x.transpose(0, 1)?.flatten_from(1)?;
            let mean = xt.mean(D::Minus1)?;
            let var = xt.broadcast_sub(&mean.unsqueeze(1)?)?.sqr()?.mean(D::Minus1)?;
            let m = self.momentum;
            let rm = ((self.running_mean.get() * (1.0 - m))? + (mean.detach() * m)?)?;
            let rv = ((self.running_var.get() * (1.0 - m))? + (var.detach() * m)?)?;
            self.running_mean.set(rm);
            self.running_var.set(rv);
            (mean, var)
        } else {
            (self.running_mean.get(), self.running_var.get())
        };
        let shape = (1, c, 1, 1);
        let xhat = x
            .broadcast_sub(&mean.reshape(shape)?)?
            .broadcast_div(&(var + self.eps)?.sqrt()?.reshape(shape)?)?;
        Ok(xhat
            .broadcast_mul(&self.gamma.as_tensor().reshape(shape)?)?
            .broadcast_add(&self.beta.as_tensor().reshape(shape)?)?)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

/// Numerically stable softplus: max(x, 0) + log(1 + exp(-|x|)).
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Per-sample cross entropy; `logits` is (N, K), `labels` is (N,) u32.
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = logp.gather(&labels.unsqueeze(1)?, 1)?.squeeze(1)?;
    Ok(picked.neg()?)
}

/// Adam (no weight decay) over the given variables.
pub fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

/// One optimizer step that also reports whether the loss was finite.
pub fn step(opt: &mut AdamW, loss: &Tensor) -> Result<f64> {
    let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Ok(v);
    }
    opt.backward_step(loss)?;
    Ok(v)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
