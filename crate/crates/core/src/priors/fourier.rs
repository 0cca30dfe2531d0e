use std::f64::consts::PI;

use candle_core::{DType, Tensor};

use crate::error::{DiscError, Result};
use crate::nn::{device, normal};
use crate::seed::Rng;

/// Random Fourier features: frequencies b_i ~ N(0, σ² I) in 2-D and
/// amplitudes a_i. Frozen after construction.
#[derive(Debug, Clone)]
pub struct FourierBank {
    b: Tensor,
    a: Tensor,
}

impl FourierBank {
    pub fn new(num_frequencies: usize, variance: f64, rng: &mut Rng, dtype: DType) -> Result<Self> {
        if num_frequencies == 0 || !(variance >= 0.0) {
            return Err(DiscError::Config("fourier bank needs num_frequencies > 0 and variance >= 0".into()));
        }
        let b = normal(rng, &[num_frequencies, 2], 0.0, variance.sqrt(), dtype)?;
        let a = Tensor::ones(num_frequencies, dtype, &device())?;
        Ok(Self { b, a })
    }

    pub fn from_parts(b: Tensor, a: Tensor) -> Result<Self> {
        let (m, two) = b.dims2()?;
        if two != 2 || a.dims() != [m] {
            return Err(DiscError::Shape {
                expected: vec![m, 2],
                got: b.dims().to_vec(),
            });
        }
        Ok(Self { b, a })
    }

    pub fn num_frequencies(&self) -> usize {
        self.a.dim(0).expect("1-D amplitudes")
    }

    pub fn frequencies(&self) -> &Tensor {
        &self.b
    }

    pub fn amplitudes(&self) -> &Tensor {
        &self.a
    }

    pub fn embedding_dim(&self) -> usize {
        2 * self.num_frequencies()
    }
}

/// z(v) = [a_1 cos(2π b_1ᵀv), a_1 sin(2π b_1ᵀv), ...] for each row of `coords` (P, 2).
pub fn fourier_embed(coords: &Tensor, bank: &FourierBank) -> Result<Tensor> {
    let p = coords.dim(0)?;
    let m = bank.num_frequencies();
    let proj = (coords.to_dtype(bank.b.dtype())?.matmul(&bank.b.t()?)? * (2.0 * PI))?;
    let pairs = Tensor::stack(&[proj.cos()?, proj.sin()?], 2)?;
    let a = bank.a.reshape((1, m, 1))?;
    Ok(pairs.broadcast_mul(&a)?.reshape((p, 2 * m))?)
}

/// Row-major pixel-centre grid over [0,1]², (H·W, 2) with columns (row, col).
pub fn coord_grid(h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    let scale = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let data: Vec<f64> = (0..h)
        .flat_map(|i| (0..w).flat_map(move |j| [scale(i, h), scale(j, w)]))
        .collect();
    Ok(Tensor::from_vec(data, (h * w, 2), &device())?.to_dtype(dtype)?)
}
