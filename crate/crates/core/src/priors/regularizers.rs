use candle_core::Tensor;

use crate::error::{DiscError, Result};

pub const TV_EPS: f64 = 1e-8;

/// Isotropic total variation
/// Σ sqrt((x[i,j+1] - x[i,j])² + (x[i+1,j] - x[i,j])² + ε²) over pixels that
/// have both a right and a down neighbour, summed over channels (and over
/// the batch for 4-D input).
pub fn tv_norm(img: &Tensor) -> Result<Tensor> {
    let rank = img.rank();
    if rank < 2 {
        return Err(DiscError::Data(format!("tv_norm needs spatial dims, got shape {:?}", img.dims())));
    }
    let h = img.dim(rank - 2)?;
    let w = img.dim(rank - 1)?;
    if h < 2 || w < 2 {
        return Err(DiscError::Data(format!("tv_norm needs H >= 2 and W >= 2, got {h}x{w}")));
    }
    let core = img.narrow(rank - 2, 0, h - 1)?.narrow(rank - 1, 0, w - 1)?;
    let right = img.narrow(rank - 2, 0, h - 1)?.narrow(rank - 1, 1, w - 1)?;
    let down = img.narrow(rank - 2, 1, h - 1)?.narrow(rank - 1, 0, w - 1)?;
    let dx = (right - &core)?.sqr()?;
    let dy = (down - &core)?.sqr()?;
    Ok(((dx + dy)? + TV_EPS * TV_EPS)?.sqrt()?.sum_all()?)
}

/// Euclidean norm over every channel and pixel.
pub fn l2_norm(img: &Tensor) -> Result<Tensor> {
    Ok(img.sqr()?.sum_all()?.sqrt()?)
}
