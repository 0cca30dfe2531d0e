//! Ranking loss that teaches the loss predictor to preserve the ordering of
//! per-sample classifier losses.

use candle_core::Tensor;

use crate::error::{DiscError, Result};
use crate::nn::device;

/// Ordering indicator: +1 when `si > sj`, -1 otherwise (ties included).
pub fn ordering(si: f64, sj: f64) -> f64 {
    if si > sj {
        1.0
    } else {
        -1.0
    }
}

/// Σ max(0, -I(s_i, s_j)·(ŝ_i - ŝ_j) + γ) over the given pairs.
pub fn contrastive_aux_loss(s_pairs: &[(f64, f64)], shat_pairs: &[(f64, f64)], gamma: f64) -> Result<f64> {
    if s_pairs.len() != shat_pairs.len() {
        return Err(DiscError::Data(format!(
            "{} loss pairs vs {} estimate pairs",
            s_pairs.len(),
            shat_pairs.len()
        )));
    }
    Ok(s_pairs
        .iter()
        .zip(shat_pairs)
        .map(|(&(si, sj), &(hi, hj))| (-ordering(si, sj) * (hi - hj) + gamma).max(0.0))
        .sum())
}

/// Differentiable form over a batch: `shat` is (N,), `s` holds the detached
/// true losses, `pairs` index into both. Returns the summed hinge.
pub fn contrastive_aux_loss_tensor(s: &[f64], shat: &Tensor, pairs: &[(usize, usize)], gamma: f64) -> Result<Tensor> {
    if pairs.is_empty() {
        return Ok(shat.sum_all()?.zeros_like()?);
    }
    let left: Vec<u32> = pairs.iter().map(|p| p.0 as u32).collect();
    let right: Vec<u32> = pairs.iter().map(|p| p.1 as u32).collect();
    let sign: Vec<f64> = pairs.iter().map(|&(i, j)| -ordering(s[i], s[j])).collect();
    let dev = device();
    let li = Tensor::new(left.as_slice(), &dev)?;
    let ri = Tensor::new(right.as_slice(), &dev)?;
    let sign = Tensor::new(sign.as_slice(), &dev)?.to_dtype(shat.dtype())?;
    let diff = (shat.index_select(&li, 0)? - shat.index_select(&ri, 0)?)?;
    let hinge = ((diff * sign)? + gamma)?.relu()?;
    Ok(hinge.sum_all()?)
}

/// Pairs for a batch of `n`: split into halves A and B, take the element-wise
/// pairs (A_k, B_k) first, then the remaining ordered cross pairs (A_i, B_j)
/// row by row until `n` pairs are collected.
pub fn batch_pairs(n: usize) -> Vec<(usize, usize)> {
    let half = n / 2;
    let mut pairs: Vec<(usize, usize)> = (0..half).map(|k| (k, half + k)).collect();
    'outer: for i in 0..half {
        for j in 0..half {
            if pairs.len() >= n {
                break 'outer;
            }
            if i != j {
                pairs.push((i, half + j));
            }
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Var};
    use proptest::prelude::*;

    #[test]
    fn hand_evaluated_examples() {
        assert_eq!(contrastive_aux_loss(&[(2.0, 1.0)], &[(3.0, 1.0)], 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_aux_loss(&[(2.0, 1.0)], &[(1.0, 1.0)], 1.0).unwrap(), 1.0);
        // Tie uses the "otherwise" branch, I = -1: max(0, (ŝ_i - ŝ_j) + γ).
        assert_eq!(contrastive_aux_loss(&[(1.0, 1.0)], &[(0.5, 0.0)], 1.0).unwrap(), 1.5);
    }

    #[test]
    fn mismatched_lengths_error() {
        assert!(contrastive_aux_loss(&[(1.0, 0.0)], &[], 1.0).is_err());
    }

    #[test]
    fn pairing_scheme() {
        let p = batch_pairs(8);
        assert_eq!(p.len(), 8);
        assert_eq!(&p[..4], &[(0, 4), (1, 5), (2, 6), (3, 7)]);
        assert!(p.iter().all(|&(i, j)| i < 4 && j >= 4));
        assert!(batch_pairs(1).is_empty());
        assert_eq!(batch_pairs(2), vec![(0, 1)]);
    }

    #[test]
    fn tensor_form_matches_scalar_form_and_gradient() {
        let s = [0.3, 2.0, 1.0, 0.1, 0.7, 0.7];
        let shat0 = [0.2f64, 0.4, 1.9, 0.05, 0.6, 0.1];
        let pairs = batch_pairs(6);
        let var = Var::from_tensor(&Tensor::new(&shat0, &device()).unwrap()).unwrap();
        let loss = contrastive_aux_loss_tensor(&s, var.as_tensor(), &pairs, 1.0).unwrap();
        let scalar = |h: &[f64]| {
            let sp: Vec<(f64, f64)> = pairs.iter().map(|&(i, j)| (s[i], s[j])).collect();
            let hp: Vec<(f64, f64)> = pairs.iter().map(|&(i, j)| (h[i], h[j])).collect();
            contrastive_aux_loss(&sp, &hp, 1.0).unwrap()
        };
        assert!((loss.to_scalar::<f64>().unwrap() - scalar(&shat0)).abs() < 1e-12);
        let grads = loss.backward().unwrap();
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().to_vec1().unwrap();
        for k in 0..shat0.len() {
            let h = 1e-6;
            let mut p = shat0;
            p[k] += h;
            let mut q = shat0;
            q[k] -= h;
            let fd = (scalar(&p) - scalar(&q)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1e-8) + 1e-9, "k={k}: {fd} vs {}", g[k]);
        }
        let _ = DType::F64;
    }

    proptest! {
        #[test]
        fn non_negative_and_shift_invariant(
            s in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20),
            h in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 20),
            c in -10.0f64..10.0,
            gamma in 0.0f64..2.0,
        ) {
            let h = &h[..s.len()];
            let base = contrastive_aux_loss(&s, h, gamma).unwrap();
            prop_assert!(base >= 0.0);
            let shifted: Vec<(f64, f64)> = h.iter().map(|&(a, b)| (a + c, b + c)).collect();
            let moved = contrastive_aux_loss(&s, &shifted, gamma).unwrap();
            prop_assert!((base - moved).abs() <= 1e-9 * (1.0 + base.abs()));
        }

        #[test]
        fn zero_when_margins_hold(s in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20)) {
            // γ = 0 and estimates ordered exactly like the losses (no ties).
            let pairs: Vec<(f64, f64)> = s.iter().copied().filter(|(a, b)| a != b).collect();
            let h: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| (2.0 * a, 2.0 * b)).collect();
            prop_assert_eq!(contrastive_aux_loss(&pairs, &h, 0.0).unwrap(), 0.0);
        }
    }
}
