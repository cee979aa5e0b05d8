//! Smooth-ℓ1 reconstruction loss restricted to masked patches.

use super::real::Real;
use super::ModelError;

pub const SMOOTH_L1_BETA: f64 = 1.0;

#[inline]
fn huber<T: Real>(r: T) -> (T, T) {
    let beta = T::lit(SMOOTH_L1_BETA);
    let a = r.abs();
    if a < beta {
        (T::lit(0.5) * r * r / beta, r / beta)
    } else {
        (a - T::lit(0.5) * beta, r.signum())
    }
}

/// Mean smooth-ℓ1 over every value of every patch with `mask[row]` set, and
/// its gradient w.r.t. `pred` (zero on unmasked rows).
pub fn smooth_l1<T: Real>(pred: &[T], target: &[T], mask: &[bool], patch_values: usize) -> Result<(T, Vec<T>), ModelError> {
    assert_eq!(pred.len(), target.len());
    assert_eq!(pred.len(), mask.len() * patch_values);
    let count = mask.iter().filter(|&&m| m).count() * patch_values;
    if count == 0 {
        return Err(ModelError::EmptyMask);
    }
    let inv = T::one() / T::lit(count as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    for (row, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for i in row * patch_values..(row + 1) * patch_values {
            let (l, g) = huber(pred[i] - target[i]);
            loss += l;
            grad[i] = g * inv;
        }
    }
    Ok((loss * inv, grad))
}
