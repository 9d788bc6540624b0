//! Learning-rate schedule and gradient clipping.

use std::f64::consts::PI;

use crate::numerics::Tensor;

/// Linear warmup from 0 to `lr0` over `warmup_ratio · total` steps, then
/// cosine decay to `lr_min` at `step == total`. Out-of-range steps clamp.
pub fn cosine_lr(step: usize, total: usize, warmup_ratio: f64, lr0: f64, lr_min: f64) -> f64 {
    let total = total.max(1);
    let step = step.min(total);
    let warmup = (warmup_ratio.clamp(0.0, 1.0) * total as f64).round() as usize;
    if step < warmup {
        return lr0 * step as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1);
    let frac = (step - warmup) as f64 / span as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * frac).cos())
}

pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    grads
        .into_iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales so the global norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads.iter());
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lr_boundaries_and_midpoint() {
        let (lr0, lrm) = (2e-4, 2e-6);
        assert_eq!(cosine_lr(0, 1000, 0.02, lr0, lrm), 0.0);
        assert_eq!(cosine_lr(20, 1000, 0.02, lr0, lrm), lr0);
        assert_eq!(cosine_lr(1000, 1000, 0.02, lr0, lrm), lrm);
        assert_eq!(cosine_lr(5000, 1000, 0.02, lr0, lrm), lrm);
        let mid = cosine_lr(510, 1000, 0.02, lr0, lrm);
        assert!((mid - (lr0 + lrm) / 2.0).abs() < 1e-18);
        assert_eq!(cosine_lr(10, 1000, 0.02, lr0, lrm), lr0 / 2.0);
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_bound(vals in prop::collection::vec(-50.0f64..50.0, 1..40), max in 0.1f64..5.0) {
            let n = vals.len();
            let mut g = vec![Tensor::vector(vals.clone()), Tensor::vector(vals.iter().map(|v| v * 0.5).collect())];
            let before = clip_grad_norm(&mut g, max);
            let after = global_norm(g.iter());
            if before > max {
                prop_assert!(after <= max + 1e-9);
            } else {
                prop_assert_eq!(g[0].data(), &vals[..]);
            }
            prop_assert_eq!(g[0].numel(), n);
        }

        #[test]
        fn decay_phase_is_monotone(total in 2usize..500, warm in 0.0f64..0.5) {
            let w = (warm * total as f64).round() as usize;
            let mut prev = f64::INFINITY;
            for s in w..=total {
                let lr = cosine_lr(s, total, warm, 1e-3, 1e-5);
                prop_assert!(lr <= prev + 1e-18);
                prev = lr;
            }
        }
    }
}
