//! Low-rank adapters: a wrapped dense layer computes `x (W + (alpha/r) A B)`
//! with the base `W` frozen and only `A`, `B` trainable.

use rand_chacha::ChaCha8Rng;

use super::layers::Dense;
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::params::{init, Graph, ParamId, ParamStore};

pub const DEFAULT_RANK: usize = 16;
pub const DEFAULT_ALPHA: f64 = 32.0;

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Low-rank delta `(alpha/r) (x A) B`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = g.param(self.a);
        let b = g.param(self.b);
        let xa = g.tape.matmul(x, a)?;
        let xab = g.tape.matmul(xa, b)?;
        Ok(g.tape.scale(xab, self.scale()))
    }
}

/// Wraps `dense` with an adapter. `A` is drawn like a dense weight, `B`
/// starts at zero so the wrapped layer is initially unchanged.
pub fn wrap_dense(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    dense: &mut Dense,
    rank: usize,
    alpha: f64,
) -> Result<()> {
    if dense.lora.is_some() {
        return Err(Error::config(format!("layer `{}` already has an adapter", dense.name)));
    }
    if rank == 0 {
        return Err(Error::config("adapter rank must be at least 1"));
    }
    let component = store.entry(dense.w).component;
    let a = store.add(
        format!("{}.lora_a", dense.name),
        init::scaled_uniform(rng, &[dense.in_dim, rank], dense.in_dim),
        component,
    )?;
    let b = store.add(
        format!("{}.lora_b", dense.name),
        Tensor::zeros(&[rank, dense.out_dim]),
        component,
    )?;
    store.entry_mut(dense.w).base_frozen = true;
    if let Some(bias) = dense.b {
        store.entry_mut(bias).base_frozen = true;
    }
    dense.lora = Some(LoraAdapter { a, b, rank, alpha });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Component, TrainableMask};
    use crate::trainer::adamw::{AdamW, AdamWConfig};
    use rand::SeedableRng;

    fn setup() -> (ParamStore, ChaCha8Rng, Dense) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = Dense::new(&mut store, &mut rng, "layer", 4, 4, true, Component::VlmBlocks).unwrap();
        (store, rng, d)
    }

    fn run(store: &ParamStore, d: &Dense, x: &Tensor) -> Tensor {
        let mut g = Graph::new(store);
        let xv = g.tape.constant(x.clone());
        let y = d.forward(&mut g, xv).unwrap();
        g.tape.value(y).clone()
    }

    #[test]
    fn zero_init_is_forward_identity() {
        let (mut store, mut rng, mut d) = setup();
        let x = init::normal(&mut rng, &[3, 4], 1.0);
        let before = run(&store, &d, &x);
        wrap_dense(&mut store, &mut rng, &mut d, 2, 4.0).unwrap();
        let after = run(&store, &d, &x);
        assert_eq!(before, after);
    }

    #[test]
    fn rewrapping_is_rejected() {
        let (mut store, mut rng, mut d) = setup();
        wrap_dense(&mut store, &mut rng, &mut d, 2, 4.0).unwrap();
        assert!(matches!(
            wrap_dense(&mut store, &mut rng, &mut d, 2, 4.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trainable_count_grows_by_rank_times_in_plus_out() {
        let (mut store, mut rng, mut d) = setup();
        store.set_trainable(&TrainableMask::of(&[Component::VlmBlocks]));
        let before = store.trainable_scalar_count();
        assert_eq!(before, 4 * 4 + 4);
        wrap_dense(&mut store, &mut rng, &mut d, 3, 6.0).unwrap();
        store.set_trainable(&TrainableMask::of(&[Component::VlmBlocks]));
        // base weight and bias frozen, adapters trainable
        assert_eq!(store.trainable_scalar_count(), 3 * (4 + 4));
        assert!(!store.entry(d.w).trainable);
    }

    #[test]
    fn full_rank_adapter_fits_any_delta() {
        let (mut store, mut rng, mut d) = setup();
        wrap_dense(&mut store, &mut rng, &mut d, 4, 8.0).unwrap();
        store.set_trainable(&TrainableMask::of(&[Component::VlmBlocks]));
        let target_delta = init::normal(&mut rng, &[4, 4], 0.5);
        let lora = d.lora.clone().unwrap();
        let mut opt = AdamW::new(
            AdamWConfig {
                beta1: 0.9,
                beta2: 0.95,
                eps: 1e-8,
                weight_decay: 0.0,
            },
            &store,
        );
        let mut loss_v = f64::INFINITY;
        for step in 0..4000 {
            let mut g = Graph::new(&store);
            let a = g.param(lora.a);
            let b = g.param(lora.b);
            let ab = g.tape.matmul(a, b).unwrap();
            let ab = g.tape.scale(ab, lora.scale());
            let t = g.tape.constant(target_delta.clone());
            let diff = g.tape.sub(ab, t).unwrap();
            let sq = g.tape.mul(diff, diff).unwrap();
            let loss = g.tape.mean(sq);
            loss_v = g.tape.value(loss).item();
            let mut grads = g.tape.backward(loss).unwrap();
            let pg = g.param_grads(&mut grads);
            drop(g);
            let lr = if step < 3000 { 1e-2 } else { 1e-3 };
            opt.step(&mut store, &pg, lr).unwrap();
        }
        assert!(loss_v < 1e-6, "loss {loss_v}");
        // Least-squares oracle: the fitted delta reproduces the target.
        let a = store.value(lora.a).clone();
        let b = store.value(lora.b).clone();
        let mut fitted = vec![0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                for r in 0..4 {
                    fitted[i * 4 + j] += lora.scale() * a.at(i, r) * b.at(r, j);
                }
            }
        }
        let max_err = fitted
            .iter()
            .zip(target_delta.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1e-3, "max err {max_err}");
    }
}
