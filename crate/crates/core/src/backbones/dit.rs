//! Small diffusion transformer predicting a velocity over latent tokens.
//! The conditioning sequence enters only as cross-attention keys/values.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;

use super::layers::{Attention, Dense, LayerNorm, Mlp};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::params::{init, Component, Graph, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct DitConfig {
    pub tokens: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub d_cond: usize,
    pub mlp_hidden: usize,
    /// Number of sinusoid frequencies; the σ embedding has twice this many features.
    pub sigma_freqs: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            tokens: 16,
            latent_dim: 48,
            width: 48,
            blocks: 2,
            d_cond: 48,
            mlp_hidden: 96,
            sigma_freqs: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DitBlock {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct ToyDit {
    pub cfg: DitConfig,
    pub in_proj: Dense,
    pub pos_embed: ParamId,
    pub sigma_mlp: Mlp,
    pub blocks: Vec<DitBlock>,
    pub ln_out: LayerNorm,
    pub out_proj: Dense,
}

/// `[sin(2^i π σ), cos(2^i π σ)]` for `i < freqs`.
pub fn sigma_features(sigma: f64, freqs: usize) -> Tensor {
    let mut f = Vec::with_capacity(2 * freqs);
    for i in 0..freqs {
        let a = (1u64 << i) as f64 * PI * sigma;
        f.push(a.sin());
        f.push(a.cos());
    }
    Tensor::new(vec![1, 2 * freqs], f).expect("shape matches")
}

impl ToyDit {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: DitConfig) -> Result<Self> {
        if cfg.tokens == 0 || cfg.width < 2 || cfg.blocks == 0 || cfg.d_cond == 0 {
            return Err(Error::config(format!("invalid DiT config {cfg:?}")));
        }
        let c = Component::Dit;
        let w = cfg.width;
        let in_proj = Dense::new(store, rng, "dit.in_proj", cfg.latent_dim, w, true, c)?;
        let pos_embed = store.add("dit.pos_embed", init::normal(rng, &[cfg.tokens, w], 0.5), c)?;
        let sigma_mlp = Mlp::new(store, rng, "dit.sigma", 2 * cfg.sigma_freqs, w, w, c)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let p = format!("dit.block{b}");
            blocks.push(DitBlock {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), w, c)?,
                self_attn: Attention::new(store, rng, &format!("{p}.self_attn"), w, w, c)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), w, c)?,
                cross_attn: Attention::new(store, rng, &format!("{p}.cross_attn"), w, cfg.d_cond, c)?,
                ln3: LayerNorm::new(store, &format!("{p}.ln3"), w, c)?,
                mlp: Mlp::new(store, rng, &format!("{p}.mlp"), w, cfg.mlp_hidden, w, c)?,
            });
        }
        let ln_out = LayerNorm::new(store, "dit.ln_out", w, c)?;
        let out_proj = Dense::new(store, rng, "dit.out_proj", w, cfg.latent_dim, true, c)?;
        Ok(ToyDit {
            cfg,
            in_proj,
            pos_embed,
            sigma_mlp,
            blocks,
            ln_out,
            out_proj,
        })
    }

    /// `v(x_σ, σ, E) = x_σ − F((1 − σ) x_σ, σ, E)` with `F` the block stack.
    /// The skip makes `F` a clean-latent predictor near σ = 1, and the input
    /// scale removes the pure-noise input there, so the residual stream is
    /// free to carry the conditioning.
    pub fn forward(&self, g: &mut Graph, x_sigma: Var, sigma: f64, cond: Var) -> Result<Var> {
        let xs = g.tape.shape(x_sigma).to_vec();
        if xs.len() != 2 || xs[1] != self.cfg.latent_dim || xs[0] > self.cfg.tokens {
            return Err(Error::dim("dit_velocity", &[self.cfg.tokens, self.cfg.latent_dim], &xs));
        }
        if g.tape.value(cond).cols() != self.cfg.d_cond {
            return Err(Error::dim("dit_cond", &[self.cfg.d_cond], g.tape.shape(cond)));
        }
        let xin = g.tape.scale(x_sigma, 1.0 - sigma);
        let h = self.in_proj.forward(g, xin)?;
        let pos = g.param(self.pos_embed);
        let pos = g.tape.slice_rows(pos, 0, xs[0])?;
        let h = g.tape.add(h, pos)?;
        let feats = g.tape.constant(sigma_features(sigma, self.cfg.sigma_freqs));
        let s = self.sigma_mlp.forward(g, feats)?;
        let mut h = g.tape.add_row(h, s)?;
        for b in &self.blocks {
            let z = b.ln1.forward(g, h)?;
            let z = b.self_attn.forward(g, z, z, false)?;
            h = g.tape.add(h, z)?;
            let z = b.ln2.forward(g, h)?;
            let z = b.cross_attn.forward(g, z, cond, false)?;
            h = g.tape.add(h, z)?;
            let z = b.ln3.forward(g, h)?;
            let z = b.mlp.forward(g, z)?;
            h = g.tape.add(h, z)?;
        }
        let h = self.ln_out.forward(g, h)?;
        let out = self.out_proj.forward(g, h)?;
        g.tape.sub(x_sigma, out)
    }

    /// Concrete velocity without gradients.
    pub fn velocity(&self, store: &ParamStore, x_sigma: &Tensor, sigma: f64, cond: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let x = g.tape.leaf_ref(x_sigma, false);
        let c = g.tape.leaf_ref(cond, false);
        let v = self.forward(&mut g, x, sigma, c)?;
        Ok(g.tape.value(v).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ErrorAccumulator;
    use crate::params::TrainableMask;
    use rand::SeedableRng;

    fn small() -> (ParamStore, ToyDit) {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let cfg = DitConfig {
            tokens: 16,
            latent_dim: 6,
            width: 8,
            blocks: 1,
            d_cond: 5,
            mlp_hidden: 12,
            sigma_freqs: 3,
        };
        let d = ToyDit::new(&mut s, &mut rng, cfg).unwrap();
        s.set_trainable(&TrainableMask::of(&[Component::Dit]));
        (s, d)
    }

    #[test]
    fn shape_and_dependence_on_every_input() {
        let (s, d) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [4, 16] {
            let x = init::normal(&mut rng, &[n, 6], 1.0);
            let c = init::normal(&mut rng, &[7, 5], 1.0);
            let v = d.velocity(&s, &x, 0.3, &c).unwrap();
            assert_eq!(v.shape(), x.shape());
            let c2 = c.map(|z| z + 0.5 * z.sin());
            assert!(d.velocity(&s, &x, 0.3, &c2).unwrap().max_abs_diff(&v) > 1e-6);
            let x2 = x.map(|z| z * 0.7);
            assert!(d.velocity(&s, &x2, 0.3, &c).unwrap().max_abs_diff(&v) > 1e-6);
            assert!(d.velocity(&s, &x, 0.8, &c).unwrap().max_abs_diff(&v) > 1e-6);
        }
        let bad = init::normal(&mut rng, &[3, 4], 1.0);
        let x = init::normal(&mut rng, &[4, 6], 1.0);
        assert!(matches!(d.velocity(&s, &x, 0.3, &bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn block_gradient_check() {
        let (mut s, d) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = init::normal(&mut rng, &[4, 6], 1.0);
        let c = init::normal(&mut rng, &[3, 5], 1.0);
        let loss = |store: &ParamStore, grad: bool| {
            let mut g = Graph::new(store);
            let xv = g.tape.constant(x.clone());
            let cv = g.tape.leaf(c.clone(), true);
            let v = d.forward(&mut g, xv, 0.4, cv).unwrap();
            let sq = g.tape.mul(v, v).unwrap();
            let l = g.tape.mean(sq);
            let lv = g.tape.value(l).item();
            if grad {
                let mut gr = g.tape.backward(l).unwrap();
                let cg = gr.take(cv).unwrap();
                (lv, g.param_grads(&mut gr), Some(cg))
            } else {
                (lv, vec![], None)
            }
        };
        let (_, grads, _) = loss(&s, true);
        let mut acc = ErrorAccumulator::new(1e-4);
        let h = 1e-5;
        for (id, gt) in &grads {
            // A strided subset keeps the check fast while touching every tensor.
            for i in (0..gt.numel()).step_by(3) {
                let o = s.value(*id).data()[i];
                s.value_mut(*id).data_mut()[i] = o + h;
                let lp = loss(&s, false).0;
                s.value_mut(*id).data_mut()[i] = o - h;
                let lm = loss(&s, false).0;
                s.value_mut(*id).data_mut()[i] = o;
                acc.push(gt.data()[i], (lp - lm) / (2.0 * h));
            }
        }
        let r = acc.finish();
        assert!(r.passed, "{r:?}");
    }
}
