//! Building blocks shared by the toy VLM and DiT.

use rand_chacha::ChaCha8Rng;

use super::lora::LoraAdapter;
use crate::error::Result;
use crate::numerics::{Tensor, Var, LN_EPS};
use crate::params::{init, Component, Graph, ParamId, ParamStore};

/// Affine dense layer `x W + b`, optionally wrapped by a low-rank adapter.
#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub lora: Option<LoraAdapter>,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        component: Component,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            init::scaled_uniform(rng, &[in_dim, out_dim], in_dim),
            component,
        )?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]), component)?)
        } else {
            None
        };
        Ok(Dense {
            name: name.to_string(),
            w,
            b,
            in_dim,
            out_dim,
            lora: None,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let mut y = g.tape.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = g.param(b);
            y = g.tape.add_row(y, b)?;
        }
        if let Some(lora) = &self.lora {
            let delta = lora.forward(g, x)?;
            y = g.tape.add(y, delta)?;
        }
        Ok(y)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w];
        ids.extend(self.b);
        if let Some(l) = &self.lora {
            ids.extend([l.a, l.b]);
        }
        ids
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, component: Component) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), component)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), component)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.tape.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Single-head attention. Keys and values may come from a different
/// sequence (cross-attention) of a different width.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
    pub width: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        kv_dim: usize,
        component: Component,
    ) -> Result<Self> {
        Ok(Attention {
            q: Dense::new(store, rng, &format!("{name}.q"), width, width, false, component)?,
            k: Dense::new(store, rng, &format!("{name}.k"), kv_dim, width, false, component)?,
            v: Dense::new(store, rng, &format!("{name}.v"), kv_dim, width, false, component)?,
            o: Dense::new(store, rng, &format!("{name}.o"), width, width, true, component)?,
            width,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, context: Var, causal: bool) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let scores = g.tape.matmul_bt(q, k)?;
        let scores = g.tape.scale(scores, 1.0 / (self.width as f64).sqrt());
        let probs = g.tape.softmax_rows(scores, causal)?;
        let mixed = g.tape.matmul(probs, v)?;
        self.o.forward(g, mixed)
    }

    pub fn denses_mut(&mut self) -> [&mut Dense; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        component: Component,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Dense::new(store, rng, &format!("{name}.fc1"), dim, hidden, true, component)?,
            fc2: Dense::new(store, rng, &format!("{name}.fc2"), hidden, out, true, component)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.gelu(h);
        self.fc2.forward(g, h)
    }
}
