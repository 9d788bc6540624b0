//! Small causal vision-language transformer. Image latent tokens are
//! embedded and prepended to the text tokens; every block output is exposed
//! as a hidden state for the projector.

use rand_chacha::ChaCha8Rng;

use super::layers::{Attention, Dense, LayerNorm, Mlp};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::params::{init, Component, Graph, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct VlmConfig {
    pub vocab: usize,
    pub d_vlm: usize,
    pub n_layers: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
    pub latent_dim: usize,
}

impl Default for VlmConfig {
    fn default() -> Self {
        VlmConfig {
            vocab: 64,
            d_vlm: 64,
            n_layers: 6,
            mlp_hidden: 128,
            max_len: 64,
            latent_dim: 48,
        }
    }
}

impl VlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_vlm < 2 || self.n_layers == 0 || self.max_len == 0 {
            return Err(Error::config(format!("invalid VLM config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VlmBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct ToyVlm {
    pub cfg: VlmConfig,
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub image_embed: Dense,
    pub blocks: Vec<VlmBlock>,
    pub ln_f: LayerNorm,
    pub lm_head: Dense,
}

/// Tape handles from one forward pass.
pub struct VlmOutput {
    /// One N×d_vlm state per block, in depth order.
    pub layers: Vec<Var>,
    /// Logits over the text positions only (T×vocab), when requested.
    pub logits: Option<Var>,
    pub image_tokens: usize,
}

impl ToyVlm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: VlmConfig) -> Result<Self> {
        cfg.validate()?;
        let c = Component::VlmBlocks;
        let d = cfg.d_vlm;
        let tok_embed = store.add("vlm.tok_embed", init::normal(rng, &[cfg.vocab, d], 1.0), c)?;
        let pos_embed = store.add("vlm.pos_embed", init::normal(rng, &[cfg.max_len, d], 0.1), c)?;
        let image_embed = Dense::new(store, rng, "vlm.image_embed", cfg.latent_dim, d, true, Component::VisionEmbed)?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("vlm.block{l}");
            blocks.push(VlmBlock {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d, c)?,
                attn: Attention::new(store, rng, &format!("{p}.attn"), d, d, c)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d, c)?,
                mlp: Mlp::new(store, rng, &format!("{p}.mlp"), d, cfg.mlp_hidden, d, c)?,
            });
        }
        let ln_f = LayerNorm::new(store, "vlm.ln_f", d, c)?;
        let lm_head = Dense::new(store, rng, "vlm.lm_head", d, cfg.vocab, true, Component::LmHead)?;
        Ok(ToyVlm {
            cfg,
            tok_embed,
            pos_embed,
            image_embed,
            blocks,
            ln_f,
            lm_head,
        })
    }

    /// Causal forward over `[image tokens; text tokens]`.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize], image: Option<Var>, with_logits: bool) -> Result<VlmOutput> {
        if tokens.is_empty() {
            return Err(Error::Contract("VLM input has no text tokens".into()));
        }
        let text = g.param(self.tok_embed);
        let text = g.tape.gather(text, tokens)?;
        let (x, image_tokens) = match image {
            Some(img) => {
                let n_img = g.tape.value(img).rows();
                let e = self.image_embed.forward(g, img)?;
                (g.tape.concat_rows(&[e, text])?, n_img)
            }
            None => (text, 0),
        };
        let n = image_tokens + tokens.len();
        if n > self.cfg.max_len {
            return Err(Error::Index {
                op: "vlm_forward",
                index: n,
                size: self.cfg.max_len,
            });
        }
        let pos = g.param(self.pos_embed);
        let pos = g.tape.slice_rows(pos, 0, n)?;
        let mut x = g.tape.add(x, pos)?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h = b.ln1.forward(g, x)?;
            let h = b.attn.forward(g, h, h, true)?;
            x = g.tape.add(x, h)?;
            let h = b.ln2.forward(g, x)?;
            let h = b.mlp.forward(g, h)?;
            x = g.tape.add(x, h)?;
            layers.push(x);
        }
        let logits = if with_logits {
            let h = g.tape.slice_rows(x, image_tokens, tokens.len())?;
            let h = self.ln_f.forward(g, h)?;
            Some(self.lm_head.forward(g, h)?)
        } else {
            None
        };
        Ok(VlmOutput {
            layers,
            logits,
            image_tokens,
        })
    }

    /// Dense layers inside the transformer blocks (adapter targets).
    pub fn block_denses_mut(&mut self) -> Vec<&mut Dense> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            let [q, k, v, o] = b.attn.denses_mut();
            out.extend([q, k, v, o]);
            out.push(&mut b.mlp.fc1);
            out.push(&mut b.mlp.fc2);
        }
        out
    }

    /// Concrete hidden states of a text-only pass.
    pub fn hidden_states(&self, store: &ParamStore, tokens: &[usize]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, tokens, None, false)?;
        Ok(out.layers.iter().map(|&v| g.tape.value(v).clone()).collect())
    }

    /// Concrete text logits.
    pub fn logits(&self, store: &ParamStore, tokens: &[usize], image: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let img = image.map(|t| g.tape.leaf_ref(t, false));
        let out = self.forward(&mut g, tokens, img, true)?;
        Ok(g.tape.value(out.logits.expect("requested")).clone())
    }
}
