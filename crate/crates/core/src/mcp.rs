//! Conditioning projector: maps VLM hidden states to the sequence consumed
//! by every cross-attention layer of the generator.
//!
//! Pipeline per prompt, for token length N:
//!
//! 1. fuse the last K layers with temperature-softmax weights,
//! 2. compress `d_vlm -> d_h` followed by LayerNorm,
//! 3. optionally refine along the token axis: depthwise conv, pointwise
//!    mixing, a squeeze-style channel gate and a gated residual,
//! 4. project `d_h -> d_cond` followed by LayerNorm.
//!
//! The token count N is preserved end to end.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{softmax_slice, Tensor, Var, LN_EPS};
use crate::params::{init, Component, Graph, ParamId, ParamStore};

/// Final bias of the channel-gate MLP; sigmoid(-2) ≈ 0.12 keeps the block
/// close to identity at initialization.
pub const GATE_BIAS_INIT: f64 = -2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Uniform,
    Learnable,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Uniform => "uniform",
            FusionMode::Learnable => "learnable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(FusionMode::Uniform),
            "learnable" => Ok(FusionMode::Learnable),
            _ => Err(Error::config(format!("unknown fusion mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McpConfig {
    pub d_vlm: usize,
    pub d_h: usize,
    pub d_cond: usize,
    pub k_layers: usize,
    pub kernel_k: usize,
    pub reduction_r: usize,
    pub tau0: f64,
    pub tau_min: f64,
    pub refine_enabled: bool,
    pub fusion_mode: FusionMode,
}

impl Default for McpConfig {
    fn default() -> Self {
        McpConfig {
            d_vlm: 64,
            d_h: 32,
            d_cond: 48,
            k_layers: 4,
            kernel_k: 3,
            reduction_r: 4,
            tau0: 1.0,
            tau_min: 0.1,
            refine_enabled: true,
            fusion_mode: FusionMode::Learnable,
        }
    }
}

impl McpConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_vlm", self.d_vlm),
            ("d_h", self.d_h),
            ("d_cond", self.d_cond),
            ("k_layers", self.k_layers),
            ("kernel_k", self.kernel_k),
            ("reduction_r", self.reduction_r),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::config(format!("mcp.{name} must be at least 1")));
            }
        }
        if self.kernel_k % 2 == 0 {
            return Err(Error::config(format!("mcp.kernel_k must be odd, got {}", self.kernel_k)));
        }
        if self.d_h % self.reduction_r != 0 {
            return Err(Error::config(format!(
                "mcp.reduction_r={} must divide d_h={}",
                self.reduction_r, self.d_h
            )));
        }
        if !(self.tau_min > 0.0 && self.tau0 >= self.tau_min) {
            return Err(Error::config(format!(
                "need tau0 >= tau_min > 0, got tau0={} tau_min={}",
                self.tau0, self.tau_min
            )));
        }
        Ok(())
    }

    pub fn gate_hidden(&self) -> usize {
        self.d_h / self.reduction_r
    }
}

/// Per-layer VLM hidden states, each N×d_vlm.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStack {
    pub layers: Vec<Tensor>,
}

impl HiddenStack {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Contract("hidden stack has no layers".into()))?;
        for l in &layers {
            if l.shape() != first.shape() {
                return Err(Error::dim("hidden_stack", first.shape(), l.shape()));
            }
        }
        Ok(HiddenStack { layers })
    }

    pub fn token_count(&self) -> usize {
        self.layers[0].rows()
    }
}

/// Projector output `E`: N×d_cond, one row per VLM token.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSequence {
    pub e: Tensor,
    pub token_count: usize,
}

impl ConditioningSequence {
    pub fn new(e: Tensor) -> Self {
        let token_count = e.rows();
        ConditioningSequence { e, token_count }
    }

    pub fn width(&self) -> usize {
        self.e.cols()
    }
}

/// Cosine-annealed fusion temperature; clamps to `tau_min` past the end.
pub fn anneal_temperature(step: usize, total_steps: usize, cfg: &McpConfig) -> f64 {
    if step >= total_steps {
        return cfg.tau_min;
    }
    let frac = step as f64 / total_steps.max(1) as f64;
    // Anchored at τ0 so step 0 returns it bit-exactly.
    cfg.tau0 - 0.5 * (cfg.tau0 - cfg.tau_min) * (1.0 - (PI * frac).cos())
}

/// `H_fuse = Σ α_l H^(l)` over the last K layers, with
/// `α = softmax(w / tau)`.
pub fn fuse_layers(g: &mut Graph, layers: &[Var], w: Var, tau: f64, k: usize) -> Result<Var> {
    if layers.len() < k {
        return Err(Error::config(format!(
            "fusion needs {k} layers but the stack has {}",
            layers.len()
        )));
    }
    if g.tape.value(w).numel() != k {
        return Err(Error::dim("fuse_layers", &[k], g.tape.shape(w)));
    }
    let alpha = g.tape.softmax_temperature(w, tau)?;
    g.tape.weighted_sum(&layers[layers.len() - k..], alpha)
}

/// `LN(H W)`; shared by compression and output projection.
pub fn project_norm(g: &mut Graph, h: Var, w: Var, gain: Var, bias: Var) -> Result<Var> {
    let z = g.tape.matmul(h, w)?;
    g.tape.layer_norm(z, gain, bias, LN_EPS)
}

/// Refinement block parameters.
#[derive(Clone, Debug)]
pub struct RefineParams {
    pub depthwise: ParamId,
    pub pointwise_w: ParamId,
    pub pointwise_b: ParamId,
    pub gate1_w: ParamId,
    pub gate1_b: ParamId,
    pub gate2_w: ParamId,
    pub gate2_b: ParamId,
}

/// `H + g ⊙ r` with `r = pointwise(depthwise(H))` and
/// `g = sigmoid(MLP(mean_tokens(r)))`.
pub fn seq_refine(g: &mut Graph, h: Var, p: &RefineParams) -> Result<Var> {
    let dw = g.param(p.depthwise);
    let r = g.tape.conv1d_depthwise(h, dw)?;
    let pw = g.param(p.pointwise_w);
    let pb = g.param(p.pointwise_b);
    let r = g.tape.conv1d_pointwise(r, pw, pb)?;
    let pooled = g.tape.mean_rows(r);
    let pooled = g.tape.reshape(pooled, &[1, g.tape.value(pooled).numel()])?;
    let w1 = g.param(p.gate1_w);
    let b1 = g.param(p.gate1_b);
    let z = g.tape.matmul(pooled, w1)?;
    let z = g.tape.add_row(z, b1)?;
    let z = g.tape.gelu(z);
    let w2 = g.param(p.gate2_w);
    let b2 = g.param(p.gate2_b);
    let z = g.tape.matmul(z, w2)?;
    let z = g.tape.add_row(z, b2)?;
    let gates = g.tape.sigmoid(z);
    let gated = g.tape.mul_row(r, gates)?;
    g.tape.add(h, gated)
}

/// Learnable state of the projector.
#[derive(Clone, Debug)]
pub struct Mcp {
    pub cfg: McpConfig,
    /// Fusion logits; `None` for uniform fusion (fixed zeros).
    pub fusion_w: Option<ParamId>,
    pub w_c: ParamId,
    pub ln_c_gain: ParamId,
    pub ln_c_bias: ParamId,
    pub refine: Option<RefineParams>,
    pub w_o: ParamId,
    pub ln_o_gain: ParamId,
    pub ln_o_bias: ParamId,
}

impl Mcp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: McpConfig) -> Result<Self> {
        cfg.validate()?;
        let c = Component::Mcp;
        let fusion_w = match cfg.fusion_mode {
            FusionMode::Learnable => Some(store.add("mcp.fusion_w", Tensor::zeros(&[cfg.k_layers]), c)?),
            FusionMode::Uniform => None,
        };
        let w_c = store.add(
            "mcp.compress.w",
            init::scaled_uniform(rng, &[cfg.d_vlm, cfg.d_h], cfg.d_vlm),
            c,
        )?;
        let ln_c_gain = store.add("mcp.compress.ln.gain", Tensor::full(&[cfg.d_h], 1.0), c)?;
        let ln_c_bias = store.add("mcp.compress.ln.bias", Tensor::zeros(&[cfg.d_h]), c)?;
        let refine = if cfg.refine_enabled {
            let dh = cfg.d_h;
            let hid = cfg.gate_hidden();
            Some(RefineParams {
                depthwise: store.add("mcp.refine.depthwise", init::delta_kernels(dh, cfg.kernel_k), c)?,
                pointwise_w: store.add("mcp.refine.pointwise.w", init::scaled_uniform(rng, &[dh, dh], dh), c)?,
                pointwise_b: store.add("mcp.refine.pointwise.b", Tensor::zeros(&[dh]), c)?,
                gate1_w: store.add("mcp.refine.gate1.w", init::scaled_uniform(rng, &[dh, hid], dh), c)?,
                gate1_b: store.add("mcp.refine.gate1.b", Tensor::zeros(&[hid]), c)?,
                gate2_w: store.add("mcp.refine.gate2.w", init::scaled_uniform(rng, &[hid, dh], hid), c)?,
                gate2_b: store.add("mcp.refine.gate2.b", Tensor::full(&[dh], GATE_BIAS_INIT), c)?,
            })
        } else {
            None
        };
        let w_o = store.add(
            "mcp.project.w",
            init::scaled_uniform(rng, &[cfg.d_h, cfg.d_cond], cfg.d_h),
            c,
        )?;
        let ln_o_gain = store.add("mcp.project.ln.gain", Tensor::full(&[cfg.d_cond], 1.0), c)?;
        let ln_o_bias = store.add("mcp.project.ln.bias", Tensor::zeros(&[cfg.d_cond]), c)?;
        Ok(Mcp {
            cfg,
            fusion_w,
            w_c,
            ln_c_gain,
            ln_c_bias,
            refine,
            w_o,
            ln_o_gain,
            ln_o_bias,
        })
    }

    /// Full projector on the tape: fuse, compress, refine, project.
    pub fn forward(&self, g: &mut Graph, layers: &[Var], tau: f64) -> Result<Var> {
        let w = match self.fusion_w {
            Some(id) => g.param(id),
            None => g.tape.constant(Tensor::zeros(&[self.cfg.k_layers])),
        };
        let fused = fuse_layers(g, layers, w, tau, self.cfg.k_layers)?;
        let (wc, gc, bc) = (g.param(self.w_c), g.param(self.ln_c_gain), g.param(self.ln_c_bias));
        let mut h = project_norm(g, fused, wc, gc, bc)?;
        if let Some(r) = &self.refine {
            h = seq_refine(g, h, r)?;
        }
        let (wo, go, bo) = (g.param(self.w_o), g.param(self.ln_o_gain), g.param(self.ln_o_bias));
        project_norm(g, h, wo, go, bo)
    }

    /// Forward on concrete tensors, without gradients.
    pub fn forward_stack(&self, store: &ParamStore, stack: &HiddenStack, tau: f64) -> Result<ConditioningSequence> {
        let mut g = Graph::new(store);
        let layers: Vec<Var> = stack.layers.iter().map(|l| g.tape.leaf_ref(l, false)).collect();
        let e = self.forward(&mut g, &layers, tau)?;
        Ok(ConditioningSequence::new(g.tape.value(e).clone()))
    }

    /// Layer mixing weights at temperature `tau`, oldest layer first.
    pub fn fusion_weights(&self, store: &ParamStore, tau: f64) -> Vec<f64> {
        match self.fusion_w {
            Some(w) => softmax_slice(store.value(w).data(), tau),
            None => vec![1.0 / self.cfg.k_layers as f64; self.cfg.k_layers],
        }
    }
}

/// Reference connector: two dense layers `d_vlm -> 4 d_vlm -> d_cond` with
/// GELU, reading only the last VLM layer.
#[derive(Clone, Debug)]
pub struct MlpConnector {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl MlpConnector {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d_vlm: usize, d_cond: usize) -> Result<Self> {
        let c = Component::Mcp;
        let hid = 4 * d_vlm;
        Ok(MlpConnector {
            fc1_w: store.add("connector.fc1.w", init::scaled_uniform(rng, &[d_vlm, hid], d_vlm), c)?,
            fc1_b: store.add("connector.fc1.b", Tensor::zeros(&[hid]), c)?,
            fc2_w: store.add("connector.fc2.w", init::scaled_uniform(rng, &[hid, d_cond], hid), c)?,
            fc2_b: store.add("connector.fc2.b", Tensor::zeros(&[d_cond]), c)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, layers: &[Var]) -> Result<Var> {
        let last = *layers
            .last()
            .ok_or_else(|| Error::Contract("connector needs at least one layer".into()))?;
        let (w1, b1) = (g.param(self.fc1_w), g.param(self.fc1_b));
        let h = g.tape.matmul(last, w1)?;
        let h = g.tape.add_row(h, b1)?;
        let h = g.tape.gelu(h);
        let (w2, b2) = (g.param(self.fc2_w), g.param(self.fc2_b));
        let h = g.tape.matmul(h, w2)?;
        g.tape.add_row(h, b2)
    }
}

/// Closed-form learnable scalar count of the projector.
pub fn param_count(cfg: &McpConfig) -> usize {
    let fusion = match cfg.fusion_mode {
        FusionMode::Learnable => cfg.k_layers,
        FusionMode::Uniform => 0,
    };
    let compress = cfg.d_vlm * cfg.d_h + 2 * cfg.d_h;
    let refine = if cfg.refine_enabled {
        refine_param_count(cfg)
    } else {
        0
    };
    let project = cfg.d_h * cfg.d_cond + 2 * cfg.d_cond;
    fusion + compress + refine + project
}

/// Scalars added by the refinement block: depthwise kernels, pointwise
/// weight and bias, and the two-layer gate MLP with biases.
pub fn refine_param_count(cfg: &McpConfig) -> usize {
    let dh = cfg.d_h;
    let hid = cfg.gate_hidden();
    dh * cfg.kernel_k + dh * dh + dh + 2 * (dh * hid) + hid + dh
}

pub fn mlp_connector_param_count(d_vlm: usize, d_cond: usize) -> usize {
    let hid = 4 * d_vlm;
    d_vlm * hid + hid + hid * d_cond + d_cond
}

/// Multiply-add FLOP accounting (2 FLOPs per multiply-accumulate).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub tokens: usize,
    pub compress_per_token: u64,
    pub depthwise_per_token: u64,
    pub pointwise_per_token: u64,
    pub project_per_token: u64,
    /// Per-token cost excluding the once-per-sequence gate MLP.
    pub per_token: u64,
    /// Channel-gate MLP, run once per sequence on the pooled vector.
    pub gate_once: u64,
    pub total: u64,
    pub reference_mlp_per_token: u64,
    pub reference_mlp_total: u64,
}

impl FlopReport {
    /// Per-token cost with the gate MLP amortized over the sequence.
    pub fn amortized_per_token(&self) -> f64 {
        self.total as f64 / self.tokens.max(1) as f64
    }
}

pub fn flop_estimate(n: usize, cfg: &McpConfig) -> FlopReport {
    let (dv, dh, dc, k) = (cfg.d_vlm as u64, cfg.d_h as u64, cfg.d_cond as u64, cfg.kernel_k as u64);
    let compress = 2 * dv * dh;
    let project = 2 * dh * dc;
    let (depthwise, pointwise, gate) = if cfg.refine_enabled {
        let hid = cfg.gate_hidden() as u64;
        (2 * k * dh, 2 * dh * dh, 2 * dh * hid + 2 * hid * dh)
    } else {
        (0, 0, 0)
    };
    let per_token = compress + depthwise + pointwise + project;
    let reference = 2 * dv * (4 * dv) + 2 * (4 * dv) * dc;
    FlopReport {
        tokens: n,
        compress_per_token: compress,
        depthwise_per_token: depthwise,
        pointwise_per_token: pointwise,
        project_per_token: project,
        per_token,
        gate_once: gate,
        total: n as u64 * per_token + gate,
        reference_mlp_per_token: reference,
        reference_mlp_total: n as u64 * reference,
    }
}
