//! Toy backbones around the projector: a causal VLM, a cross-attention DiT,
//! a fixed latent codec, and the [`ModelSet`] tying them to one parameter
//! store.

pub mod codec;
pub mod dit;
pub mod layers;
pub mod lora;
pub mod vlm;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use codec::{CodecConfig, ToyCodec};
pub use dit::{DitConfig, ToyDit};
pub use lora::{LoraAdapter, DEFAULT_ALPHA, DEFAULT_RANK};
pub use vlm::{ToyVlm, VlmConfig, VlmOutput};

use crate::error::{Error, Result};
use crate::mcp::{param_count, Mcp, McpConfig, MlpConnector};
use crate::numerics::Var;
use crate::params::{Graph, ParamStore, TrainableMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConnectorKind {
    Mcp,
    Mlp,
}

impl ConnectorKind {
    pub fn name(self) -> &'static str {
        match self {
            ConnectorKind::Mcp => "mcp",
            ConnectorKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mcp" => Ok(ConnectorKind::Mcp),
            "mlp" => Ok(ConnectorKind::Mlp),
            _ => Err(Error::config(format!("unknown connector `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Connector {
    Mcp(Mcp),
    Mlp(MlpConnector),
}

impl Connector {
    pub fn forward(&self, g: &mut Graph, layers: &[Var], tau: f64) -> Result<Var> {
        match self {
            Connector::Mcp(m) => m.forward(g, layers, tau),
            Connector::Mlp(m) => m.forward(g, layers),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vlm: VlmConfig,
    pub dit: DitConfig,
    pub mcp: McpConfig,
    pub codec: CodecConfig,
    pub connector: ConnectorKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vlm: VlmConfig::default(),
            dit: DitConfig::default(),
            mcp: McpConfig::default(),
            codec: CodecConfig::default(),
            connector: ConnectorKind::Mcp,
        }
    }
}

impl ModelConfig {
    /// Cross-module width agreement.
    pub fn validate(&self) -> Result<()> {
        self.vlm.validate()?;
        self.mcp.validate()?;
        self.codec.validate()?;
        let pairs = [
            ("mcp.d_vlm vs vlm.d_vlm", self.mcp.d_vlm, self.vlm.d_vlm),
            ("mcp.d_cond vs dit.d_cond", self.mcp.d_cond, self.dit.d_cond),
            ("codec latent vs dit.latent_dim", self.codec.latent_dim(), self.dit.latent_dim),
            ("codec latent vs vlm.latent_dim", self.codec.latent_dim(), self.vlm.latent_dim),
            ("codec tokens vs dit.tokens", self.codec.tokens(), self.dit.tokens),
        ];
        for (what, a, b) in pairs {
            if a != b {
                return Err(Error::config(format!("{what}: {a} != {b}")));
            }
        }
        if self.connector == ConnectorKind::Mcp && self.mcp.k_layers > self.vlm.n_layers {
            return Err(Error::config(format!(
                "mcp.k_layers={} exceeds vlm.n_layers={}",
                self.mcp.k_layers, self.vlm.n_layers
            )));
        }
        Ok(())
    }

    pub fn connector_param_count(&self) -> usize {
        match self.connector {
            ConnectorKind::Mcp => param_count(&self.mcp),
            ConnectorKind::Mlp => crate::mcp::mlp_connector_param_count(self.vlm.d_vlm, self.dit.d_cond),
        }
    }
}

/// Low-rank adaptation state of the VLM blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

/// Every model component plus the parameter store they share.
#[derive(Clone, Debug)]
pub struct ModelSet {
    pub cfg: ModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub vlm: ToyVlm,
    pub connector: Connector,
    pub dit: ToyDit,
    pub codec: ToyCodec,
    pub lora: Option<LoraSpec>,
}

impl ModelSet {
    /// Deterministic construction: the parameters depend only on `(cfg, seed)`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vlm = ToyVlm::new(&mut store, &mut rng, cfg.vlm.clone())?;
        // Separate streams keep the VLM identical across connector and DiT variants.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
        let connector = match cfg.connector {
            ConnectorKind::Mcp => Connector::Mcp(Mcp::new(&mut store, &mut rng, cfg.mcp.clone())?),
            ConnectorKind::Mlp => Connector::Mlp(MlpConnector::new(&mut store, &mut rng, cfg.vlm.d_vlm, cfg.dit.d_cond)?),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03);
        let dit = ToyDit::new(&mut store, &mut rng, cfg.dit.clone())?;
        let codec = ToyCodec::new(&mut store, cfg.codec.clone())?;
        Ok(ModelSet {
            cfg,
            seed,
            store,
            vlm,
            connector,
            dit,
            codec,
            lora: None,
        })
    }

    pub fn set_trainable(&mut self, mask: &TrainableMask) {
        self.store.set_trainable(mask);
    }

    /// Wraps every dense layer inside the VLM blocks with an adapter.
    pub fn apply_lora(&mut self, spec: LoraSpec) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::config("the VLM blocks already carry adapters"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x4C6F_5241);
        for d in self.vlm.block_denses_mut() {
            lora::wrap_dense(&mut self.store, &mut rng, d, spec.rank, spec.alpha)?;
        }
        self.lora = Some(spec);
        Ok(())
    }

    /// Conditioning sequence for a text prompt on an existing tape.
    pub fn condition(&self, g: &mut Graph, prompt: &[usize], tau: f64) -> Result<Var> {
        let out = self.vlm.forward(g, prompt, None, false)?;
        self.connector.forward(g, &out.layers, tau)
    }

    pub fn mcp(&self) -> Option<&Mcp> {
        match &self.connector {
            Connector::Mcp(m) => Some(m),
            Connector::Mlp(_) => None,
        }
    }
}
