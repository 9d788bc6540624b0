//! Flat key–value training configuration.
//!
//! Every key is a dotted path whose value is a TOML scalar or list, e.g.
//!
//! ```text
//! seed = 7
//! pipeline.stages = ["pretrain", "align", "sft", "unified"]
//! mcp.k_layers = 4
//! stage.align.lr0 = 0.0002
//! ```
//!
//! Unset keys keep their defaults. [`TrainConfig::echo`] writes every key,
//! and parsing an echo reproduces the configuration exactly.
//!
//! | key | meaning |
//! |---|---|
//! | `seed` | model init, data and noise streams |
//! | `pipeline.stages` | stage order; any of `pretrain`, `align`, `sft`, `unified` |
//! | `model.connector` | `mcp` or `mlp` |
//! | `model.d_cond` | DiT conditioning width, shared with the projector output |
//! | `vlm.{vocab,d_vlm,n_layers,mlp_hidden,max_len}` | language backbone |
//! | `dit.{width,blocks,mlp_hidden,sigma_freqs}` | denoiser |
//! | `codec.{height,width,channels,patch}` | image grid and latent patching |
//! | `mcp.{d_h,k_layers,kernel_k,reduction_r,tau0,tau_min,refine,fusion}` | projector |
//! | `loss.{lambda_lang,lambda_diff,w_sigma}` | objective weights |
//! | `stage.<name>.{dataset_size,epochs,batch_size,lr0,lr_min,warmup_ratio}` | stage budget and schedule |
//! | `stage.<name>.clip` | gradient-norm bound, `0` disables |
//! | `stage.<name>.mask` | trainable components |
//! | `stage.<name>.lora_rank`, `stage.<name>.lora_alpha` | adapters; rank `0` means none |
//! | `stage.<name>.loss` | `diff`, `lang` or `unified` |
//! | `eval.{prompts_per_category,qa_items,seed,sampler_steps}` | evaluation suite |
//! | `eval.after` | stages followed by an evaluation |

use std::fmt::Write as _;
use std::path::Path;

use toml::Value;

use super::stage::{LossMode, StageName, StageSpec};
use crate::backbones::{ConnectorKind, LoraSpec, ModelConfig, VlmConfig};
use crate::datagen::eval::DEFAULT_PROMPTS_PER_CATEGORY;
use crate::datagen::text::Vocab;
use crate::error::{Error, Result};
use crate::mcp::FusionMode;
use crate::objectives::{LossWeights, SigmaWeighting};
use crate::params::TrainableMask;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub prompts_per_category: usize,
    pub qa_items: usize,
    pub seed: u64,
    pub sampler_steps: usize,
    pub after: Vec<StageName>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            prompts_per_category: DEFAULT_PROMPTS_PER_CATEGORY,
            qa_items: 400,
            seed: 1234,
            sampler_steps: 20,
            after: vec![StageName::Sft, StageName::Unified],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    /// Executed in order.
    pub stages: Vec<StageSpec>,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            model: ModelConfig {
                vlm: VlmConfig {
                    vocab: Vocab::standard().len(),
                    ..Default::default()
                },
                ..Default::default()
            },
            loss: LossWeights::default(),
            stages: StageName::ALL.into_iter().map(StageSpec::preset).collect(),
            eval: EvalConfig::default(),
        }
    }
}

fn bad(key: &str, want: &str, v: &Value) -> Error {
    Error::config(format!("`{key}` expects {want}, got `{v}`"))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_integer()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| bad(key, "a non-negative integer", v))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_integer()
        .and_then(|i| u64::try_from(i).ok())
        .ok_or_else(|| bad(key, "a non-negative integer", v))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, "a number", v)),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| bad(key, "true or false", v))
}

fn as_str<'v>(key: &str, v: &'v Value) -> Result<&'v str> {
    v.as_str().ok_or_else(|| bad(key, "a string", v))
}

fn as_strs(key: &str, v: &Value) -> Result<Vec<String>> {
    v.as_array()
        .ok_or_else(|| bad(key, "a list of strings", v))?
        .iter()
        .map(|x| as_str(key, x).map(str::to_string))
        .collect()
}

fn strs<S: AsRef<str>>(items: &[S]) -> Value {
    Value::Array(items.iter().map(|s| Value::String(s.as_ref().to_string())).collect())
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

fn loss_mode_name(m: LossMode) -> &'static str {
    match m {
        LossMode::DiffOnly => "diff",
        LossMode::LangOnly => "lang",
        LossMode::Unified => "unified",
    }
}

fn parse_loss_mode(key: &str, v: &Value) -> Result<LossMode> {
    match as_str(key, v)? {
        "diff" => Ok(LossMode::DiffOnly),
        "lang" => Ok(LossMode::LangOnly),
        "unified" => Ok(LossMode::Unified),
        other => Err(Error::config(format!("`{key}`: unknown loss `{other}`"))),
    }
}

/// Flattens nested tables into dotted keys.
fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

impl TrainConfig {
    pub fn stage(&self, name: StageName) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn stage_mut(&mut self, name: StageName) -> Option<&mut StageSpec> {
        self.stages.iter_mut().find(|s| s.name == name)
    }

    /// Copies shared widths into the sub-configs that repeat them.
    fn sync(&mut self) {
        let m = &mut self.model;
        let latent = m.codec.latent_dim();
        m.vlm.latent_dim = latent;
        m.dit.latent_dim = latent;
        m.dit.tokens = m.codec.tokens();
        m.mcp.d_vlm = m.vlm.d_vlm;
        m.mcp.d_cond = m.dit.d_cond;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.model.vlm.vocab < Vocab::standard().len() {
            return Err(Error::config(format!(
                "vlm.vocab={} is smaller than the caption vocabulary ({})",
                self.model.vlm.vocab,
                Vocab::standard().len()
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate()?;
            if self.stages[..i].iter().any(|p| p.name == s.name) {
                return Err(Error::config(format!("stage `{}` listed twice", s.name.name())));
            }
        }
        for a in &self.eval.after {
            if self.stage(*a).is_none() {
                return Err(Error::config(format!("eval.after names absent stage `{}`", a.name())));
            }
        }
        if self.eval.sampler_steps == 0 {
            return Err(Error::config("eval.sampler_steps must be at least 1"));
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(String, Value)> {
        let m = &self.model;
        let mut e: Vec<(String, Value)> = vec![
            ("seed".into(), Value::Integer(self.seed as i64)),
            (
                "pipeline.stages".into(),
                strs(&self.stages.iter().map(|s| s.name.name()).collect::<Vec<_>>()),
            ),
            ("model.connector".into(), Value::String(m.connector.name().into())),
            ("model.d_cond".into(), int(m.dit.d_cond)),
            ("vlm.vocab".into(), int(m.vlm.vocab)),
            ("vlm.d_vlm".into(), int(m.vlm.d_vlm)),
            ("vlm.n_layers".into(), int(m.vlm.n_layers)),
            ("vlm.mlp_hidden".into(), int(m.vlm.mlp_hidden)),
            ("vlm.max_len".into(), int(m.vlm.max_len)),
            ("dit.width".into(), int(m.dit.width)),
            ("dit.blocks".into(), int(m.dit.blocks)),
            ("dit.mlp_hidden".into(), int(m.dit.mlp_hidden)),
            ("dit.sigma_freqs".into(), int(m.dit.sigma_freqs)),
            ("codec.height".into(), int(m.codec.height)),
            ("codec.width".into(), int(m.codec.width)),
            ("codec.channels".into(), int(m.codec.channels)),
            ("codec.patch".into(), int(m.codec.patch)),
            ("mcp.d_h".into(), int(m.mcp.d_h)),
            ("mcp.k_layers".into(), int(m.mcp.k_layers)),
            ("mcp.kernel_k".into(), int(m.mcp.kernel_k)),
            ("mcp.reduction_r".into(), int(m.mcp.reduction_r)),
            ("mcp.tau0".into(), Value::Float(m.mcp.tau0)),
            ("mcp.tau_min".into(), Value::Float(m.mcp.tau_min)),
            ("mcp.refine".into(), Value::Boolean(m.mcp.refine_enabled)),
            ("mcp.fusion".into(), Value::String(m.mcp.fusion_mode.name().into())),
            ("loss.lambda_lang".into(), Value::Float(self.loss.lambda_lang)),
            ("loss.lambda_diff".into(), Value::Float(self.loss.lambda_diff)),
            ("loss.w_sigma".into(), Value::String(self.loss.w_sigma.name().into())),
        ];
        for s in &self.stages {
            let p = format!("stage.{}", s.name.name());
            let lora = s.lora.unwrap_or(LoraSpec { rank: 0, alpha: 0.0 });
            e.extend([
                (format!("{p}.dataset_size"), int(s.dataset_size)),
                (format!("{p}.epochs"), int(s.epochs)),
                (format!("{p}.batch_size"), int(s.batch_size)),
                (format!("{p}.lr0"), Value::Float(s.lr0)),
                (format!("{p}.lr_min"), Value::Float(s.lr_min)),
                (format!("{p}.warmup_ratio"), Value::Float(s.warmup_ratio)),
                (format!("{p}.clip"), Value::Float(s.clip.unwrap_or(0.0))),
                (format!("{p}.mask"), strs(&s.mask.names())),
                (format!("{p}.lora_rank"), int(lora.rank)),
                (format!("{p}.lora_alpha"), Value::Float(lora.alpha)),
                (format!("{p}.loss"), Value::String(loss_mode_name(s.loss_mode).into())),
            ]);
        }
        e.extend([
            ("eval.prompts_per_category".into(), int(self.eval.prompts_per_category)),
            ("eval.qa_items".into(), int(self.eval.qa_items)),
            ("eval.seed".into(), Value::Integer(self.eval.seed as i64)),
            ("eval.sampler_steps".into(), int(self.eval.sampler_steps)),
            (
                "eval.after".into(),
                strs(&self.eval.after.iter().map(|s| s.name()).collect::<Vec<_>>()),
            ),
        ]);
        e
    }

    /// The full configuration as parseable text.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Sets one key. `pipeline.stages` must be applied before stage keys.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = as_u64(key, v)?,
            "pipeline.stages" => {
                let names = as_strs(key, v)?;
                let mut stages = Vec::with_capacity(names.len());
                for n in names {
                    let name = StageName::parse(&n)?;
                    stages.push(self.stage(name).cloned().unwrap_or_else(|| StageSpec::preset(name)));
                }
                self.stages = stages;
                self.eval.after.retain(|a| self.stages.iter().any(|s| s.name == *a));
            }
            "model.connector" => m.connector = ConnectorKind::parse(as_str(key, v)?)?,
            "model.d_cond" => m.dit.d_cond = as_usize(key, v)?,
            "vlm.vocab" => m.vlm.vocab = as_usize(key, v)?,
            "vlm.d_vlm" => m.vlm.d_vlm = as_usize(key, v)?,
            "vlm.n_layers" => m.vlm.n_layers = as_usize(key, v)?,
            "vlm.mlp_hidden" => m.vlm.mlp_hidden = as_usize(key, v)?,
            "vlm.max_len" => m.vlm.max_len = as_usize(key, v)?,
            "dit.width" => m.dit.width = as_usize(key, v)?,
            "dit.blocks" => m.dit.blocks = as_usize(key, v)?,
            "dit.mlp_hidden" => m.dit.mlp_hidden = as_usize(key, v)?,
            "dit.sigma_freqs" => m.dit.sigma_freqs = as_usize(key, v)?,
            "codec.height" => m.codec.height = as_usize(key, v)?,
            "codec.width" => m.codec.width = as_usize(key, v)?,
            "codec.channels" => m.codec.channels = as_usize(key, v)?,
            "codec.patch" => m.codec.patch = as_usize(key, v)?,
            "mcp.d_h" => m.mcp.d_h = as_usize(key, v)?,
            "mcp.k_layers" => m.mcp.k_layers = as_usize(key, v)?,
            "mcp.kernel_k" => m.mcp.kernel_k = as_usize(key, v)?,
            "mcp.reduction_r" => m.mcp.reduction_r = as_usize(key, v)?,
            "mcp.tau0" => m.mcp.tau0 = as_f64(key, v)?,
            "mcp.tau_min" => m.mcp.tau_min = as_f64(key, v)?,
            "mcp.refine" => m.mcp.refine_enabled = as_bool(key, v)?,
            "mcp.fusion" => m.mcp.fusion_mode = FusionMode::parse(as_str(key, v)?)?,
            "loss.lambda_lang" => self.loss.lambda_lang = as_f64(key, v)?,
            "loss.lambda_diff" => self.loss.lambda_diff = as_f64(key, v)?,
            "loss.w_sigma" => self.loss.w_sigma = SigmaWeighting::parse(as_str(key, v)?)?,
            "eval.prompts_per_category" => self.eval.prompts_per_category = as_usize(key, v)?,
            "eval.qa_items" => self.eval.qa_items = as_usize(key, v)?,
            "eval.seed" => self.eval.seed = as_u64(key, v)?,
            "eval.sampler_steps" => self.eval.sampler_steps = as_usize(key, v)?,
            "eval.after" => {
                self.eval.after = as_strs(key, v)?
                    .iter()
                    .map(|s| StageName::parse(s))
                    .collect::<Result<_>>()?
            }
            _ => return self.set_stage_key(key, v),
        }
        self.sync();
        Ok(())
    }

    fn set_stage_key(&mut self, key: &str, v: &Value) -> Result<()> {
        let unknown = || Error::config(format!("unknown key `{key}`"));
        let rest = key.strip_prefix("stage.").ok_or_else(unknown)?;
        let (name, field) = rest.split_once('.').ok_or_else(unknown)?;
        let name = StageName::parse(name)?;
        let s = self
            .stage_mut(name)
            .ok_or_else(|| Error::config(format!("`{key}` configures a stage absent from pipeline.stages")))?;
        match field {
            "dataset_size" => s.dataset_size = as_usize(key, v)?,
            "epochs" => s.epochs = as_usize(key, v)?,
            "batch_size" => s.batch_size = as_usize(key, v)?,
            "lr0" => s.lr0 = as_f64(key, v)?,
            "lr_min" => s.lr_min = as_f64(key, v)?,
            "warmup_ratio" => s.warmup_ratio = as_f64(key, v)?,
            "clip" => {
                let c = as_f64(key, v)?;
                s.clip = (c > 0.0).then_some(c);
            }
            "mask" => s.mask = TrainableMask::from_names(&as_strs(key, v)?)?,
            "lora_rank" => {
                let rank = as_usize(key, v)?;
                let alpha = s.lora.map(|l| l.alpha).unwrap_or(crate::backbones::DEFAULT_ALPHA);
                s.lora = (rank > 0).then_some(LoraSpec { rank, alpha });
            }
            "lora_alpha" => {
                let alpha = as_f64(key, v)?;
                if let Some(l) = &mut s.lora {
                    l.alpha = alpha;
                }
            }
            "loss" => s.loss_mode = parse_loss_mode(key, v)?,
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                line,
                reason: e.message().to_string(),
            }
        })?;
        let mut entries = Vec::new();
        flatten("", &table, &mut entries);
        let mut cfg = TrainConfig::default();
        // Stage order first so stage keys find their targets; rank before alpha.
        entries.sort_by_key(|(k, _)| match k.as_str() {
            "pipeline.stages" => 0,
            k if k.ends_with(".lora_rank") => 1,
            _ => 2,
        });
        for (k, v) in &entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        TrainConfig::parse(&text)
    }
}
