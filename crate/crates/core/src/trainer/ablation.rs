//! Connector ablation: every variant is trained identically (same seeds,
//! data, steps and pretrained language backbone) and scored by compositional
//! generation accuracy.

use std::fmt::Write as _;

use serde_json::{json, Value};

use super::config::TrainConfig;
use super::pipeline::data_seed;
use super::stage::{build_examples, prepare_stage, run_stage, HiddenCache, StageName, StageRun, StageSpec};
use crate::backbones::{ConnectorKind, ModelConfig, ModelSet};
use crate::datagen::eval::mini_geneval;
use crate::datagen::text::Vocab;
use crate::error::{Error, Result};
use crate::mcp::FusionMode;
use crate::params::Component;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    MlpConnector,
    McpK1Uniform,
    McpK4Uniform,
    McpK4Learnable,
    McpK4LearnableCa,
    /// Full projector fusing the last `k` layers.
    Depth(usize),
}

impl Variant {
    pub const TABLE: [Variant; 5] = [
        Variant::MlpConnector,
        Variant::McpK1Uniform,
        Variant::McpK4Uniform,
        Variant::McpK4Learnable,
        Variant::McpK4LearnableCa,
    ];
    pub const DEPTHS: [usize; 4] = [1, 2, 4, 8];

    pub fn all() -> Vec<Variant> {
        let mut v = Variant::TABLE.to_vec();
        v.extend(Variant::DEPTHS.map(Variant::Depth));
        v
    }

    pub fn name(self) -> String {
        match self {
            Variant::MlpConnector => "mlp-connector".into(),
            Variant::McpK1Uniform => "mcp-K1-uniform".into(),
            Variant::McpK4Uniform => "mcp-K4-uniform".into(),
            Variant::McpK4Learnable => "mcp-K4-learnable".into(),
            Variant::McpK4LearnableCa => "mcp-K4-learnable+CA".into(),
            Variant::Depth(k) => format!("depth-{k}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if let Some(k) = s.strip_prefix("depth-") {
            return match k.parse::<usize>() {
                Ok(k) if Variant::DEPTHS.contains(&k) => Ok(Variant::Depth(k)),
                _ => Err(Error::config(format!(
                    "unknown variant `{s}`: depth must be one of {:?}",
                    Variant::DEPTHS
                ))),
            };
        }
        Variant::TABLE
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
    }

    /// `(fused layers, fusion mode, refinement)`; `None` for the MLP connector.
    pub fn projector(self) -> Option<(usize, FusionMode, bool)> {
        match self {
            Variant::MlpConnector => None,
            Variant::McpK1Uniform => Some((1, FusionMode::Uniform, false)),
            Variant::McpK4Uniform => Some((4, FusionMode::Uniform, false)),
            Variant::McpK4Learnable => Some((4, FusionMode::Learnable, false)),
            Variant::McpK4LearnableCa => Some((4, FusionMode::Learnable, true)),
            Variant::Depth(k) => Some((k, FusionMode::Learnable, true)),
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self.projector() {
            None => cfg.connector = ConnectorKind::Mlp,
            Some((k, mode, refine)) => {
                cfg.connector = ConnectorKind::Mcp;
                cfg.mcp.k_layers = k;
                cfg.mcp.fusion_mode = mode;
                cfg.mcp.refine_enabled = refine;
            }
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    /// Model, loss and evaluation settings; the language backbone must be
    /// deep enough for the largest fusion depth.
    pub base: TrainConfig,
    /// Optional language warm start shared by all variants of a seed.
    pub pretrain: Option<StageSpec>,
    /// The diffusion stage every variant runs, with the backbone frozen.
    pub stage: StageSpec,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let mut base = TrainConfig::default();
        base.model.vlm.n_layers = 8;
        let pretrain = base.stage(StageName::Pretrain).cloned();
        let stage = base
            .stage(StageName::Align)
            .cloned()
            .unwrap_or_else(|| StageSpec::preset(StageName::Align));
        AblationConfig {
            base,
            pretrain,
            stage,
            seeds: vec![0, 1, 2],
        }
    }
}

impl AblationConfig {
    /// Takes model, stages and evaluation settings from a training config;
    /// the backbone is deepened to the largest fusion depth if needed.
    pub fn from_train(cfg: &TrainConfig, seeds: Vec<u64>) -> Self {
        let mut base = cfg.clone();
        let deepest = *Variant::DEPTHS.iter().max().expect("non-empty");
        base.model.vlm.n_layers = base.model.vlm.n_layers.max(deepest);
        AblationConfig {
            pretrain: cfg.stage(StageName::Pretrain).cloned(),
            stage: cfg
                .stage(StageName::Align)
                .cloned()
                .unwrap_or_else(|| StageSpec::preset(StageName::Align)),
            base,
            seeds,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub param_count: usize,
    /// Overall compositional score per seed, in seed order.
    pub scores: Vec<f64>,
    pub final_losses: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len().max(1) as f64
    }

    /// Sample standard deviation; zero for a single seed.
    pub fn sd(&self) -> f64 {
        let n = self.scores.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.scores.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    pub fn to_json(&self) -> Value {
        let (k, fusion, refine) = match self.variant.projector() {
            Some((k, f, r)) => (json!(k), json!(f.name()), json!(r)),
            None => (Value::Null, Value::Null, json!(false)),
        };
        json!({
            "kind": "ablation",
            "variant": self.variant.name(),
            "k_layers": k,
            "fusion": fusion,
            "refine": refine,
            "param_count": self.param_count,
            "geneval_mean": self.mean(),
            "geneval_sd": self.sd(),
            "geneval": self.scores,
            "final_loss": self.final_losses,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<22} {:>3} {:<10} {:>3} {:>8}  {:<16} (seeds {:?})",
            "variant", "K", "fusion", "CA", "params", "geneval", self.seeds
        );
        for r in &self.rows {
            let (k, f, ca) = match r.variant.projector() {
                Some((k, f, ca)) => (k.to_string(), f.name(), if ca { "yes" } else { "no" }),
                None => ("-".into(), "-", "-"),
            };
            let _ = writeln!(
                out,
                "{:<22} {:>3} {:<10} {:>3} {:>8}  {:.3} ± {:.3}",
                r.variant.name(),
                k,
                f,
                ca,
                r.param_count,
                r.mean(),
                r.sd()
            );
        }
        out
    }
}

/// Copies every language-backbone tensor of `from` into `to`.
fn copy_backbone(from: &ModelSet, to: &mut ModelSet) -> Result<()> {
    for (_, e) in from.store.iter() {
        if matches!(e.component, Component::VisionEmbed | Component::VlmBlocks | Component::LmHead) {
            let id = to
                .store
                .id(&e.name)
                .ok_or_else(|| Error::Contract(format!("variant lacks backbone tensor `{}`", e.name)))?;
            *to.store.value_mut(id) = e.value.clone();
        }
    }
    Ok(())
}

pub fn ablation_run(
    variants: &[Variant],
    cfg: &AblationConfig,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    if variants.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::config("ablation needs at least one variant and one seed"));
    }
    let deepest = variants
        .iter()
        .filter_map(|v| v.projector().map(|p| p.0))
        .max()
        .unwrap_or(1);
    if cfg.base.model.vlm.n_layers < deepest {
        return Err(Error::config(format!(
            "variants fuse up to {deepest} layers but vlm.n_layers = {}",
            cfg.base.model.vlm.n_layers
        )));
    }
    if cfg.stage.mask.contains(Component::VlmBlocks) || cfg.stage.lora.is_some() {
        return Err(Error::config("the ablation stage must keep the language backbone frozen"));
    }
    let vocab = Vocab::standard();
    let mut rows: Vec<AblationRow> = variants
        .iter()
        .map(|&v| AblationRow {
            variant: v,
            param_count: v.apply(&cfg.base.model).connector_param_count(),
            scores: Vec::new(),
            final_losses: Vec::new(),
        })
        .collect();
    for &seed in &cfg.seeds {
        let mut backbone = ModelSet::new(cfg.base.model.clone(), seed)?;
        if let Some(p) = &cfg.pretrain {
            let data = build_examples(p.dataset, p.dataset_size, data_seed(seed, 0), &vocab, &backbone)?;
            let run = StageRun {
                spec: p,
                stage_index: 0,
                seed,
                lw: cfg.base.loss,
                stop_at: None,
            };
            run_stage(&mut backbone, &data, None, &run, None, |_| {})?;
        }
        let data = build_examples(
            cfg.stage.dataset,
            cfg.stage.dataset_size,
            data_seed(seed, 1),
            &vocab,
            &backbone,
        )?;
        let cache = HiddenCache::build(&backbone, &data, cfg.base.model.vlm.n_layers)?;
        for row in rows.iter_mut() {
            let mut models = ModelSet::new(row.variant.apply(&cfg.base.model), seed)?;
            copy_backbone(&backbone, &mut models)?;
            prepare_stage(&mut models, &cfg.stage)?;
            let run = StageRun {
                spec: &cfg.stage,
                stage_index: 1,
                seed,
                lw: cfg.base.loss,
                stop_at: None,
            };
            let (report, _) = run_stage(&mut models, &data, Some(&cache), &run, None, |_| {})?;
            let e = &cfg.base.eval;
            let score = mini_geneval(&models, &vocab, e.prompts_per_category, e.seed, e.sampler_steps);
            row.scores.push(score.overall);
            row.final_losses
                .push(report.epochs.last().map(|r| r.mean_loss).unwrap_or(f64::NAN));
        }
    }
    for r in &rows {
        on_row(r);
    }
    Ok(AblationReport {
        seeds: cfg.seeds.clone(),
        rows,
    })
}
