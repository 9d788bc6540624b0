//! One training stage: data, freeze mask, schedule and the step loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adamw::{AdamW, AdamWConfig};
use super::schedule::{clip_grad_norm, cosine_lr};
use crate::backbones::{LoraSpec, ModelSet, DEFAULT_ALPHA, DEFAULT_RANK};
use crate::datagen::text::{Vocab, PAD, SEP};
use crate::datagen::{gen_sample, render, Split};
use crate::error::{Error, Result};
use crate::mcp::anneal_temperature;
use crate::numerics::{ErrorAccumulator, GradCheckReport, Tensor, Var};
use crate::objectives::{flow_matching_loss, flow_sample, i2t_loss, unified_loss, LossWeights};
use crate::params::{Component, Graph, ParamId, TrainableMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageName {
    /// Language-only warm start standing in for a pretrained VLM.
    Pretrain,
    Align,
    Sft,
    Unified,
}

impl StageName {
    pub const ALL: [StageName; 4] = [StageName::Pretrain, StageName::Align, StageName::Sft, StageName::Unified];

    pub fn name(self) -> &'static str {
        match self {
            StageName::Pretrain => "pretrain",
            StageName::Align => "align",
            StageName::Sft => "sft",
            StageName::Unified => "unified",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        StageName::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    DiffOnly,
    LangOnly,
    Unified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// Prompt–image pairs over all scenes.
    Pairs,
    /// Prompt–image pairs restricted to multi-object scenes.
    HardPairs,
    /// Prompt, image, question and answer over the same multi-object
    /// scenes as `HardPairs`.
    Quadruplets,
    /// Alternating caption language modelling and image question answering.
    LanguageMix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub name: StageName,
    pub dataset: DatasetKind,
    pub dataset_size: usize,
    pub mask: TrainableMask,
    pub lora: Option<LoraSpec>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub warmup_ratio: f64,
    pub loss_mode: LossMode,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip: Option<f64>,
}

impl StageSpec {
    /// Recipe defaults per stage. Dataset sizes and epochs are the
    /// desk-scale budget used by the default configuration.
    pub fn preset(name: StageName) -> Self {
        let gen_mask = TrainableMask::of(&[Component::Dit, Component::Mcp]);
        let vlm_mask = TrainableMask::of(&[Component::VlmBlocks, Component::LmHead, Component::VisionEmbed]);
        match name {
            StageName::Pretrain => StageSpec {
                name,
                dataset: DatasetKind::LanguageMix,
                dataset_size: 2000,
                mask: vlm_mask,
                lora: None,
                epochs: 2,
                batch_size: 8,
                lr0: 1e-3,
                lr_min: 1e-5,
                warmup_ratio: 0.05,
                loss_mode: LossMode::LangOnly,
                clip: Some(1.0),
            },
            StageName::Align => StageSpec {
                name,
                dataset: DatasetKind::Pairs,
                dataset_size: 4000,
                mask: gen_mask,
                lora: None,
                epochs: 5,
                batch_size: 8,
                lr0: 2e-3,
                lr_min: 2e-5,
                warmup_ratio: 0.02,
                loss_mode: LossMode::DiffOnly,
                clip: Some(1.0),
            },
            StageName::Sft => StageSpec {
                name,
                dataset: DatasetKind::HardPairs,
                dataset_size: 1000,
                mask: gen_mask,
                lora: None,
                epochs: 10,
                batch_size: 8,
                lr0: 2e-3,
                lr_min: 1e-5,
                warmup_ratio: 0.05,
                loss_mode: LossMode::DiffOnly,
                clip: Some(1.0),
            },
            StageName::Unified => StageSpec {
                name,
                dataset: DatasetKind::Quadruplets,
                dataset_size: 1000,
                mask: TrainableMask::of(&[
                    Component::Dit,
                    Component::Mcp,
                    Component::VlmBlocks,
                    Component::LmHead,
                    Component::VisionEmbed,
                ]),
                lora: Some(LoraSpec {
                    rank: DEFAULT_RANK,
                    alpha: DEFAULT_ALPHA,
                }),
                epochs: 5,
                batch_size: 4,
                lr0: 1e-3,
                lr_min: 1e-5,
                warmup_ratio: 0.05,
                loss_mode: LossMode::Unified,
                clip: Some(1.0),
            },
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset_size.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config(format!(
                "stage {} needs positive dataset size, epochs and batch size",
                self.name.name()
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("warmup ratio must lie in [0, 1)"));
        }
        if !(self.lr0 >= self.lr_min && self.lr_min >= 0.0) {
            return Err(Error::config("need lr0 >= lr_min >= 0"));
        }
        Ok(())
    }
}

/// Teacher-forced answer sequence `<bos> q <sep> a <eos>` with the loss
/// mask covering the answer and end-of-sequence predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct QaSequence {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    /// Whether the image tokens are prepended.
    pub image: bool,
}

impl QaSequence {
    pub fn new(vocab: &Vocab, question: &str, answer: &str) -> Self {
        let mut tokens = vocab.question_tokens(question);
        let sep = tokens.len() - 1;
        debug_assert_eq!(tokens[sep], SEP);
        tokens.extend(vocab.encode(answer));
        tokens.push(crate::datagen::text::EOS);
        let n = tokens.len();
        let targets = (0..n).map(|t| if t + 1 < n { tokens[t + 1] } else { PAD }).collect();
        let mask = (0..n).map(|t| t >= sep && t + 1 < n).collect();
        QaSequence {
            tokens,
            targets,
            mask,
            image: true,
        }
    }

    /// Text-only language modelling of `<bos> caption <eos>`.
    pub fn caption(vocab: &Vocab, caption: &str) -> Self {
        let mut tokens = vocab.prompt_tokens(caption);
        tokens.push(crate::datagen::text::EOS);
        let n = tokens.len();
        QaSequence {
            targets: (0..n).map(|t| if t + 1 < n { tokens[t + 1] } else { PAD }).collect(),
            mask: (0..n).map(|t| t + 1 < n).collect(),
            tokens,
            image: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Example {
    pub prompt: Vec<usize>,
    pub latent: Tensor,
    pub qa: Option<QaSequence>,
}

pub fn build_examples(kind: DatasetKind, n: usize, seed: u64, vocab: &Vocab, models: &ModelSet) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_objects = if matches!(kind, DatasetKind::HardPairs | DatasetKind::Quadruplets) { 2 } else { 1 };
    (0..n)
        .map(|i| {
            let s = gen_sample(&mut rng, Split::Train, min_objects);
            let qa = match kind {
                DatasetKind::Quadruplets => Some(QaSequence::new(vocab, &s.question, &s.answer)),
                DatasetKind::LanguageMix if i % 2 == 0 => Some(QaSequence::caption(vocab, &s.caption)),
                DatasetKind::LanguageMix => Some(QaSequence::new(vocab, &s.question, &s.answer)),
                _ => None,
            };
            Ok(Example {
                prompt: vocab.prompt_tokens(&s.caption),
                latent: models.codec.encode(&models.store, &render(&s.spec))?,
                qa,
            })
        })
        .collect()
}

/// Frozen-VLM hidden states per example: the last `keep` layers.
#[derive(Clone, Debug)]
pub struct HiddenCache {
    pub layers: Vec<Vec<Tensor>>,
}

impl HiddenCache {
    pub fn build(models: &ModelSet, data: &[Example], keep: usize) -> Result<Self> {
        let layers = data
            .iter()
            .map(|ex| {
                let all = models.vlm.hidden_states(&models.store, &ex.prompt)?;
                let k = keep.min(all.len());
                Ok(all[all.len() - k..].to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(HiddenCache { layers })
    }
}

pub fn vlm_frozen(models: &ModelSet) -> bool {
    !models.store.iter().any(|(_, e)| {
        e.trainable && matches!(e.component, Component::VisionEmbed | Component::VlmBlocks | Component::LmHead)
    })
}

pub fn layers_needed(models: &ModelSet) -> usize {
    models.mcp().map(|m| m.cfg.k_layers).unwrap_or(1)
}

/// Per-example noise stream, a pure function of its coordinates.
pub fn example_rng(seed: u64, stage: usize, step: usize, slot: usize) -> ChaCha8Rng {
    let mut s = seed ^ 0xA076_1D64_78BD_642F;
    for v in [stage as u64, step as u64, slot as u64] {
        s = (s ^ v).wrapping_mul(0xE703_7ED1_A0B4_28DB).rotate_left(29);
    }
    ChaCha8Rng::seed_from_u64(s)
}

pub fn epoch_order(seed: u64, stage: usize, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = example_rng(seed, stage, usize::MAX - epoch, usize::MAX);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub diff: f64,
    pub lang: f64,
}

/// Builds the loss of one example on `g`.
pub fn example_loss<'a>(
    g: &mut Graph<'a>,
    models: &ModelSet,
    ex: &'a Example,
    cached: Option<&'a [Tensor]>,
    tau: f64,
    mode: LossMode,
    lw: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossParts)> {
    let mut parts = LossParts::default();
    let l_diff = if mode == LossMode::LangOnly {
        None
    } else {
        let layers: Vec<Var> = match cached {
            Some(ls) => ls.iter().map(|t| g.tape.leaf_ref(t, false)).collect(),
            None => models.vlm.forward(g, &ex.prompt, None, false)?.layers,
        };
        let e = models.connector.forward(g, &layers, tau)?;
        let fs = flow_sample(&ex.latent, rng, None)?;
        let x = g.tape.constant(fs.x_sigma.clone());
        let pred = models.dit.forward(g, x, fs.sigma, e)?;
        let l = flow_matching_loss(&mut g.tape, pred, &fs, lw)?;
        parts.diff = g.tape.value(l).item();
        Some(l)
    };
    let l_lang = if mode == LossMode::DiffOnly {
        None
    } else {
        let qa = ex
            .qa
            .as_ref()
            .ok_or_else(|| Error::Contract("language loss needs question/answer data".into()))?;
        let img = qa.image.then(|| g.tape.leaf_ref(&ex.latent, false));
        let out = models.vlm.forward(g, &qa.tokens, img, true)?;
        let logits = out.logits.expect("requested");
        let l = i2t_loss(&mut g.tape, logits, &qa.targets, &qa.mask)?;
        parts.lang = g.tape.value(l).item();
        Some(l)
    };
    let total = match (l_lang, l_diff) {
        (Some(a), Some(b)) => unified_loss(&mut g.tape, a, b, lw)?,
        (None, Some(b)) => g.tape.scale(b, lw.lambda_diff),
        (Some(a), None) => g.tape.scale(a, lw.lambda_lang),
        (None, None) => unreachable!("every mode has a loss term"),
    };
    parts.total = g.tape.value(total).item();
    Ok((total, parts))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub stage: StageName,
    pub step: usize,
    pub loss: LossParts,
    pub lr: f64,
    pub tau: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: StageName,
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_diff: f64,
    pub mean_lang: f64,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub name: StageName,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub tau_start: f64,
    pub tau_end: f64,
    pub trainable_scalars: usize,
}

/// Optimizer and position inside a stage; enough to resume exactly.
#[derive(Clone, Debug)]
pub struct StageState {
    pub step: usize,
    pub opt: AdamW,
}

pub struct StageRun<'a> {
    pub spec: &'a StageSpec,
    pub stage_index: usize,
    pub seed: u64,
    pub lw: LossWeights,
    /// Stop before this global step (for interrupted runs).
    pub stop_at: Option<usize>,
}

/// Applies adapters and the freeze mask; idempotent.
pub fn prepare_stage(models: &mut ModelSet, spec: &StageSpec) -> Result<()> {
    spec.validate()?;
    if let Some(l) = spec.lora {
        if models.lora.is_none() {
            models.apply_lora(l)?;
        }
    }
    models.set_trainable(&spec.mask);
    Ok(())
}

/// Runs (or resumes) a stage. Steps are `epochs × ceil(n / batch)`; each
/// step averages per-example gradients, clips, and applies AdamW at the
/// scheduled learning rate while τ anneals across the stage.
pub fn run_stage(
    models: &mut ModelSet,
    data: &[Example],
    cache: Option<&HiddenCache>,
    run: &StageRun,
    state: Option<StageState>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(StageReport, StageState)> {
    let spec = run.spec;
    prepare_stage(models, spec)?;
    if data.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let own_cache;
    let cache = match cache {
        Some(c) => Some(c),
        None if vlm_frozen(models) => {
            own_cache = HiddenCache::build(models, data, layers_needed(models))?;
            Some(&own_cache)
        }
        None => None,
    };
    let mut state = state.unwrap_or_else(|| StageState {
        step: 0,
        opt: AdamW::new(AdamWConfig::default(), &models.store),
    });
    let spe = data.len().div_ceil(spec.batch_size);
    let total = spec.epochs * spe;
    let mcp_cfg = models.cfg.mcp.clone();
    let mut report = StageReport {
        name: spec.name,
        steps: Vec::new(),
        epochs: Vec::new(),
        tau_start: anneal_temperature(0, total, &mcp_cfg),
        tau_end: anneal_temperature(total, total, &mcp_cfg),
        trainable_scalars: models.store.trainable_scalar_count(),
    };
    let stop = run.stop_at.unwrap_or(total).min(total);
    let mut acc: Vec<Option<Tensor>> = vec![None; models.store.len()];
    let mut epoch_sums = (0.0, 0.0, 0.0, 0usize);
    while state.step < stop {
        let step = state.step;
        let epoch = step / spe;
        let order = epoch_order(run.seed, run.stage_index, epoch, data.len());
        let b = step % spe;
        let batch = &order[b * spec.batch_size..((b + 1) * spec.batch_size).min(data.len())];
        let lr = cosine_lr(step, total, spec.warmup_ratio, spec.lr0, spec.lr_min);
        let tau = anneal_temperature(step, total, &mcp_cfg);
        let scale = 1.0 / batch.len() as f64;
        let mut parts = LossParts::default();
        for (slot, &i) in batch.iter().enumerate() {
            let mut rng = example_rng(run.seed, run.stage_index, step, slot);
            let mut g = Graph::new(&models.store);
            let cached = cache.map(|c| c.layers[i].as_slice());
            let (loss, p) = example_loss(&mut g, models, &data[i], cached, tau, spec.loss_mode, &run.lw, &mut rng)?;
            if !p.total.is_finite() {
                return Err(Error::Numerical {
                    step,
                    what: format!("{} loss", spec.name.name()),
                    last_good: None,
                });
            }
            parts.total += p.total * scale;
            parts.diff += p.diff * scale;
            parts.lang += p.lang * scale;
            let scaled = g.tape.scale(loss, scale);
            let mut grads = g.tape.backward(scaled)?;
            for (id, t) in g.param_grads(&mut grads) {
                match &mut acc[id.index()] {
                    Some(a) => {
                        for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                            *x += y;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            }
        }
        let (ids, mut tensors): (Vec<ParamId>, Vec<Tensor>) = acc
            .iter_mut()
            .enumerate()
            .filter_map(|(i, a)| a.take().map(|t| (ParamId(i), t)))
            .unzip();
        let grad_norm = match spec.clip {
            Some(c) => clip_grad_norm(&mut tensors, c),
            None => super::schedule::global_norm(tensors.iter()),
        };
        if !grad_norm.is_finite() {
            return Err(Error::Numerical {
                step,
                what: "gradient norm".into(),
                last_good: None,
            });
        }
        let grads: Vec<(ParamId, Tensor)> = ids.into_iter().zip(tensors).collect();
        state.opt.step(&mut models.store, &grads, lr)?;
        let rec = StepRecord {
            stage: spec.name,
            step,
            loss: parts,
            lr,
            tau,
            grad_norm,
        };
        on_step(&rec);
        report.steps.push(rec);
        epoch_sums = (
            epoch_sums.0 + parts.total,
            epoch_sums.1 + parts.diff,
            epoch_sums.2 + parts.lang,
            epoch_sums.3 + 1,
        );
        state.step += 1;
        if state.step % spe == 0 || state.step == stop {
            let n = epoch_sums.3.max(1) as f64;
            report.epochs.push(EpochRecord {
                stage: spec.name,
                epoch,
                mean_loss: epoch_sums.0 / n,
                mean_diff: epoch_sums.1 / n,
                mean_lang: epoch_sums.2 / n,
            });
            epoch_sums = (0.0, 0.0, 0.0, 0);
        }
    }
    Ok((report, state))
}

/// Mean loss over `data` at the stage's final temperature, without updates.
pub fn evaluate_loss(
    models: &ModelSet,
    data: &[Example],
    mode: LossMode,
    lw: &LossWeights,
    seed: u64,
) -> Result<LossParts> {
    let tau = models.cfg.mcp.tau_min;
    let mut sum = LossParts::default();
    for (i, ex) in data.iter().enumerate() {
        let mut rng = example_rng(seed, usize::MAX, 0, i);
        let mut g = Graph::new(&models.store);
        let (_, p) = example_loss(&mut g, models, ex, None, tau, mode, lw, &mut rng)?;
        sum.total += p.total;
        sum.diff += p.diff;
        sum.lang += p.lang;
    }
    let n = data.len().max(1) as f64;
    Ok(LossParts {
        total: sum.total / n,
        diff: sum.diff / n,
        lang: sum.lang / n,
    })
}

/// Compares reverse-mode gradients of one example's loss against central
/// differences for every element of every trainable tensor. The noise
/// draw is replayed for each probe, so the loss is a deterministic
/// function of the parameters.
pub fn loss_grad_check(
    models: &mut ModelSet,
    ex: &Example,
    mode: LossMode,
    lw: &LossWeights,
    tau: f64,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let loss_at = |m: &ModelSet| -> Result<f64> {
        let mut rng = example_rng(0, 0, 0, 0);
        let mut g = Graph::new(&m.store);
        let (l, _) = example_loss(&mut g, m, ex, None, tau, mode, lw, &mut rng)?;
        Ok(g.tape.value(l).item())
    };
    let analytic: Vec<(ParamId, Tensor)> = {
        let mut rng = example_rng(0, 0, 0, 0);
        let mut g = Graph::new(&models.store);
        let (l, _) = example_loss(&mut g, models, ex, None, tau, mode, lw, &mut rng)?;
        let mut grads = g.tape.backward(l)?;
        g.param_grads(&mut grads)
    };
    let ids: Vec<ParamId> = models
        .store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut acc = ErrorAccumulator::new(tol);
    for id in ids {
        let grad = analytic
            .iter()
            .find(|(a, _)| *a == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(models.store.value(id).shape()));
        for j in 0..grad.numel() {
            let orig = models.store.value(id).data()[j];
            models.store.value_mut(id).data_mut()[j] = orig + step;
            let lp = loss_at(models)?;
            models.store.value_mut(id).data_mut()[j] = orig - step;
            let lm = loss_at(models)?;
            models.store.value_mut(id).data_mut()[j] = orig;
            acc.push(grad.data()[j], (lp - lm) / (2.0 * step));
        }
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::ModelConfig;

    fn tiny_spec(name: StageName) -> StageSpec {
        StageSpec {
            dataset_size: 12,
            epochs: 2,
            batch_size: 4,
            lr0: 1e-3,
            lr_min: 1e-5,
            ..StageSpec::preset(name)
        }
    }

    fn setup(kind: DatasetKind) -> (ModelSet, Vec<Example>) {
        let vocab = Vocab::standard();
        let cfg = ModelConfig {
            vlm: crate::backbones::VlmConfig {
                vocab: vocab.len(),
                ..Default::default()
            },
            ..Default::default()
        };
        let m = ModelSet::new(cfg, 17).unwrap();
        let data = build_examples(kind, 12, 5, &vocab, &m).unwrap();
        (m, data)
    }

    fn run(m: &mut ModelSet, data: &[Example], spec: &StageSpec, state: Option<StageState>, stop_at: Option<usize>) -> (StageReport, StageState) {
        let r = StageRun {
            spec,
            stage_index: 0,
            seed: 3,
            lw: LossWeights::default(),
            stop_at,
        };
        run_stage(m, data, None, &r, state, |_| {}).unwrap()
    }

    #[test]
    fn qa_sequence_masks_only_answer_predictions() {
        let v = Vocab::standard();
        let q = QaSequence::new(&v, "how many objects ?", "two");
        assert_eq!(v.decode(&q.tokens), "<bos> how many objects ? <sep> two <eos>");
        let masked: Vec<usize> = q.targets.iter().zip(&q.mask).filter(|(_, m)| **m).map(|(t, _)| *t).collect();
        assert_eq!(v.decode(&masked), "two <eos>");
    }

    #[test]
    fn generation_stage_freezes_vlm_and_anneals_tau() {
        let (mut m, data) = setup(DatasetKind::Pairs);
        let before: Vec<_> = [Component::VlmBlocks, Component::VisionEmbed, Component::LmHead, Component::Codec]
            .map(|c| m.store.component_bits(c))
            .to_vec();
        let mcp_before = m.store.component_bits(Component::Mcp);
        let spec = tiny_spec(StageName::Align);
        let (rep, _) = run(&mut m, &data, &spec, None, None);
        let after: Vec<_> = [Component::VlmBlocks, Component::VisionEmbed, Component::LmHead, Component::Codec]
            .map(|c| m.store.component_bits(c))
            .to_vec();
        assert_eq!(before, after);
        assert_ne!(mcp_before, m.store.component_bits(Component::Mcp));
        assert_eq!(rep.steps.len(), 6);
        assert_eq!(rep.steps[0].tau, m.cfg.mcp.tau0);
        assert_eq!(rep.tau_end, m.cfg.mcp.tau_min);
        assert_eq!(rep.epochs.len(), 2);
    }

    #[test]
    fn all_frozen_leaves_loss_constant() {
        let (mut m, data) = setup(DatasetKind::Pairs);
        let spec = StageSpec {
            mask: TrainableMask::none(),
            ..tiny_spec(StageName::Align)
        };
        let before = evaluate_loss(&m, &data, LossMode::DiffOnly, &LossWeights::default(), 1).unwrap();
        run(&mut m, &data, &spec, None, None);
        let after = evaluate_loss(&m, &data, LossMode::DiffOnly, &LossWeights::default(), 1).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn interrupted_stage_resumes_bit_exactly() {
        let (mut a, data) = setup(DatasetKind::Quadruplets);
        let mut b = a.clone();
        let spec = tiny_spec(StageName::Unified);
        let (full, _) = run(&mut a, &data, &spec, None, None);
        let (first, state) = run(&mut b, &data, &spec, None, Some(4));
        let (rest, _) = run(&mut b, &data, &spec, Some(state), None);
        let losses = |r: &StageReport| r.steps.iter().map(|s| s.loss.total.to_bits()).collect::<Vec<_>>();
        let mut joined = losses(&first);
        joined.extend(losses(&rest));
        assert_eq!(losses(&full), joined);
        assert!(full.steps.iter().all(|s| s.loss.lang > 0.0));
        // codec is never trainable
        assert_eq!(a.store.component_bits(Component::Codec), ModelSet::new(a.cfg.clone(), 17).unwrap().store.component_bits(Component::Codec));
    }

    #[test]
    fn clipping_bounds_post_clip_norm() {
        let (mut m, data) = setup(DatasetKind::Pairs);
        let spec = StageSpec {
            clip: Some(1e-3),
            ..tiny_spec(StageName::Align)
        };
        let (rep, _) = run(&mut m, &data, &spec, None, Some(2));
        assert!(rep.steps.iter().all(|s| s.grad_norm > 1e-3));
    }
}
