//! Stage sequencing, evaluation and checkpointing.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::checkpoint::{self, Checkpoint, Progress};
use super::config::{EvalConfig, TrainConfig};
use super::stage::{build_examples, run_stage, EpochRecord, StageName, StageReport, StageRun, StageState, StepRecord};
use crate::backbones::ModelSet;
use crate::datagen::eval::{eval_qa_items, mini_geneval, understanding_accuracy, GenevalReport};
use crate::datagen::text::Vocab;
use crate::error::{Error, Result};

pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct StageEval {
    pub after: StageName,
    pub geneval: GenevalReport,
    pub understanding: f64,
}

impl StageEval {
    pub fn to_json(&self) -> Value {
        let cats: serde_json::Map<String, Value> = self
            .geneval
            .per_category
            .iter()
            .map(|(c, s)| (c.name().to_string(), json!(s)))
            .collect();
        json!({
            "kind": "eval",
            "after": self.after.name(),
            "geneval_overall": self.geneval.overall,
            "geneval": cats,
            "understanding": self.understanding,
        })
    }
}

#[derive(Clone, Debug)]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
    Eval(StageEval),
}

impl LogRecord {
    pub fn to_json(&self) -> Value {
        match self {
            LogRecord::Step(s) => json!({
                "kind": "step",
                "stage": s.stage.name(),
                "step": s.step,
                "loss": s.loss.total,
                "l_diff": s.loss.diff,
                "l_lang": s.loss.lang,
                "lr": s.lr,
                "tau": s.tau,
                "grad_norm": s.grad_norm,
            }),
            LogRecord::Epoch(e) => json!({
                "kind": "epoch",
                "stage": e.stage.name(),
                "epoch": e.epoch,
                "loss": e.mean_loss,
                "l_diff": e.mean_diff,
                "l_lang": e.mean_lang,
            }),
            LogRecord::Eval(e) => e.to_json(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    /// Checkpoints and the line-delimited log go here when set.
    pub out_dir: Option<PathBuf>,
    /// Interrupt once this position is reached, checkpointing mid-stage.
    pub stop_at: Option<Progress>,
}

#[derive(Debug)]
pub struct PipelineResult {
    pub models: ModelSet,
    pub stages: Vec<StageReport>,
    pub evals: Vec<StageEval>,
    pub progress: Progress,
    pub finished: bool,
    pub checkpoints: Vec<PathBuf>,
}

impl PipelineResult {
    pub fn eval_after(&self, stage: StageName) -> Option<&StageEval> {
        self.evals.iter().find(|e| e.after == stage)
    }
}

/// Independent data stream per stage position.
pub fn data_seed(seed: u64, stage_index: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add((stage_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn evaluate(models: &ModelSet, eval: &EvalConfig, after: StageName) -> StageEval {
    let vocab = Vocab::standard();
    let geneval = mini_geneval(models, &vocab, eval.prompts_per_category, eval.seed, eval.sampler_steps);
    let items = eval_qa_items(eval.qa_items, eval.seed ^ 0x5155_4553);
    StageEval {
        after,
        geneval,
        understanding: understanding_accuracy(models, &vocab, &items),
    }
}

pub fn stage_checkpoint_name(index: usize, name: StageName) -> String {
    format!("stage{}-{}.mobo", index + 1, name.name())
}

pub fn interrupted_checkpoint_name(p: Progress) -> String {
    format!("stage{}-step{}.mobo", p.stage_index + 1, p.stage_step)
}

struct Logger<'a, F: FnMut(&LogRecord)> {
    file: Option<std::fs::File>,
    sink: &'a mut F,
}

impl<F: FnMut(&LogRecord)> Logger<'_, F> {
    fn emit(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", rec.to_json())?;
        }
        (self.sink)(&rec);
        Ok(())
    }
}

pub fn run_pipeline(cfg: &TrainConfig, opts: &PipelineOptions, log: impl FnMut(&LogRecord)) -> Result<PipelineResult> {
    cfg.validate()?;
    // A fresh run starts a fresh log; resumes append.
    if let Some(d) = &opts.out_dir {
        match std::fs::remove_file(d.join(LOG_FILE)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
            _ => {}
        }
    }
    let models = ModelSet::new(cfg.model.clone(), cfg.seed)?;
    let start = Checkpoint {
        config: cfg.clone(),
        progress: Progress {
            stage_index: 0,
            stage_step: 0,
        },
        models,
        opt: None,
    };
    resume_pipeline(start, opts, log)
}

/// Continues from any checkpoint written by the pipeline.
pub fn resume_pipeline(
    ck: Checkpoint,
    opts: &PipelineOptions,
    mut log: impl FnMut(&LogRecord),
) -> Result<PipelineResult> {
    let Checkpoint {
        config: cfg,
        progress,
        mut models,
        opt,
    } = ck;
    cfg.validate()?;
    let file = match &opts.out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            std::fs::write(d.join("config.toml"), cfg.echo())?;
            Some(OpenOptions::new().create(true).append(true).open(d.join(LOG_FILE))?)
        }
        None => None,
    };
    let mut logger = Logger { file, sink: &mut log };
    let vocab = Vocab::standard();
    let mut result_stages = Vec::new();
    let mut evals = Vec::new();
    let mut checkpoints = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    let mut resume_state = match (progress.stage_step, opt) {
        (0, _) => None,
        (step, Some(opt)) => Some(StageState { step, opt }),
        (_, None) => return Err(Error::Format("mid-stage checkpoint lacks optimizer state".into())),
    };
    let save = |models: &ModelSet, progress: Progress, opt: Option<&super::adamw::AdamW>, name: String| -> Result<Option<PathBuf>> {
        let Some(dir) = &opts.out_dir else {
            return Ok(None);
        };
        let path = dir.join(name);
        checkpoint::save(
            &Checkpoint {
                config: cfg.clone(),
                progress,
                models: models.clone(),
                opt: opt.cloned(),
            },
            &path,
        )?;
        Ok(Some(path))
    };
    for i in progress.stage_index..cfg.stages.len() {
        let spec = &cfg.stages[i];
        let data = build_examples(spec.dataset, spec.dataset_size, data_seed(cfg.seed, i), &vocab, &models)?;
        let stop_at = opts.stop_at.filter(|p| p.stage_index == i).map(|p| p.stage_step);
        let run = StageRun {
            spec,
            stage_index: i,
            seed: cfg.seed,
            lw: cfg.loss,
            stop_at,
        };
        let mut pending = Ok(());
        let outcome = run_stage(&mut models, &data, None, &run, resume_state.take(), |rec| {
            if pending.is_ok() {
                pending = logger.emit(LogRecord::Step(rec.clone()));
            }
        });
        pending?;
        let (report, state) = match outcome {
            Ok(r) => r,
            Err(Error::Numerical { step, what, .. }) => {
                return Err(Error::Numerical {
                    step,
                    what,
                    last_good: last_good.clone(),
                })
            }
            Err(e) => return Err(e),
        };
        for e in &report.epochs {
            logger.emit(LogRecord::Epoch(e.clone()))?;
        }
        result_stages.push(report);
        if state.step < spec.total_steps() {
            let p = Progress {
                stage_index: i,
                stage_step: state.step,
            };
            checkpoints.extend(save(&models, p, Some(&state.opt), interrupted_checkpoint_name(p))?);
            return Ok(PipelineResult {
                models,
                stages: result_stages,
                evals,
                progress: p,
                finished: false,
                checkpoints,
            });
        }
        let p = Progress {
            stage_index: i + 1,
            stage_step: 0,
        };
        if let Some(path) = save(&models, p, None, stage_checkpoint_name(i, spec.name))? {
            last_good = Some(path.clone());
            checkpoints.push(path);
        }
        if cfg.eval.after.contains(&spec.name) {
            let ev = evaluate(&models, &cfg.eval, spec.name);
            logger.emit(LogRecord::Eval(ev.clone()))?;
            evals.push(ev);
        }
    }
    Ok(PipelineResult {
        models,
        stages: result_stages,
        evals,
        progress: Progress {
            stage_index: cfg.stages.len(),
            stage_step: 0,
        },
        finished: true,
        checkpoints,
    })
}

/// Reads back a line-delimited log.
pub fn read_log(path: &Path) -> Result<Vec<Value>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
