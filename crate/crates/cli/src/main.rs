//! `mcpflow`: batch driver for data generation, training, sampling,
//! question answering, evaluation, profiling, ablation and checkpoint
//! inspection.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 I/O or malformed
//! input file, 3 non-finite numerics. Tables go to stdout only after their
//! line-delimited records are written; stderr carries error messages only.

mod bench;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcpflow_core::backbones::ConnectorKind;
use mcpflow_core::datagen::eval::{eval_qa_items, greedy_answer, mini_geneval, understanding_accuracy};
use mcpflow_core::datagen::manifest::write_dataset;
use mcpflow_core::datagen::text::Vocab;
use mcpflow_core::datagen::Split;
use mcpflow_core::flowsampler::{generate, SamplerConfig, DEFAULT_STEPS};
use mcpflow_core::image::Image;
use mcpflow_core::mcp::{flop_estimate, mlp_connector_param_count};
use mcpflow_core::trainer::ablation::{ablation_run, AblationConfig, Variant};
use mcpflow_core::trainer::checkpoint::{self, Checkpoint, Progress};
use mcpflow_core::trainer::config::TrainConfig;
use mcpflow_core::trainer::pipeline::{resume_pipeline, run_pipeline, LogRecord, PipelineOptions, PipelineResult};
use mcpflow_core::{Error, Result};
use serde_json::json;

use report::{mean_sd, Report};

#[derive(Parser, Debug)]
#[command(name = "mcpflow", version, about = "Toy unified vision-language-diffusion pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML training configuration; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed; for `generate` it seeds the sampler.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "mcpflow-out")]
    out_dir: PathBuf,
    /// Suppress stdout tables; files are still written.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic quadruplet dataset and its manifest.
    Datagen {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value = "train", value_parser = ["train", "eval"])]
        split: String,
    },
    /// Run the staged training pipeline.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Interrupt at `<stage index>:<step>` and checkpoint mid-stage.
        #[arg(long)]
        stop_at: Option<String>,
    },
    /// Generate an image from a prompt.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
        /// Image file name inside the output directory.
        #[arg(long, default_value = "generated.ppm")]
        output: String,
    },
    /// Answer a question about a PPM image.
    Answer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Compositional generation score and understanding accuracy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompts_per_category: Option<usize>,
        #[arg(long)]
        qa_items: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Latency profile and connector cost summary.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
    /// Connector ablation over seeds.
    Ablate {
        /// Comma-separated variant names; all when absent.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// List every tensor of a checkpoint with shape and checksum.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Domain(_) | Error::Dimension { .. } | Error::Index { .. } => 1,
        Error::Io(_) | Error::MissingFile(_) | Error::Format(_) | Error::Integrity { .. } | Error::Parse { .. } => 2,
        Error::Numerical { .. } | Error::EmptyLoss => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Numerical {
                last_good: Some(p), ..
            } = &e
            {
                eprintln!("last good checkpoint: {}", p.display());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Datagen { n, split } => cmd_datagen(g, n, &split),
        Command::Train { resume, stop_at } => cmd_train(g, resume.as_deref(), stop_at.as_deref()),
        Command::Generate {
            prompt,
            ckpt,
            steps,
            output,
        } => cmd_generate(g, &prompt, &ckpt, steps, &output),
        Command::Answer { image, question, ckpt } => cmd_answer(g, &image, &question, &ckpt),
        Command::Eval {
            ckpt,
            prompts_per_category,
            qa_items,
            steps,
        } => cmd_eval(g, &ckpt, prompts_per_category, qa_items, steps),
        Command::Bench { ckpt, repeats } => cmd_bench(g, &ckpt, repeats),
        Command::Ablate { variants, seeds } => cmd_ablate(g, &variants, seeds),
        Command::Inspect { ckpt } => cmd_inspect(g, &ckpt),
    }
}

fn resolve_config(g: &Global) -> Result<TrainConfig> {
    let mut cfg = match &g.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the output directory and echoes the resolved configuration.
fn prepare_out(g: &Global, cfg: &TrainConfig) -> Result<PathBuf> {
    fs::create_dir_all(&g.out_dir)?;
    fs::write(g.out_dir.join("config.toml"), cfg.echo())?;
    Ok(g.out_dir.clone())
}

/// Loads a checkpoint; its embedded configuration is the resolved one.
fn load_ckpt(g: &Global, path: &Path) -> Result<(Checkpoint, PathBuf)> {
    let ck = checkpoint::load(path)?;
    let out = prepare_out(g, &ck.config)?;
    Ok((ck, out))
}

fn cmd_datagen(g: &Global, n: usize, split: &str) -> Result<()> {
    let cfg = resolve_config(g)?;
    let out = prepare_out(g, &cfg)?;
    let split = if split == "eval" { Split::Eval } else { Split::Train };
    let (manifest, records) = write_dataset(&out, n, cfg.seed, split)?;
    let mut hist = [0usize; mcpflow_core::datagen::MAX_OBJECTS + 1];
    for r in &records {
        hist[r.meta.len()] += 1;
    }
    let mut rep = Report::new("datagen.jsonl");
    rep.line(format!("wrote {} quadruplets to {}", records.len(), manifest.display()));
    for (k, c) in hist.iter().enumerate().skip(1) {
        rep.line(format!("  {k} object(s): {c}"));
    }
    rep.record(json!({
        "kind": "datagen",
        "records": records.len(),
        "seed": cfg.seed,
        "split": if split == Split::Eval { "eval" } else { "train" },
        "manifest": manifest.file_name().map(|f| f.to_string_lossy().into_owned()),
        "objects_histogram": &hist[1..],
    }));
    rep.emit(&out, g.quiet)?;
    Ok(())
}

fn parse_stop_at(s: &str) -> Result<Progress> {
    let bad = || Error::Config(format!("--stop-at expects `<stage index>:<step>`, got `{s}`"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok(Progress {
        stage_index: a.trim().parse().map_err(|_| bad())?,
        stage_step: b.trim().parse().map_err(|_| bad())?,
    })
}

fn cmd_train(g: &Global, resume: Option<&Path>, stop_at: Option<&str>) -> Result<()> {
    let opts = PipelineOptions {
        out_dir: Some(g.out_dir.clone()),
        stop_at: stop_at.map(parse_stop_at).transpose()?,
    };
    let quiet = g.quiet;
    let progress = |r: &LogRecord| {
        if quiet {
            return;
        }
        match r {
            LogRecord::Epoch(e) => println!(
                "{:<9} epoch {:>3}  loss {:.5}  l_diff {:.5}  l_lang {:.5}",
                e.stage.name(),
                e.epoch,
                e.mean_loss,
                e.mean_diff,
                e.mean_lang
            ),
            LogRecord::Eval(e) => println!(
                "eval after {:<9} geneval {:.3}  understanding {:.3}",
                e.after.name(),
                e.geneval.overall,
                e.understanding
            ),
            LogRecord::Step(_) => {}
        }
    };
    let res: PipelineResult = match resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            resume_pipeline(ck, &opts, progress)?
        }
        None => {
            let cfg = resolve_config(g)?;
            run_pipeline(&cfg, &opts, progress)?
        }
    };
    let mut rep = Report::new("train_summary.jsonl");
    rep.line(format!(
        "{:<9} {:>7} {:>10} {:>8} {:>8} {:>10}",
        "stage", "steps", "final loss", "tau0", "tau1", "trainable"
    ));
    for s in &res.stages {
        let last = s.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN);
        rep.line(format!(
            "{:<9} {:>7} {:>10.5} {:>8.4} {:>8.4} {:>10}",
            s.name.name(),
            s.steps.len(),
            last,
            s.tau_start,
            s.tau_end,
            s.trainable_scalars
        ));
        rep.record(json!({
            "kind": "stage",
            "stage": s.name.name(),
            "steps": s.steps.len(),
            "final_loss": last,
            "tau_start": s.tau_start,
            "tau_end": s.tau_end,
            "trainable_scalars": s.trainable_scalars,
        }));
    }
    for e in &res.evals {
        rep.record(e.to_json());
    }
    for c in &res.checkpoints {
        rep.line(format!("checkpoint {}", c.display()));
    }
    if !res.finished {
        rep.line(format!(
            "interrupted at stage {} step {}",
            res.progress.stage_index, res.progress.stage_step
        ));
    }
    rep.record(json!({
        "kind": "progress",
        "finished": res.finished,
        "stage_index": res.progress.stage_index,
        "stage_step": res.progress.stage_step,
    }));
    rep.emit(&g.out_dir, g.quiet)?;
    Ok(())
}

fn cmd_generate(g: &Global, prompt: &str, ckpt: &Path, steps: usize, output: &str) -> Result<()> {
    let (ck, out) = load_ckpt(g, ckpt)?;
    let vocab = Vocab::standard();
    let seed = g.seed.unwrap_or(0);
    let gen = generate(&ck.models, &vocab.prompt_tokens(prompt), &SamplerConfig { steps, seed })?;
    let path = out.join(output);
    gen.image.write_ppm(&path)?;
    let t = &gen.timing;
    let sidecar = json!({
        "kind": "generation",
        "prompt": prompt,
        "seed": seed,
        "steps": steps,
        "velocity_evals": gen.velocity_evals,
        "image": output,
        "timing": {
            "vlm_ms": t.vlm_ms,
            "mcp_ms": t.mcp_ms,
            "dit_ms": t.dit_ms(),
            "dit_step_ms": t.dit_step_ms,
            "decode_ms": t.decode_ms,
            "total_ms": t.total_ms,
        },
    });
    fs::write(path.with_extension("json"), format!("{sidecar}\n"))?;
    if !g.quiet {
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_answer(g: &Global, image: &Path, question: &str, ckpt: &Path) -> Result<()> {
    let img = Image::read_ppm(image)?;
    let (ck, out) = load_ckpt(g, ckpt)?;
    let answer = greedy_answer(&ck.models, &Vocab::standard(), &img, question)?;
    let mut rep = Report::new("answer.jsonl");
    rep.line(&answer);
    rep.record(json!({
        "kind": "answer",
        "image": image.display().to_string(),
        "question": question,
        "answer": answer,
    }));
    rep.emit(&out, g.quiet)?;
    Ok(())
}

fn cmd_eval(
    g: &Global,
    ckpt: &Path,
    per_category: Option<usize>,
    qa_items: Option<usize>,
    steps: Option<usize>,
) -> Result<()> {
    let (ck, out) = load_ckpt(g, ckpt)?;
    let mut e = ck.config.eval.clone();
    e.prompts_per_category = per_category.unwrap_or(e.prompts_per_category);
    e.qa_items = qa_items.unwrap_or(e.qa_items);
    e.sampler_steps = steps.unwrap_or(e.sampler_steps);
    if let Some(s) = g.seed {
        e.seed = s;
    }
    if e.prompts_per_category == 0 || e.qa_items == 0 || e.sampler_steps == 0 {
        return Err(Error::Config("evaluation sizes and steps must be positive".into()));
    }
    let vocab = Vocab::standard();
    let gen = mini_geneval(&ck.models, &vocab, e.prompts_per_category, e.seed, e.sampler_steps);
    let items = eval_qa_items(e.qa_items, e.seed ^ 0x5155_4553);
    let und = understanding_accuracy(&ck.models, &vocab, &items);
    let mut rep = Report::new("metrics.jsonl");
    rep.line(format!("{:<14} {:>7}", "metric", "score"));
    for (c, s) in &gen.per_category {
        rep.line(format!("{:<14} {:>7.3}", c.name(), s));
        rep.record(json!({"kind": "geneval", "category": c.name(), "score": s, "prompts": e.prompts_per_category}));
    }
    rep.line(format!("{:<14} {:>7.3}", "overall", gen.overall));
    rep.line(format!("{:<14} {:>7.3}", "understanding", und));
    rep.record(json!({"kind": "geneval_overall", "score": gen.overall}));
    rep.record(json!({"kind": "understanding", "score": und, "items": e.qa_items}));
    rep.emit(&out, g.quiet)?;
    Ok(())
}

fn cmd_bench(g: &Global, ckpt: &Path, repeats: usize) -> Result<()> {
    if repeats == 0 {
        return Err(Error::Config("--repeats must be at least 1".into()));
    }
    let (ck, out) = load_ckpt(g, ckpt)?;
    let s = bench::run_bench(&ck.models, repeats, g.seed.unwrap_or(0))?;
    let mut rep = Report::new("bench.jsonl");
    rep.line(format!(
        "{:<24} {:<24} {:<24}",
        "vision encode (ms)", "TTFT (ms)", "generation 20 steps (ms)"
    ));
    let cols = [
        ("vision_encode", &s.vision_ms),
        ("ttft", &s.ttft_ms),
        ("generation", &s.generation_ms),
    ];
    let cells: Vec<String> = cols
        .iter()
        .map(|(_, xs)| {
            let (m, sd) = mean_sd(xs);
            format!("{m:.3} ± {sd:.3}")
        })
        .collect();
    rep.line(format!("{:<24} {:<24} {:<24}", cells[0], cells[1], cells[2]));
    for (name, xs) in cols {
        let (m, sd) = mean_sd(xs);
        rep.record(json!({"kind": "latency", "column": name, "mean_ms": m, "sd_ms": sd, "repeats": xs.len()}));
    }

    let cfg = &ck.models.cfg;
    let mcp_total: f64 = s.mcp_ms.iter().sum();
    let gen_total: f64 = s.generation_ms.iter().sum();
    let fraction = mcp_total / gen_total;
    let mlp_params = mlp_connector_param_count(cfg.vlm.d_vlm, cfg.mcp.d_cond);
    let flops = flop_estimate(s.prompt_tokens, &cfg.mcp);
    let connector_flops = match cfg.connector {
        ConnectorKind::Mcp => flops.total,
        ConnectorKind::Mlp => flops.reference_mlp_total,
    };
    rep.line(format!(
        "connector {}: {} params (MLP reference {}), {} FLOPs over {} tokens (MLP reference {}), {:.4} ms = {:.2}% of generation",
        cfg.connector.name(),
        cfg.connector_param_count(),
        mlp_params,
        connector_flops,
        s.prompt_tokens,
        flops.reference_mlp_total,
        mcp_total / s.mcp_ms.len() as f64,
        100.0 * fraction
    ));
    rep.record(json!({
        "kind": "connector",
        "connector": cfg.connector.name(),
        "params": cfg.connector_param_count(),
        "mlp_reference_params": mlp_params,
        "tokens": s.prompt_tokens,
        "flops": connector_flops,
        "mlp_reference_flops": flops.reference_mlp_total,
        "mean_ms": mcp_total / s.mcp_ms.len() as f64,
        "fraction_of_generation": fraction,
    }));
    rep.emit(&out, g.quiet)?;
    Ok(())
}

fn cmd_ablate(g: &Global, names: &[String], seeds: Vec<u64>) -> Result<()> {
    let cfg = resolve_config(g)?;
    let out = prepare_out(g, &cfg)?;
    let variants = if names.is_empty() {
        Variant::all()
    } else {
        names.iter().map(|n| Variant::parse(n.trim())).collect::<Result<Vec<_>>>()?
    };
    let acfg = AblationConfig::from_train(&cfg, seeds);
    let report = ablation_run(&variants, &acfg, |_| {})?;
    let mut rep = Report::new("ablation.jsonl");
    rep.table = report.table();
    for r in &report.rows {
        rep.record(r.to_json());
    }
    rep.emit(&out, g.quiet)?;
    Ok(())
}

fn cmd_inspect(g: &Global, ckpt: &Path) -> Result<()> {
    let bytes = fs::read(ckpt).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(ckpt.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let (progress, config, tensors) = checkpoint::read_tensors(&bytes)?;
    let cfg = TrainConfig::parse(&config)?;
    let out = prepare_out(g, &cfg)?;
    let mut rep = Report::new("inspect.jsonl");
    for l in progress.lines() {
        rep.line(format!("# {l}"));
    }
    rep.line(format!("{:<48} {:<14} {:>8} {:>10}", "tensor", "shape", "numel", "crc32"));
    for (name, t) in &tensors {
        let crc = checkpoint::tensor_checksum(name, t);
        rep.line(format!(
            "{:<48} {:<14} {:>8} {:>10}",
            name,
            format!("{:?}", t.shape()),
            t.numel(),
            format!("{crc:08x}")
        ));
        rep.record(json!({"kind": "tensor", "name": name, "shape": t.shape(), "crc32": format!("{crc:08x}")}));
    }
    rep.emit(&out, g.quiet)?;
    Ok(())
}
