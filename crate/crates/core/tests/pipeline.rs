use mcpflow_core::params::Component;
use mcpflow_core::trainer::checkpoint;
use mcpflow_core::trainer::config::TrainConfig;
use mcpflow_core::trainer::pipeline::{read_log, run_pipeline, stage_checkpoint_name, PipelineOptions, LOG_FILE};
use mcpflow_core::trainer::stage::StageName;

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = 21;
    for s in &mut cfg.stages {
        s.dataset_size = 8;
        s.epochs = 1;
        s.batch_size = 4;
    }
    cfg.eval.after = vec![StageName::Sft];
    cfg.eval.prompts_per_category = 2;
    cfg.eval.qa_items = 6;
    cfg.eval.sampler_steps = 4;
    cfg
}

#[test]
fn stages_anneal_and_isolate_their_components() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let res = run_pipeline(
        &cfg,
        &PipelineOptions {
            out_dir: Some(dir.path().to_path_buf()),
            stop_at: None,
        },
        |_| {},
    )
    .unwrap();
    assert!(res.finished);
    assert_eq!(res.stages.len(), 4);
    for s in &res.stages {
        assert_eq!(s.tau_start, cfg.model.mcp.tau0);
        assert_eq!(s.tau_end, cfg.model.mcp.tau_min);
    }
    assert!(res.eval_after(StageName::Sft).is_some());

    let load = |i: usize, n: StageName| checkpoint::load(&dir.path().join(stage_checkpoint_name(i, n))).unwrap();
    let sft = load(2, StageName::Sft);
    let unified = load(3, StageName::Unified);
    for ((_, a), (_, b)) in sft.models.store.iter().zip(unified.models.store.iter()) {
        if a.component == Component::Codec {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    let log = read_log(&dir.path().join(LOG_FILE)).unwrap();
    let steps: Vec<_> = log.iter().filter(|r| r["kind"] == "step").collect();
    assert_eq!(steps.len(), 8);
    for r in steps {
        assert!(r["loss"].as_f64().unwrap().is_finite());
        assert!(r["grad_norm"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn config_file_drives_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let text = "seed = 4\npipeline.stages = [\"align\"]\nstage.align.dataset_size = 4\n\
                stage.align.epochs = 1\nstage.align.batch_size = 2\neval.after = []\n";
    let path = dir.path().join("c.toml");
    std::fs::write(&path, text).unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    let res = run_pipeline(&cfg, &PipelineOptions::default(), |_| {}).unwrap();
    assert_eq!(res.stages.len(), 1);
    assert_eq!(res.stages[0].steps.len(), 2);
    assert!(res.evals.is_empty());
    assert_eq!(TrainConfig::parse(&cfg.echo()).unwrap(), cfg);
}
