use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mcpflow_core::backbones::ModelSet;
use mcpflow_core::trainer::checkpoint::{self, Checkpoint, Progress};
use mcpflow_core::trainer::config::TrainConfig;
use serde_json::Value;

fn mcpflow(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcpflow"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn fresh_checkpoint(dir: &Path) -> PathBuf {
    let cfg = TrainConfig::default();
    let ck = Checkpoint {
        models: ModelSet::new(cfg.model.clone(), 5).unwrap(),
        config: cfg,
        progress: Progress {
            stage_index: 0,
            stage_step: 0,
        },
        opt: None,
    };
    let path = dir.join("init.mobo");
    checkpoint::save(&ck, &path).unwrap();
    path
}

fn records(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn generate_is_deterministic_and_times_its_parts() {
    let dir = tempfile::tempdir().unwrap();
    let ck = fresh_checkpoint(dir.path());
    let ck = ck.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = mcpflow(out, &["--seed", "7", "generate", "--prompt", "a red circle", "--ckpt", ck]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        fs::read(a.join("generated.ppm")).unwrap(),
        fs::read(b.join("generated.ppm")).unwrap()
    );
    assert!(a.join("config.toml").exists());
    let side = &records(&a.join("generated.json"))[0];
    let t = &side["timing"];
    let parts = ["vlm_ms", "mcp_ms", "dit_ms", "decode_ms"].map(|k| t[k].as_f64().unwrap());
    let total = t["total_ms"].as_f64().unwrap();
    assert!(parts.iter().all(|&p| p > 0.0));
    assert!((parts.iter().sum::<f64>() - total).abs() <= 0.1 * total);
    assert_eq!(side["velocity_evals"], 20);

    let o = mcpflow(&a, &["generate", "--prompt", "a red circle", "--steps", "1", "--ckpt", ck]);
    assert!(o.status.success());
    assert_eq!(records(&a.join("generated.json"))[0]["velocity_evals"], 1);
}

#[test]
fn errors_map_to_documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = mcpflow(out, &["generate", "--prompt", "x", "--ckpt", "missing.mobo"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.mobo"));

    let ck = fresh_checkpoint(out);
    let bad = out.join("bad.ppm");
    fs::write(&bad, b"P6\n16 16\n255\nshort").unwrap();
    let o = mcpflow(
        out,
        &["answer", "--image", bad.to_str().unwrap(), "--question", "how many objects ?", "--ckpt", ck.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error:") && !err.contains("panicked"), "{err}");
    assert!(o.stdout.is_empty());

    assert_eq!(mcpflow(out, &["inspect", "--bogus"]).status.code(), Some(1));
    assert_eq!(mcpflow(out, &["ablate", "--variants", "mcp-K3"]).status.code(), Some(1));
    assert_eq!(mcpflow(out, &["bench", "--repeats", "0", "--ckpt", ck.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn inspect_lists_every_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let ck = fresh_checkpoint(dir.path());
    let o = mcpflow(dir.path(), &["inspect", "--ckpt", ck.to_str().unwrap()]);
    assert!(o.status.success());
    let recs = records(&dir.path().join("inspect.jsonl"));
    let models = checkpoint::load(&ck).unwrap().models;
    assert_eq!(recs.len(), models.store.len());
    assert!(recs.iter().all(|r| r["crc32"].as_str().unwrap().len() == 8));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("param:") && table.contains("crc32"));
}

#[test]
fn answer_eval_and_datagen_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = mcpflow(&out.join("data"), &["--seed", "3", "datagen", "--n", "12"]);
    assert!(o.status.success());
    let again = mcpflow(&out.join("data2"), &["--seed", "3", "datagen", "--n", "12"]);
    assert!(again.status.success());
    let manifest = fs::read(out.join("data/manifest.txt")).unwrap();
    assert_eq!(manifest, fs::read(out.join("data2/manifest.txt")).unwrap());

    let ck = fresh_checkpoint(out);
    let ck = ck.to_str().unwrap();
    let img = out.join("data/images/000000.ppm");
    let ask = || {
        mcpflow(
            out,
            &["answer", "--image", img.to_str().unwrap(), "--question", "how many objects ?", "--ckpt", ck],
        )
    };
    let (x, y) = (ask(), ask());
    assert!(x.status.success());
    assert_eq!(x.stdout, y.stdout);

    let o = mcpflow(
        out,
        &["eval", "--ckpt", ck, "--prompts-per-category", "1", "--qa-items", "4", "--steps", "2"],
    );
    assert_eq!(o.status.code(), Some(0));
    let recs = records(&out.join("metrics.jsonl"));
    assert_eq!(recs.iter().filter(|r| r["kind"] == "geneval").count(), 6);
    assert!(recs.iter().any(|r| r["kind"] == "understanding"));
}

#[test]
fn ablate_emits_a_variant_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "stage.pretrain.dataset_size = 4\nstage.pretrain.epochs = 1\nstage.pretrain.batch_size = 4\n\
         stage.align.dataset_size = 4\nstage.align.epochs = 1\nstage.align.batch_size = 4\n\
         eval.prompts_per_category = 1\neval.sampler_steps = 2\n",
    )
    .unwrap();
    let o = mcpflow(
        dir.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "ablate",
            "--variants",
            "mlp-connector,mcp-K4-learnable+CA",
            "--seeds",
            "1",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("variant"));
    assert!(table.contains("mlp-connector") && table.contains("mcp-K4-learnable+CA"));
    let recs = records(&dir.path().join("ablation.jsonl"));
    assert_eq!(recs.len(), 2);
    assert!(recs[0]["param_count"].as_u64().unwrap() > recs[1]["param_count"].as_u64().unwrap());
}
