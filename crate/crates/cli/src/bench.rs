//! Latency profile of a trained model: vision encoding, time to first
//! answer token, and full generation, each after one untimed warm-up.

use std::time::Instant;

use mcpflow_core::backbones::ModelSet;
use mcpflow_core::datagen::render::render;
use mcpflow_core::datagen::text::{Vocab, BOS};
use mcpflow_core::datagen::{gen_sample, Split};
use mcpflow_core::flowsampler::{generate, SamplerConfig, DEFAULT_STEPS};
use mcpflow_core::params::Graph;
use mcpflow_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, Default)]
pub struct BenchSamples {
    pub vision_ms: Vec<f64>,
    pub ttft_ms: Vec<f64>,
    pub generation_ms: Vec<f64>,
    /// Connector share of each timed generation.
    pub mcp_ms: Vec<f64>,
    /// Length of the benchmarked prompt, for the connector FLOP summary.
    pub prompt_tokens: usize,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Sections run back to back, never interleaved, so each measures alone.
pub fn run_bench(models: &ModelSet, repeats: usize, seed: u64) -> Result<BenchSamples> {
    let vocab = Vocab::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = gen_sample(&mut rng, Split::Eval, 2);
    let image = render(&sample.spec);
    let prompt = vocab.prompt_tokens(&sample.caption);
    let question = vocab.question_tokens(&sample.question);
    let mut out = BenchSamples {
        prompt_tokens: prompt.len(),
        ..BenchSamples::default()
    };

    // Image tokens through the codec and every VLM block.
    for i in 0..=repeats {
        let t = Instant::now();
        let latent = models.codec.encode(&models.store, &image)?;
        let mut g = Graph::new(&models.store);
        let img = g.tape.leaf_ref(&latent, false);
        let h = models.vlm.forward(&mut g, &[BOS], Some(img), false)?;
        std::hint::black_box(g.tape.value(h.layers[h.layers.len() - 1]));
        if i > 0 {
            out.vision_ms.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }

    // Encode, prefill, then one decode step; there is no KV cache, so the
    // decode step is a full forward over the extended sequence.
    for i in 0..=repeats {
        let t = Instant::now();
        let latent = models.codec.encode(&models.store, &image)?;
        let mut tokens = question.clone();
        let logits = models.vlm.logits(&models.store, &tokens, Some(&latent))?;
        tokens.push(argmax(logits.row(logits.rows() - 1)));
        let logits = models.vlm.logits(&models.store, &tokens, Some(&latent))?;
        std::hint::black_box(argmax(logits.row(logits.rows() - 1)));
        if i > 0 {
            out.ttft_ms.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }

    for i in 0..=repeats {
        let cfg = SamplerConfig {
            steps: DEFAULT_STEPS,
            seed: seed.wrapping_add(i as u64),
        };
        let gen = generate(models, &prompt, &cfg)?;
        if i > 0 {
            out.generation_ms.push(gen.timing.total_ms);
            out.mcp_ms.push(gen.timing.mcp_ms);
        }
    }
    Ok(out)
}
