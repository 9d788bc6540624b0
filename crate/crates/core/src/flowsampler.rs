//! Euler integration of the learned velocity field from noise (σ = 1) to a
//! clean latent (σ = 0), and the prompt-to-image pipeline built on it.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbones::ModelSet;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Tensor;
use crate::objectives::standard_normal;
use crate::params::Graph;

pub const DEFAULT_STEPS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: DEFAULT_STEPS,
            seed: 0,
        }
    }
}

/// Linear grid `1 = σ_0 > σ_1 > … > σ_steps = 0`.
pub fn sigma_schedule(steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::config("sampler needs at least one step"));
    }
    Ok((0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect())
}

/// `x ← x + (σ_{i+1} − σ_i) · v(x, σ_i)` over consecutive grid points.
/// Fails on the first non-finite velocity, naming its step.
pub fn euler_integrate(
    x0: Tensor,
    schedule: &[f64],
    mut velocity: impl FnMut(&Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut x = x0;
    for (i, pair) in schedule.windows(2).enumerate() {
        let v = velocity(&x, pair[0])?;
        if !v.is_finite() {
            return Err(Error::Numerical {
                step: i,
                what: "velocity".into(),
                last_good: None,
            });
        }
        if v.shape() != x.shape() {
            return Err(Error::dim("euler_step", x.shape(), v.shape()));
        }
        let dt = pair[1] - pair[0];
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
    }
    Ok(x)
}

/// Seeded noise start followed by [`euler_integrate`] on the linear grid.
pub fn euler_sample(
    velocity: impl FnMut(&Tensor, f64) -> Result<Tensor>,
    shape: &[usize],
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = standard_normal(&mut rng, shape);
    euler_integrate(eps, &sigma_schedule(cfg.steps)?, velocity)
}

/// Wall-clock breakdown of one generation, in milliseconds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationTiming {
    pub vlm_ms: f64,
    pub mcp_ms: f64,
    pub dit_step_ms: Vec<f64>,
    pub decode_ms: f64,
    pub total_ms: f64,
}

impl GenerationTiming {
    pub fn dit_ms(&self) -> f64 {
        self.dit_step_ms.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub image: Image,
    pub latent: Tensor,
    pub velocity_evals: usize,
    pub timing: GenerationTiming,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Prompt → VLM → connector → Euler sampling → decode → clamp to [0, 1].
/// The connector runs at its end-of-training temperature.
pub fn generate(models: &ModelSet, prompt: &[usize], cfg: &SamplerConfig) -> Result<Generation> {
    let start = Instant::now();
    let store = &models.store;
    let mut g = Graph::new(store);
    let t = Instant::now();
    let out = models.vlm.forward(&mut g, prompt, None, false)?;
    let vlm_ms = ms(t);
    let t = Instant::now();
    let e = models.connector.forward(&mut g, &out.layers, models.cfg.mcp.tau_min)?;
    let cond = g.tape.value(e).clone();
    let mcp_ms = ms(t);
    drop(g);

    let shape = [models.cfg.dit.tokens, models.cfg.dit.latent_dim];
    let mut evals = 0;
    let mut steps_ms = Vec::with_capacity(cfg.steps);
    let latent = euler_sample(
        |x, sigma| {
            let t = Instant::now();
            evals += 1;
            let v = models.dit.velocity(store, x, sigma, &cond);
            steps_ms.push(ms(t));
            v
        },
        &shape,
        cfg,
    )?;
    let t = Instant::now();
    let image = models.codec.decode(store, &latent)?.clamped();
    let decode_ms = ms(t);
    Ok(Generation {
        image,
        latent,
        velocity_evals: evals,
        timing: GenerationTiming {
            vlm_ms,
            mcp_ms,
            dit_step_ms: steps_ms,
            decode_ms,
            total_ms: ms(start),
        },
    })
}
