//! Training losses: flow-matching interpolation and velocity target, the
//! weighted velocity regression, the masked answer loss and their weighted
//! sum.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::numerics::Tape;

pub const SIGMA_LO: f64 = 0.001;
pub const SIGMA_HI: f64 = 0.999;

/// Noise-level weighting `w(σ)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmaWeighting {
    Constant,
    /// `1 / (σ² + 0.01)`
    InverseSquare,
}

impl SigmaWeighting {
    pub fn weight(self, sigma: f64) -> f64 {
        match self {
            SigmaWeighting::Constant => 1.0,
            SigmaWeighting::InverseSquare => 1.0 / (sigma * sigma + 0.01),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SigmaWeighting::Constant => "constant",
            SigmaWeighting::InverseSquare => "inverse-square",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(SigmaWeighting::Constant),
            "inverse-square" => Ok(SigmaWeighting::InverseSquare),
            _ => Err(Error::config(format!("unknown sigma weighting `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_lang: f64,
    pub lambda_diff: f64,
    pub w_sigma: SigmaWeighting,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_lang: 1.0,
            lambda_diff: 1.0,
            w_sigma: SigmaWeighting::Constant,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_lang) || !ok(self.lambda_diff) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if self.lambda_lang == 0.0 && self.lambda_diff == 0.0 {
            return Err(Error::config("loss weights cannot both be zero"));
        }
        Ok(())
    }
}

/// One noised training latent.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x: Tensor,
    pub eps: Tensor,
    pub sigma: f64,
    pub x_sigma: Tensor,
    pub v_star: Tensor,
}

impl FlowSample {
    /// `x_σ = (1-σ) x + σ ε`, `v* = ε - x`.
    pub fn new(x: Tensor, eps: Tensor, sigma: f64) -> Result<Self> {
        let x_sigma = x.zip_map(&eps, |a, e| (1.0 - sigma) * a + sigma * e)?;
        let v_star = eps.zip_map(&x, |e, a| e - a)?;
        Ok(FlowSample {
            x,
            eps,
            sigma,
            x_sigma,
            v_star,
        })
    }
}

pub fn standard_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Training noise level, uniform on `[SIGMA_LO, SIGMA_HI]`.
pub fn sample_sigma(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(SIGMA_LO..=SIGMA_HI)
}

/// Draws `σ` then `ε` from `rng`; `sigma` overrides the draw when given.
pub fn flow_sample(x: &Tensor, rng: &mut ChaCha8Rng, sigma: Option<f64>) -> Result<FlowSample> {
    if !x.is_finite() {
        return Err(Error::Domain("clean latent contains non-finite values".into()));
    }
    let s = sample_sigma(rng);
    let eps = standard_normal(rng, x.shape());
    FlowSample::new(x.clone(), eps, sigma.unwrap_or(s))
}

/// `w(σ) · mean((pred - v*)²)`.
pub fn flow_matching_loss(tape: &mut Tape, pred: Var, fs: &FlowSample, lw: &LossWeights) -> Result<Var> {
    if tape.shape(pred) != fs.v_star.shape() {
        return Err(Error::dim("flow_matching_loss", tape.shape(pred), fs.v_star.shape()));
    }
    let target = tape.constant(fs.v_star.clone());
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let m = tape.mean(sq);
    Ok(tape.scale(m, lw.w_sigma.weight(fs.sigma)))
}

/// Masked next-token cross-entropy over the answer positions.
pub fn i2t_loss(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract("answer mask selects no positions".into()));
    }
    tape.cross_entropy(logits, targets, mask)
}

/// `λ_lang · l_lang + λ_diff · l_diff`.
pub fn unified_loss(tape: &mut Tape, l_lang: Var, l_diff: Var, lw: &LossWeights) -> Result<Var> {
    let a = tape.scale(l_lang, lw.lambda_lang);
    let b = tape.scale(l_diff, lw.lambda_diff);
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn flow_sample_examples() {
        let x = Tensor::vector(vec![2.0]);
        let fs = FlowSample::new(x.clone(), Tensor::vector(vec![0.0]), 0.5).unwrap();
        assert_eq!(fs.x_sigma.data(), &[1.0]);
        assert_eq!(fs.v_star.data(), &[-2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let x = standard_normal(&mut rng, &[3, 4]);
        let fs0 = flow_sample(&x, &mut rng, Some(0.0)).unwrap();
        assert_eq!(fs0.x_sigma, x);
        assert_eq!(fs0.v_star, fs0.eps.zip_map(&x, |e, a| e - a).unwrap());
        let fs1 = flow_sample(&x, &mut rng, Some(1.0)).unwrap();
        assert_eq!(fs1.x_sigma, fs1.eps);
        let bad = Tensor::vector(vec![f64::NAN]);
        assert!(flow_sample(&bad, &mut rng, None).is_err());
    }

    #[test]
    fn sigma_draws_stay_inside_training_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for _ in 0..10_000 {
            let s = sample_sigma(&mut rng);
            assert!((SIGMA_LO..=SIGMA_HI).contains(&s));
        }
    }

    fn fm(pred: &Tensor, fs: &FlowSample, lw: &LossWeights) -> f64 {
        let mut t = Tape::new();
        let p = t.constant(pred.clone());
        let l = flow_matching_loss(&mut t, p, fs, lw).unwrap();
        t.value(l).item()
    }

    #[test]
    fn flow_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let x = standard_normal(&mut rng, &[4, 3]);
        let fs = flow_sample(&x, &mut rng, None).unwrap();
        let lw = LossWeights::default();
        assert_eq!(fm(&fs.v_star, &fs, &lw), 0.0);
        let c = 0.375;
        let shifted = fs.v_star.map(|v| v + c);
        assert!((fm(&shifted, &fs, &lw) - c * c).abs() < 1e-12);
        let inv = LossWeights {
            w_sigma: SigmaWeighting::InverseSquare,
            ..lw
        };
        let ratio = fm(&shifted, &fs, &inv) / fm(&shifted, &fs, &lw);
        assert!((ratio - SigmaWeighting::InverseSquare.weight(fs.sigma)).abs() < 1e-9);
        let mut t = Tape::new();
        let p = t.constant(Tensor::zeros(&[2, 3]));
        assert!(flow_matching_loss(&mut t, p, &fs, &lw).is_err());
    }

    #[test]
    fn flow_loss_gradient_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let x = standard_normal(&mut rng, &[4, 3]);
        let fs = flow_sample(&x, &mut rng, None).unwrap();
        let pred = standard_normal(&mut rng, &[4, 3]);
        for lw in [
            LossWeights::default(),
            LossWeights {
                w_sigma: SigmaWeighting::InverseSquare,
                ..Default::default()
            },
        ] {
            let mut t = Tape::new();
            let p = t.leaf(pred.clone(), true);
            let l = flow_matching_loss(&mut t, p, &fs, &lw).unwrap();
            let g = t.backward(l).unwrap();
            let w = lw.w_sigma.weight(fs.sigma);
            for i in 0..pred.numel() {
                let closed = 2.0 * w * (pred.data()[i] - fs.v_star.data()[i]) / pred.numel() as f64;
                assert!((g.get(p).unwrap().data()[i] - closed).abs() < 1e-12);
                let h = 1e-5;
                let mut up = pred.clone();
                up.data_mut()[i] += h;
                let mut dn = pred.clone();
                dn.data_mut()[i] -= h;
                let fd = (fm(&up, &fs, &lw) - fm(&dn, &fs, &lw)) / (2.0 * h);
                assert!((fd - closed).abs() <= 1e-6 * closed.abs().max(1.0));
            }
        }
    }

    fn ce(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
        let mut t = Tape::new();
        let l = t.constant(logits.clone());
        let v = i2t_loss(&mut t, l, targets, mask)?;
        Ok(t.value(v).item())
    }

    #[test]
    fn answer_loss_examples_and_masking() {
        let uniform = Tensor::zeros(&[3, 16]);
        let v = ce(&uniform, &[1, 2, 3], &[false, true, true]).unwrap();
        assert!((v - 16f64.ln()).abs() < 1e-12);
        let mut sharp = Tensor::zeros(&[1, 4]);
        sharp.data_mut()[2] = 20.0;
        assert!(ce(&sharp, &[2], &[true]).unwrap() < 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let logits = standard_normal(&mut rng, &[5, 7]);
        let mask = [false, false, true, false, true];
        let base = ce(&logits, &[0, 1, 2, 3, 4], &mask).unwrap();
        let mut edited = logits.clone();
        for j in 0..7 {
            edited.data_mut()[7 + j] += 3.0 * j as f64;
            edited.data_mut()[21 + j] -= 1.5;
        }
        assert_eq!(ce(&edited, &[0, 1, 2, 3, 4], &mask).unwrap(), base);
        assert!(matches!(ce(&logits, &[0; 5], &[false; 5]), Err(Error::Contract(_))));
    }

    fn combine(l: f64, d: f64, lw: &LossWeights) -> f64 {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(l));
        let b = t.constant(Tensor::scalar(d));
        let u = unified_loss(&mut t, a, b, lw).unwrap();
        t.value(u).item()
    }

    #[test]
    fn unified_examples_and_linearity() {
        let lw = LossWeights::default();
        assert_eq!(combine(0.5, 0.25, &lw), 0.75);
        assert_eq!(combine(0.0, 0.0, &lw), 0.0);
        let lang_only = LossWeights {
            lambda_lang: 0.7,
            lambda_diff: 0.0,
            ..lw
        };
        assert_eq!(combine(0.9, 123.0, &lang_only), 0.7 * 0.9);
        // slope in λ_diff equals l_diff
        let at = |ld: f64| {
            combine(
                0.3,
                0.8,
                &LossWeights {
                    lambda_diff: ld,
                    ..lw
                },
            )
        };
        assert!(((at(2.0) - at(0.5)) / 1.5 - 0.8).abs() < 1e-12);
        assert!(LossWeights {
            lambda_lang: 0.0,
            lambda_diff: 0.0,
            ..lw
        }
        .validate()
        .is_err());
    }

    #[test]
    fn unified_gradient_reaches_both_branches() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(0.4), true);
        let b = t.leaf(Tensor::scalar(0.2), true);
        let lw = LossWeights {
            lambda_lang: 0.3,
            lambda_diff: 2.0,
            ..Default::default()
        };
        let u = unified_loss(&mut t, a, b, &lw).unwrap();
        let g = t.backward(u).unwrap();
        assert_eq!(g.get(a).unwrap().item(), 0.3);
        assert_eq!(g.get(b).unwrap().item(), 2.0);
    }
}
