//! Fixed lossless latent codec: patchify followed by a signed permutation of
//! the patch features. Both steps are exact in floating point.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Tensor;
use crate::params::{Component, ParamId, ParamStore};

/// The mixing matrix is independent of the model seed.
const CODEC_SEED: u64 = 0x5EED_C0DE;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            height: 16,
            width: 16,
            channels: 3,
            patch: 4,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 || self.channels == 0 {
            return Err(Error::config(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.height, self.width, self.patch
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn latent_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

#[derive(Clone, Debug)]
pub struct ToyCodec {
    pub cfg: CodecConfig,
    pub mix: ParamId,
}

/// Random signed permutation matrix: orthogonal with entries in {-1, 0, 1}.
pub fn signed_permutation(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut t = Tensor::zeros(&[n, n]);
    for (i, &j) in perm.iter().enumerate() {
        t.data_mut()[i * n + j] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
    t
}

impl ToyCodec {
    pub fn new(store: &mut ParamStore, cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(CODEC_SEED);
        let mix = store.add("codec.mix", signed_permutation(cfg.latent_dim(), &mut rng), Component::Codec)?;
        Ok(ToyCodec { cfg, mix })
    }

    fn check(&self, img: &Image) -> Result<()> {
        let c = &self.cfg;
        if img.height != c.height || img.width != c.width || img.channels != c.channels {
            return Err(Error::dim(
                "codec_encode",
                &[c.height, c.width, c.channels],
                &[img.height, img.width, img.channels],
            ));
        }
        Ok(())
    }

    /// Patch-major flattening: token `pr·(W/p) + pc`, features in `(y, x, c)` order.
    pub fn patchify(&self, img: &Image) -> Result<Tensor> {
        self.check(img)?;
        let c = &self.cfg;
        let (p, gw) = (c.patch, c.width / c.patch);
        let mut out = Tensor::zeros(&[c.tokens(), c.latent_dim()]);
        let d = c.latent_dim();
        for t in 0..c.tokens() {
            let (pr, pc) = (t / gw, t % gw);
            let mut f = 0;
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c.channels {
                        out.data_mut()[t * d + f] = img.get(pr * p + y, pc * p + x, ch);
                        f += 1;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn unpatchify(&self, patches: &Tensor) -> Result<Image> {
        let c = &self.cfg;
        if patches.shape() != [c.tokens(), c.latent_dim()] {
            return Err(Error::dim("codec_decode", &[c.tokens(), c.latent_dim()], patches.shape()));
        }
        let (p, gw) = (c.patch, c.width / c.patch);
        let mut img = Image::black(c.height, c.width, c.channels);
        for t in 0..c.tokens() {
            let (pr, pc) = (t / gw, t % gw);
            let row = patches.row(t);
            let mut f = 0;
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c.channels {
                        img.set(pr * p + y, pc * p + x, ch, row[f]);
                        f += 1;
                    }
                }
            }
        }
        Ok(img)
    }

    pub fn encode(&self, store: &ParamStore, img: &Image) -> Result<Tensor> {
        let p = self.patchify(img)?;
        mix(&p, store.value(self.mix), false)
    }

    /// Inverse of [`encode`](Self::encode); values are not clamped.
    pub fn decode(&self, store: &ParamStore, latent: &Tensor) -> Result<Image> {
        let p = mix(latent, store.value(self.mix), true)?;
        self.unpatchify(&p)
    }
}

/// `x M` or `x Mᵀ` for a signed permutation, evaluated as a gather so each
/// output is a single signed copy.
fn mix(x: &Tensor, m: &Tensor, transpose: bool) -> Result<Tensor> {
    let n = m.rows();
    if x.cols() != n {
        return Err(Error::dim("codec_mix", x.shape(), m.shape()));
    }
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        for j in 0..n {
            let s = m.at(i, j);
            if s == 0.0 {
                continue;
            }
            // forward: out[:, j] = s·x[:, i]; transpose: out[:, i] = s·x[:, j]
            let (src, dst) = if transpose { (j, i) } else { (i, j) };
            for r in 0..x.rows() {
                out.data_mut()[r * n + dst] = s * x.at(r, src);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codec() -> (ParamStore, ToyCodec) {
        let mut s = ParamStore::new();
        let c = ToyCodec::new(&mut s, CodecConfig::default()).unwrap();
        (s, c)
    }

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::black(16, 16, 3);
        for v in img.data_mut() {
            *v = rng.random_range(0..256) as f64 / 255.0;
        }
        img
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (s, c) = codec();
        for seed in 0..5 {
            let img = random_image(seed);
            let back = c.decode(&s, &c.encode(&s, &img).unwrap()).unwrap();
            assert!(img.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn linear_and_zero_preserving() {
        let (s, c) = codec();
        let z = c.encode(&s, &Image::black(16, 16, 3)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let (a, b) = (random_image(7), random_image(8));
        let mut sum = a.clone();
        for (x, y) in sum.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
        let ea = c.encode(&s, &a).unwrap();
        let eb = c.encode(&s, &b).unwrap();
        let es = c.encode(&s, &sum).unwrap();
        let added = ea.zip_map(&eb, |x, y| x + y).unwrap();
        assert!(es.max_abs_diff(&added) < 1e-12);
    }

    #[test]
    fn mix_matrix_is_orthogonal() {
        let (s, c) = codec();
        let m = s.value(c.mix);
        let n = m.rows();
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| m.at(i, k) * m.at(j, k)).sum();
                assert_eq!(dot, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn indivisible_dims_rejected() {
        let mut s = ParamStore::new();
        let cfg = CodecConfig {
            height: 15,
            ..Default::default()
        };
        assert!(matches!(ToyCodec::new(&mut s, cfg), Err(Error::Config(_))));
    }
}
