//! Compositional generation scoring over six prompt categories, and
//! exact-match answer accuracy with greedy decoding.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::detector::{detect, DetectedObject};
use super::text::{Vocab, EOS};
use super::{caption_of, gen_sample, gen_scene_with, render, Color, SceneSpec, Shape, Split};
use crate::backbones::ModelSet;
use crate::error::Result;
use crate::flowsampler::{generate, SamplerConfig};
use crate::image::Image;
use crate::numerics::Tensor;

pub const DEFAULT_PROMPTS_PER_CATEGORY: usize = 50;
pub const ANSWER_CAP: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    SingleObject,
    TwoObject,
    Counting,
    Colors,
    Position,
    ColorAttr,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::SingleObject,
        Category::TwoObject,
        Category::Counting,
        Category::Colors,
        Category::Position,
        Category::ColorAttr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::SingleObject => "single_object",
            Category::TwoObject => "two_object",
            Category::Counting => "counting",
            Category::Colors => "colors",
            Category::Position => "position",
            Category::ColorAttr => "color_attr",
        }
    }

    /// Draws a held-out scene of this category.
    pub fn scene(self, rng: &mut ChaCha8Rng) -> SceneSpec {
        loop {
            let s = match self {
                Category::SingleObject | Category::Colors => gen_scene_with(rng, 1, random_attrs),
                Category::TwoObject | Category::Position => {
                    let shapes = sample(rng, 3, 2).into_vec();
                    let mut k = 0;
                    gen_scene_with(rng, 2, |rng| {
                        k += 1;
                        (Shape::ALL[shapes[k - 1]], Color::ALL[rng.random_range(0..4)])
                    })
                }
                Category::Counting => {
                    let n = rng.random_range(2..=3);
                    let (shape, color) = random_attrs(rng);
                    gen_scene_with(rng, n, |_| (shape, color))
                }
                Category::ColorAttr => {
                    let shapes = sample(rng, 3, 2).into_vec();
                    let colors = sample(rng, 4, 2).into_vec();
                    let mut k = 0;
                    gen_scene_with(rng, 2, |_| {
                        k += 1;
                        (Shape::ALL[shapes[k - 1]], Color::ALL[colors[k - 1]])
                    })
                }
            };
            if Split::Eval.admits(&caption_of(&s)) {
                return s;
            }
        }
    }

    /// Whether the detections satisfy the category's claim about `spec`.
    pub fn check(self, spec: &SceneSpec, found: &[DetectedObject]) -> bool {
        let objs = spec.objects();
        let has = |shape: Shape, color: Option<Color>| {
            found
                .iter()
                .any(|d| d.shape == Some(shape) && color.is_none_or(|c| d.color == c))
        };
        let first = |shape: Shape| found.iter().find(|d| d.shape == Some(shape));
        match self {
            Category::SingleObject => has(objs[0].shape, None),
            Category::Colors => has(objs[0].shape, Some(objs[0].color)),
            Category::TwoObject => objs.iter().all(|o| has(o.shape, None)),
            Category::ColorAttr => objs.iter().all(|o| has(o.shape, Some(o.color))),
            Category::Counting => found.iter().filter(|d| d.shape == Some(objs[0].shape)).count() == objs.len(),
            Category::Position => match (first(objs[0].shape), first(objs[1].shape)) {
                (Some(a), Some(b)) if objs[0].row() != objs[1].row() => a.row() < b.row(),
                (Some(a), Some(b)) => a.row() == b.row() && a.col() < b.col(),
                _ => false,
            },
        }
    }
}

fn random_attrs(rng: &mut ChaCha8Rng) -> (Shape, Color) {
    (Shape::ALL[rng.random_range(0..3)], Color::ALL[rng.random_range(0..4)])
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenevalReport {
    pub per_category: Vec<(Category, f64)>,
    pub overall: f64,
    pub prompts_per_category: usize,
}

impl GenevalReport {
    pub fn score(&self, c: Category) -> f64 {
        self.per_category
            .iter()
            .find(|(k, _)| *k == c)
            .map(|(_, s)| *s)
            .unwrap_or(0.0)
    }
}

/// One scored generation request.
#[derive(Clone, Debug)]
pub struct GenevalPrompt {
    pub category: Category,
    pub spec: SceneSpec,
    pub caption: String,
    pub sample_seed: u64,
}

pub fn geneval_prompts(per_category: usize, seed: u64) -> Vec<GenevalPrompt> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_category * Category::ALL.len());
    for c in Category::ALL {
        for _ in 0..per_category {
            let spec = c.scene(&mut rng);
            out.push(GenevalPrompt {
                category: c,
                caption: caption_of(&spec),
                spec,
                sample_seed: rng.random(),
            });
        }
    }
    out
}

/// Scores an arbitrary generator; a failed generation scores zero.
pub fn mini_geneval_with(
    per_category: usize,
    seed: u64,
    mut gen: impl FnMut(&GenevalPrompt) -> Result<Image>,
) -> GenevalReport {
    let prompts = geneval_prompts(per_category, seed);
    let mut per_category_scores = Vec::with_capacity(Category::ALL.len());
    for c in Category::ALL {
        let mut hits = 0;
        let mut total = 0;
        for p in prompts.iter().filter(|p| p.category == c) {
            total += 1;
            if let Ok(img) = gen(p) {
                if c.check(&p.spec, &detect(&img)) {
                    hits += 1;
                }
            }
        }
        per_category_scores.push((c, if total == 0 { 0.0 } else { hits as f64 / total as f64 }));
    }
    let overall = per_category_scores.iter().map(|(_, s)| s).sum::<f64>() / Category::ALL.len() as f64;
    GenevalReport {
        per_category: per_category_scores,
        overall,
        prompts_per_category: per_category,
    }
}

pub fn mini_geneval(models: &ModelSet, vocab: &Vocab, per_category: usize, seed: u64, steps: usize) -> GenevalReport {
    mini_geneval_with(per_category, seed, |p| {
        let cfg = SamplerConfig {
            steps,
            seed: p.sample_seed,
        };
        Ok(generate(models, &vocab.prompt_tokens(&p.caption), &cfg)?.image)
    })
}

/// A held-out understanding item.
#[derive(Clone, Debug)]
pub struct QaItem {
    pub image: Image,
    pub question: String,
    pub answer: String,
}

pub fn eval_qa_items(n: usize, seed: u64) -> Vec<QaItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s = gen_sample(&mut rng, Split::Eval, 1);
            QaItem {
                image: render(&s.spec),
                question: s.question,
                answer: s.answer,
            }
        })
        .collect()
}

/// Exact-match accuracy of an arbitrary answerer; errors count as misses.
pub fn understanding_accuracy_with(items: &[QaItem], mut answer: impl FnMut(&QaItem) -> Result<String>) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let hits = items
        .iter()
        .filter(|it| answer(it).map(|a| a == it.answer).unwrap_or(false))
        .count();
    hits as f64 / items.len() as f64
}

/// Greedy decode after `<bos> question <sep>` until `<eos>` or the cap.
pub fn greedy_answer(models: &ModelSet, vocab: &Vocab, image: &Image, question: &str) -> Result<String> {
    let latent = models.codec.encode(&models.store, image)?;
    greedy_answer_latent(models, vocab, &latent, question)
}

pub fn greedy_answer_latent(models: &ModelSet, vocab: &Vocab, latent: &Tensor, question: &str) -> Result<String> {
    let mut tokens = vocab.question_tokens(question);
    let start = tokens.len();
    for _ in 0..ANSWER_CAP {
        let logits = models.vlm.logits(&models.store, &tokens, Some(latent))?;
        let last = logits.row(logits.rows() - 1);
        let next = last
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(EOS);
        if next == EOS {
            break;
        }
        tokens.push(next);
    }
    Ok(vocab.decode(&tokens[start..]))
}

pub fn understanding_accuracy(models: &ModelSet, vocab: &Vocab, items: &[QaItem]) -> f64 {
    understanding_accuracy_with(items, |it| greedy_answer(models, vocab, &it.image, &it.question))
}

#[cfg(test)]
mod tests {
    use super::super::parse_caption;
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn oracle_generator_scores_one_and_black_scores_zero() {
        let oracle = mini_geneval_with(20, 3, |p| Ok(render(&parse_caption(&p.caption)?)));
        assert_eq!(oracle.overall, 1.0, "{oracle:?}");
        let black = mini_geneval_with(20, 3, |_| Ok(Image::black(16, 16, 3)));
        assert_eq!(black.overall, 0.0);
        let failing = mini_geneval_with(5, 3, |_| Err(crate::error::Error::EmptyLoss));
        assert_eq!(failing.overall, 0.0);
    }

    #[test]
    fn category_prompts_are_held_out_and_well_formed() {
        for p in geneval_prompts(30, 11) {
            assert!(Split::Eval.admits(&p.caption));
            let objs = p.spec.objects();
            match p.category {
                Category::SingleObject | Category::Colors => assert_eq!(objs.len(), 1),
                Category::TwoObject | Category::Position => {
                    assert_eq!(objs.len(), 2);
                    assert_ne!(objs[0].shape, objs[1].shape);
                }
                Category::ColorAttr => {
                    assert_ne!(objs[0].shape, objs[1].shape);
                    assert_ne!(objs[0].color, objs[1].color);
                }
                Category::Counting => {
                    assert!(objs.len() >= 2);
                    assert!(objs.iter().all(|o| o.shape == objs[0].shape && o.color == objs[0].color));
                }
            }
        }
    }

    #[test]
    fn echo_and_constant_answerers() {
        let items = eval_qa_items(600, 5);
        assert_eq!(understanding_accuracy_with(&items, |it| Ok(it.answer.clone())), 1.0);
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for it in &items {
            *freq.entry(&it.answer).or_default() += 1;
        }
        let (top, n) = freq.iter().max_by_key(|(_, n)| **n).map(|(a, n)| (a.to_string(), *n)).unwrap();
        let acc = understanding_accuracy_with(&items, |_| Ok(top.clone()));
        assert_eq!(acc, n as f64 / items.len() as f64);
        assert!(acc < 0.5);
    }
}
