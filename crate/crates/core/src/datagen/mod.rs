//! Synthetic grid scenes, their captions and question/answer pairs, a
//! pixel detector, manifest I/O and the generation/understanding scorers.

pub mod detector;
pub mod eval;
pub mod manifest;
pub mod render;
pub mod text;

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use detector::{detect, DetectedObject};
pub use eval::{mini_geneval, understanding_accuracy, Category, GenevalReport};
pub use manifest::{load_manifest, write_manifest, Quadruplet};
pub use render::render;
pub use text::{caption_of, parse_caption, qa_of, QaTemplate, Vocab};

pub const GRID: usize = 4;
pub const CELLS: usize = GRID * GRID;
pub const MAX_OBJECTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Shape::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Color::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

/// One object occupying a grid cell; `cell = row · GRID + col`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Object {
    pub cell: usize,
    pub shape: Shape,
    pub color: Color,
}

impl Object {
    pub fn row(&self) -> usize {
        self.cell / GRID
    }

    pub fn col(&self) -> usize {
        self.cell % GRID
    }
}

/// Objects sorted by cell; cells are unique.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SceneSpec {
    objects: Vec<Object>,
}

impl SceneSpec {
    pub fn new(mut objects: Vec<Object>) -> Result<Self> {
        objects.sort();
        if objects.is_empty() || objects.len() > MAX_OBJECTS {
            return Err(Error::Domain(format!("scene needs 1..={MAX_OBJECTS} objects, got {}", objects.len())));
        }
        if objects.iter().any(|o| o.cell >= CELLS) {
            return Err(Error::Domain("object cell outside the grid".into()));
        }
        if objects.windows(2).any(|w| w[0].cell == w[1].cell) {
            return Err(Error::Domain("two objects share a cell".into()));
        }
        Ok(SceneSpec { objects })
    }

    pub fn objects(&self) -> &[Object] {
        &self.objects
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// `color:shape:row:col` entries joined by `;`.
    pub fn encode(&self) -> String {
        self.objects
            .iter()
            .map(|o| format!("{}:{}:{}:{}", o.color.name(), o.shape.name(), o.row(), o.col()))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn decode(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad scene encoding `{s}`"));
        let mut objects = Vec::new();
        for part in s.split(';') {
            let f: Vec<&str> = part.split(':').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let color = Color::parse(f[0]).ok_or_else(bad)?;
            let shape = Shape::parse(f[1]).ok_or_else(bad)?;
            let row: usize = f[2].parse().map_err(|_| bad())?;
            let col: usize = f[3].parse().map_err(|_| bad())?;
            if row >= GRID || col >= GRID {
                return Err(bad());
            }
            objects.push(Object {
                cell: row * GRID + col,
                shape,
                color,
            });
        }
        SceneSpec::new(objects).map_err(|_| bad())
    }
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

/// Object count uniform on 1..=3, distinct cells, uniform shape and color.
pub fn gen_scene(rng: &mut ChaCha8Rng) -> SceneSpec {
    let n = rng.random_range(1..=MAX_OBJECTS);
    gen_scene_with(rng, n, |rng| {
        (Shape::ALL[rng.random_range(0..3)], Color::ALL[rng.random_range(0..4)])
    })
}

/// Scene with `n` objects whose attributes come from `attrs`.
pub fn gen_scene_with(
    rng: &mut ChaCha8Rng,
    n: usize,
    mut attrs: impl FnMut(&mut ChaCha8Rng) -> (Shape, Color),
) -> SceneSpec {
    let cells = sample(rng, CELLS, n).into_vec();
    let objects = cells
        .into_iter()
        .map(|cell| {
            let (shape, color) = attrs(rng);
            Object { cell, shape, color }
        })
        .collect();
    SceneSpec::new(objects).expect("distinct cells within bounds")
}

/// 64-bit FNV-1a.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Held-out prompts are those whose caption hash falls in bucket 0 of 8.
pub fn is_eval_prompt(caption: &str) -> bool {
    fnv1a(caption) % 8 == 0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn admits(self, caption: &str) -> bool {
        is_eval_prompt(caption) == (self == Split::Eval)
    }
}

/// A scene with its rendered latent-ready image and text fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub spec: SceneSpec,
    pub caption: String,
    pub question: String,
    pub answer: String,
}

/// Draws scenes until one lands in `split` and has at least `min_objects`.
pub fn gen_sample(rng: &mut ChaCha8Rng, split: Split, min_objects: usize) -> Sample {
    loop {
        let spec = gen_scene(rng);
        if spec.len() < min_objects {
            continue;
        }
        let caption = caption_of(&spec);
        if !split.admits(&caption) {
            continue;
        }
        let (question, answer) = qa_of(&spec, rng);
        return Sample {
            spec,
            caption,
            question,
            answer,
        };
    }
}
