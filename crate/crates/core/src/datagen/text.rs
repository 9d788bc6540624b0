//! Closed vocabulary, caption grammar and question/answer templates.
//!
//! Caption grammar, objects in cell order:
//!
//! ```text
//! caption := count phrase (rel phrase)*
//! phrase  := color shape cell          e.g. "red circle r1c2"
//! rel     := "above" | "left of" | "and"
//! ```
//!
//! Two-object captions use `above` when the rows differ and `left of`
//! otherwise, so the stated relation always holds; three-object captions
//! join with `and`.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Color, Object, SceneSpec, Shape, GRID};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<sep>", "<eos>", "<unk>"];
const COUNTS: [&str; 4] = ["zero", "one", "two", "three"];
const FUNCTION_WORDS: [&str; 18] = [
    "above", "left", "of", "and", "how", "many", "objects", "what", "color", "shape", "is", "the", "there", "a",
    "object", "?", "yes", "no",
];

pub fn count_word(n: usize) -> &'static str {
    COUNTS[n]
}

pub fn cell_word(cell: usize) -> String {
    format!("r{}c{}", cell / GRID, cell % GRID)
}

fn parse_cell(w: &str) -> Option<usize> {
    let b = w.as_bytes();
    if b.len() != 4 || b[0] != b'r' || b[2] != b'c' {
        return None;
    }
    let (r, c) = ((b[1] as char).to_digit(10)? as usize, (b[3] as char).to_digit(10)? as usize);
    (r < GRID && c < GRID).then_some(r * GRID + c)
}

/// Fixed word list; ids are stable across runs.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::standard()
    }
}

impl Vocab {
    pub fn standard() -> Self {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(COUNTS.iter().map(|s| s.to_string()));
        words.extend(Color::ALL.iter().map(|c| c.name().to_string()));
        words.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
        words.extend((0..GRID * GRID).map(cell_word));
        words.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    /// `<bos> caption`: the VLM input for generation.
    pub fn prompt_tokens(&self, caption: &str) -> Vec<usize> {
        let mut t = vec![BOS];
        t.extend(self.encode(caption));
        t
    }

    /// `<bos> question <sep>`: the decode prefix for answering.
    pub fn question_tokens(&self, question: &str) -> Vec<usize> {
        let mut t = vec![BOS];
        t.extend(self.encode(question));
        t.push(SEP);
        t
    }
}

fn phrase(o: &Object) -> String {
    format!("{} {} {}", o.color.name(), o.shape.name(), cell_word(o.cell))
}

pub fn caption_of(spec: &SceneSpec) -> String {
    let objs = spec.objects();
    let mut out = vec![count_word(objs.len()).to_string(), phrase(&objs[0])];
    for w in objs.windows(2) {
        let rel = match objs.len() {
            2 if w[0].row() != w[1].row() => "above",
            2 => "left of",
            _ => "and",
        };
        out.push(rel.to_string());
        out.push(phrase(&w[1]));
    }
    out.join(" ")
}

/// Inverse of [`caption_of`] for well-formed captions.
pub fn parse_caption(caption: &str) -> Result<SceneSpec> {
    let bad = |why: &str| Error::Format(format!("caption `{caption}`: {why}"));
    let words: Vec<&str> = caption.split_whitespace().collect();
    let n = words
        .first()
        .and_then(|w| COUNTS.iter().position(|c| c == w))
        .ok_or_else(|| bad("missing count word"))?;
    let mut objects = Vec::new();
    let mut i = 1;
    while i < words.len() {
        if !objects.is_empty() {
            match words[i] {
                "above" | "and" => i += 1,
                "left" if words.get(i + 1) == Some(&"of") => i += 2,
                _ => return Err(bad("expected a relation")),
            }
        }
        let color = words.get(i).and_then(|w| Color::parse(w)).ok_or_else(|| bad("expected a color"))?;
        let shape = words.get(i + 1).and_then(|w| Shape::parse(w)).ok_or_else(|| bad("expected a shape"))?;
        let cell = words.get(i + 2).and_then(|w| parse_cell(w)).ok_or_else(|| bad("expected a cell"))?;
        objects.push(Object { cell, shape, color });
        i += 3;
    }
    if objects.len() != n {
        return Err(bad("count word disagrees with the object list"));
    }
    SceneSpec::new(objects).map_err(|e| bad(&e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QaTemplate {
    Count,
    Color,
    Shape,
    Position,
    Existence,
}

impl QaTemplate {
    pub const ALL: [QaTemplate; 5] = [
        QaTemplate::Count,
        QaTemplate::Color,
        QaTemplate::Shape,
        QaTemplate::Position,
        QaTemplate::Existence,
    ];
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

/// Instantiates `template` on `spec`, or `None` when it does not apply.
pub fn instantiate(template: QaTemplate, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Option<(String, String)> {
    let objs = spec.objects();
    let pick = |rng: &mut ChaCha8Rng| objs[rng.random_range(0..objs.len())];
    match template {
        QaTemplate::Count => {
            if rng.random_bool(0.5) {
                Some(("how many objects ?".into(), count_word(objs.len()).into()))
            } else {
                let c = Color::ALL[rng.random_range(0..4)];
                let n = objs.iter().filter(|o| o.color == c).count();
                Some((format!("how many {} objects ?", c.name()), count_word(n).into()))
            }
        }
        QaTemplate::Color => {
            let o = pick(rng);
            (objs.iter().filter(|x| x.shape == o.shape).count() == 1)
                .then(|| (format!("what color is the {} ?", o.shape.name()), o.color.name().into()))
        }
        QaTemplate::Shape => {
            let o = pick(rng);
            (objs.iter().filter(|x| x.color == o.color).count() == 1)
                .then(|| (format!("what shape is the {} object ?", o.color.name()), o.shape.name().into()))
        }
        QaTemplate::Position => {
            let unique: Vec<Object> = objs
                .iter()
                .copied()
                .filter(|o| objs.iter().filter(|x| x.shape == o.shape).count() == 1)
                .collect();
            if unique.len() < 2 {
                return None;
            }
            let i = rng.random_range(0..unique.len());
            let j = (i + rng.random_range(1..unique.len())) % unique.len();
            let (a, b) = (unique[i], unique[j]);
            Some(if a.row() != b.row() {
                (
                    format!("is the {} above the {} ?", a.shape.name(), b.shape.name()),
                    yes_no(a.row() < b.row()),
                )
            } else {
                (
                    format!("is the {} left of the {} ?", a.shape.name(), b.shape.name()),
                    yes_no(a.col() < b.col()),
                )
            })
        }
        QaTemplate::Existence => {
            let (shape, color) = if rng.random_bool(0.5) {
                let o = pick(rng);
                (o.shape, o.color)
            } else {
                (Shape::ALL[rng.random_range(0..3)], Color::ALL[rng.random_range(0..4)])
            };
            let present = objs.iter().any(|o| o.shape == shape && o.color == color);
            Some((format!("is there a {} {} ?", color.name(), shape.name()), yes_no(present)))
        }
    }
}

/// Uniform template choice; inapplicable draws are resampled.
pub fn qa_of(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (String, String) {
    loop {
        let t = QaTemplate::ALL[rng.random_range(0..QaTemplate::ALL.len())];
        if let Some(qa) = instantiate(t, spec, rng) {
            return qa;
        }
    }
}
