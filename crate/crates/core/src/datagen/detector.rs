//! Pixel detector reading scenes back from images, and a question answerer
//! that consults only the detections.

use super::render::{mask, CELL_PX};
use super::{Color, Shape, CELLS, GRID};
use crate::image::Image;

/// A pixel is lit when its brightest channel reaches this level.
pub const ON_THRESHOLD: f64 = 0.5;
/// Cells with fewer lit pixels are treated as empty.
pub const MIN_LIT: usize = 3;
/// Largest mask Hamming distance still accepted as a known shape.
pub const MAX_SHAPE_DISTANCE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetectedObject {
    pub cell: usize,
    pub color: Color,
    /// `None` when the blob matches no shape template closely enough.
    pub shape: Option<Shape>,
}

impl DetectedObject {
    pub fn row(&self) -> usize {
        self.cell / GRID
    }

    pub fn col(&self) -> usize {
        self.cell % GRID
    }
}

fn nearest_color(rgb: [f64; 3]) -> Color {
    let dist = |c: Color| {
        let p = c.rgb();
        (0..3).map(|i| (p[i] - rgb[i]).powi(2)).sum::<f64>()
    };
    Color::ALL
        .into_iter()
        .min_by(|a, b| dist(*a).total_cmp(&dist(*b)))
        .expect("non-empty palette")
}

/// Classifies each grid cell independently: the lit-pixel blob gives the
/// color (nearest palette entry to its mean) and the shape (closest mask
/// template by Hamming distance).
pub fn detect(img: &Image) -> Vec<DetectedObject> {
    let mut out = Vec::new();
    for cell in 0..CELLS {
        let (r, c) = (cell / GRID, cell % GRID);
        let mut lit = [[false; CELL_PX]; CELL_PX];
        let mut sum = [0.0; 3];
        let mut n = 0;
        for (y, lit_row) in lit.iter_mut().enumerate() {
            for (x, l) in lit_row.iter_mut().enumerate() {
                let p = img.pixel(r * CELL_PX + y, c * CELL_PX + x);
                if p.iter().take(3).copied().fold(f64::NEG_INFINITY, f64::max) >= ON_THRESHOLD {
                    *l = true;
                    n += 1;
                    for k in 0..3 {
                        sum[k] += p[k];
                    }
                }
            }
        }
        if n < MIN_LIT {
            continue;
        }
        let mean = sum.map(|s| s / n as f64);
        let (best, dist) = Shape::ALL
            .into_iter()
            .map(|s| {
                let d = (0..CELL_PX)
                    .flat_map(|y| (0..CELL_PX).map(move |x| (y, x)))
                    .filter(|&(y, x)| mask(s, y, x) != lit[y][x])
                    .count();
                (s, d)
            })
            .min_by_key(|&(_, d)| d)
            .expect("non-empty shape list");
        out.push(DetectedObject {
            cell,
            color: nearest_color(mean),
            shape: (dist <= MAX_SHAPE_DISTANCE).then_some(best),
        });
    }
    out
}

/// Answers a templated question from detections alone; `None` for
/// questions outside the templates or whose referent is ambiguous.
pub fn answer_from_detections(objs: &[DetectedObject], question: &str) -> Option<String> {
    let w: Vec<&str> = question.split_whitespace().collect();
    let counts = ["zero", "one", "two", "three"];
    let yn = |b: bool| Some(if b { "yes" } else { "no" }.to_string());
    let unique_shape = |s: Shape| {
        let m: Vec<&DetectedObject> = objs.iter().filter(|o| o.shape == Some(s)).collect();
        (m.len() == 1).then(|| *m[0])
    };
    match w.as_slice() {
        ["how", "many", "objects", "?"] => counts.get(objs.len()).map(|s| s.to_string()),
        ["how", "many", color, "objects", "?"] => {
            let c = Color::parse(color)?;
            counts.get(objs.iter().filter(|o| o.color == c).count()).map(|s| s.to_string())
        }
        ["what", "color", "is", "the", shape, "?"] => {
            Some(unique_shape(Shape::parse(shape)?)?.color.name().to_string())
        }
        ["what", "shape", "is", "the", color, "object", "?"] => {
            let c = Color::parse(color)?;
            let m: Vec<&DetectedObject> = objs.iter().filter(|o| o.color == c).collect();
            if m.len() != 1 {
                return None;
            }
            Some(m[0].shape?.name().to_string())
        }
        ["is", "the", a, "above", "the", b, "?"] => {
            let (a, b) = (unique_shape(Shape::parse(a)?)?, unique_shape(Shape::parse(b)?)?);
            yn(a.row() < b.row())
        }
        ["is", "the", a, "left", "of", "the", b, "?"] => {
            let (a, b) = (unique_shape(Shape::parse(a)?)?, unique_shape(Shape::parse(b)?)?);
            yn(a.col() < b.col())
        }
        ["is", "there", "a", color, shape, "?"] => {
            let (c, s) = (Color::parse(color)?, Shape::parse(shape)?);
            yn(objs.iter().any(|o| o.color == c && o.shape == Some(s)))
        }
        _ => None,
    }
}
