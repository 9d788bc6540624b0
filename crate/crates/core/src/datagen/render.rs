//! Scene rasterization: each object is a pure-color 4×4 mask in its cell on
//! a black background.

use super::{SceneSpec, Shape, GRID};
use crate::image::Image;

pub const CELL_PX: usize = 4;
pub const IMAGE_PX: usize = GRID * CELL_PX;

/// Pixel `(y, x)` of a cell belongs to the shape.
pub fn mask(shape: Shape, y: usize, x: usize) -> bool {
    let last = CELL_PX - 1;
    match shape {
        Shape::Square => true,
        Shape::Circle => !((y == 0 || y == last) && (x == 0 || x == last)),
        // lower-left triangle including the diagonal
        Shape::Triangle => x <= y,
    }
}

pub fn render(spec: &SceneSpec) -> Image {
    let mut img = Image::black(IMAGE_PX, IMAGE_PX, 3);
    for o in spec.objects() {
        let rgb = o.color.rgb();
        for y in 0..CELL_PX {
            for x in 0..CELL_PX {
                if mask(o.shape, y, x) {
                    for (c, &v) in rgb.iter().enumerate() {
                        img.set(o.row() * CELL_PX + y, o.col() * CELL_PX + x, c, v);
                    }
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::super::{Color, Object, CELLS};
    use super::*;
    use std::collections::HashSet;

    fn one(cell: usize, shape: Shape, color: Color) -> SceneSpec {
        SceneSpec::new(vec![Object { cell, shape, color }]).unwrap()
    }

    #[test]
    fn red_circle_pixels_and_black_neighbours() {
        let img = render(&one(5, Shape::Circle, Color::Red));
        assert_eq!(img.to_bytes()[((5 * 16) + 5) * 3..][..3], [255, 0, 0]);
        for (y, x) in [(0, 0), (4, 0), (4, 8), (8, 4), (0, 4)] {
            assert_eq!(img.pixel(y + 1, x + 1), &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn render_is_injective_on_single_objects() {
        let mut seen = HashSet::new();
        for cell in 0..CELLS {
            for shape in Shape::ALL {
                for color in Color::ALL {
                    assert!(seen.insert(render(&one(cell, shape, color)).to_bytes()));
                }
            }
        }
        assert_eq!(seen.len(), 192);
    }
}
