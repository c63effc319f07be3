//! Procedural "normal-light" images: a smooth bilinear color field with a few
//! flat-colored discs and rectangles on top.

use rand::Rng;

use crate::error::Result;
use crate::image::Image;
use crate::rng;
use crate::scalar::Scalar;

fn color(r: &mut impl Rng) -> [f64; 3] {
    [
        r.random_range(0.05..0.95),
        r.random_range(0.05..0.95),
        r.random_range(0.05..0.95),
    ]
}

enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

/// Deterministic RGB image in `[0, 1]` for `seed`.
pub fn synthetic_image<T: Scalar>(width: usize, height: usize, seed: u64) -> Result<Image<T>> {
    let mut r = rng::stream(seed, 0);
    let corners = [color(&mut r), color(&mut r), color(&mut r), color(&mut r)];
    let n_shapes = r.random_range(2..=4);
    let shapes: Vec<(Shape, [f64; 3])> = (0..n_shapes)
        .map(|_| {
            let shape = if r.random_bool(0.5) {
                Shape::Disc {
                    cx: r.random_range(0.0..1.0),
                    cy: r.random_range(0.0..1.0),
                    r: r.random_range(0.1..0.35),
                }
            } else {
                let (x0, y0) = (r.random_range(0.0..0.7), r.random_range(0.0..0.7));
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + r.random_range(0.15..0.5),
                    y1: y0 + r.random_range(0.15..0.5),
                }
            };
            (shape, color(&mut r))
        })
        .collect();

    Image::from_fn(width, height, 3, |x, y, c| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
        let bottom = corners[2][c] * (1.0 - u) + corners[3][c] * u;
        let mut value = top * (1.0 - v) + bottom * v;
        for (shape, col) in &shapes {
            if shape.contains(u, v) {
                value = col[c];
            }
        }
        T::of(value)
    })
}
