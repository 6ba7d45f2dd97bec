use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ContentSpec, Shape, StyleSpec, Texture, CANVAS};
use crate::raster::Image;

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        quantize(a[0] + (b[0] - a[0]) * t),
        quantize(a[1] + (b[1] - a[1]) * t),
        quantize(a[2] + (b[2] - a[2]) * t),
    ]
}

/// Whether the pixel offset `(dx, dy)` from the shape center lies inside a
/// shape of radius `r`.
fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    let dist = (dx * dx + dy * dy).sqrt();
    match shape {
        Shape::Circle => dist <= r,
        Shape::Ring => dist <= r && dist >= 0.55 * r,
        Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        Shape::Cross => {
            let arm = 0.28 * r;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        Shape::LetterGlyph => {
            // "L": a left stem and a bottom bar.
            let t = 0.32 * r;
            let stem = dx >= -0.75 * r && dx <= -0.75 * r + t && dy.abs() <= r;
            let bar = dy <= r && dy >= r - t && dx >= -0.75 * r && dx <= 0.75 * r;
            stem || bar
        }
        Shape::Triangle => {
            // Upward triangle with apex at (0, -r) and base at y = 0.6 r.
            let top = -r;
            let base = 0.6 * r;
            if dy < top || dy > base {
                return false;
            }
            let half_width = (dy - top) / (base - top) * r * 0.95;
            dx.abs() <= half_width
        }
    }
}

fn background(
    style: &StyleSpec,
    y: usize,
    x: usize,
    phase: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> [f64; 3] {
    let [bg, _, accent] = style.palette;
    let w = style.stroke_width;
    match style.texture {
        Texture::Flat => bg,
        Texture::Stripes => {
            if ((x + y + phase.0) / w).is_multiple_of(2) {
                accent
            } else {
                bg
            }
        }
        Texture::Dots => {
            let period = 3 * w;
            if (x + phase.0) % period < w && (y + phase.1) % period < w {
                accent
            } else {
                bg
            }
        }
        Texture::Gradient => lerp(bg, accent, y as f64 / (CANVAS - 1) as f64 * 0.8),
        Texture::NoiseGrain => {
            if rng.gen::<f64>() < 0.2 {
                accent
            } else {
                bg
            }
        }
    }
}

/// Renders `content` drawn in `style`. A pure function of its arguments: the
/// seed controls a small position/scale jitter and the texture phase.
pub fn render(style: &StyleSpec, content: &ContentSpec, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000);
    let jitter_x = rng.gen_range(-2i32..=2) as f64;
    let jitter_y = rng.gen_range(-2i32..=2) as f64;
    let scale = content.scale * rng.gen_range(0.95..1.05);
    let phase = (rng.gen_range(0..6usize), rng.gen_range(0..6usize));
    let center = (CANVAS as f64 - 1.0) / 2.0;
    let r = scale * CANVAS as f64 / 2.0;
    let fg = style.palette[1];

    let mut img = Image::new(CANVAS, CANVAS);
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            // Draw the background first so the noise stream is consumed in a
            // fixed order independent of the shape.
            let bg = background(style, y, x, phase, &mut rng);
            let dx = x as f64 - center - jitter_x;
            let dy = y as f64 - center - jitter_y;
            let c = if inside(content.shape, dx, dy, r) {
                fg
            } else {
                bg
            };
            img.set(y, x, c);
        }
    }
    img
}
