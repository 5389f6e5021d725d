//! Procedurally rendered handwritten-style digits.
//!
//! Each class is a fixed set of pen strokes in a unit box. A sample applies a
//! random affine warp, per-point wobble and a random pen width, and is then
//! rasterized with anti-aliasing into a 28x28 byte image whose glyph occupies
//! roughly the central 20x20 pixels. Used for tests, benchmarks and demos when
//! real MNIST files are not at hand.

use super::idx::ImageSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

pub const SIZE: usize = 28;

type Stroke = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Stroke {
    let steps = (((to_deg - from_deg).abs() / 10.0).ceil() as usize).max(2);
    (0..=steps)
        .map(|k| {
            let t = (from_deg + (to_deg - from_deg) * k as f64 / steps as f64) * PI / 180.0;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

fn glyph(digit: u8) -> Vec<Stroke> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.3, 0.45, 0.0, 360.0)],
        1 => vec![vec![(0.35, 0.2), (0.55, 0.05), (0.55, 0.95)]],
        2 => vec![
            arc(0.5, 0.3, 0.3, 0.25, 190.0, 390.0),
            vec![(0.76, 0.42), (0.2, 0.95), (0.82, 0.95)],
        ],
        3 => vec![
            arc(0.48, 0.28, 0.27, 0.23, -160.0, 90.0),
            arc(0.48, 0.72, 0.3, 0.23, -90.0, 160.0),
        ],
        4 => vec![vec![(0.65, 0.95), (0.65, 0.05), (0.15, 0.65), (0.85, 0.65)]],
        5 => vec![
            vec![(0.75, 0.05), (0.3, 0.05), (0.27, 0.45)],
            arc(0.5, 0.68, 0.28, 0.27, -125.0, 150.0),
        ],
        6 => vec![
            vec![(0.7, 0.05), (0.42, 0.28), (0.26, 0.62)],
            arc(0.5, 0.71, 0.25, 0.23, 0.0, 360.0),
        ],
        7 => vec![vec![(0.18, 0.05), (0.82, 0.05), (0.42, 0.95)]],
        8 => vec![
            arc(0.5, 0.27, 0.22, 0.22, 0.0, 360.0),
            arc(0.5, 0.72, 0.27, 0.23, 0.0, 360.0),
        ],
        9 => vec![
            arc(0.5, 0.3, 0.25, 0.23, 0.0, 360.0),
            vec![(0.75, 0.3), (0.62, 0.95)],
        ],
        _ => panic!("digit class must be 0..=9"),
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one sample of `digit` into a 28x28 byte image, redrawing the
/// random warp until the glyph keeps a one-pixel border.
pub fn render_digit(digit: u8, rng: &mut impl Rng) -> Vec<u8> {
    loop {
        let img = render_once(digit, rng);
        match bounding_box(&img, SIZE, SIZE) {
            Some((r0, r1, c0, c1)) if r0 >= 1 && c0 >= 1 && r1 <= SIZE - 2 && c1 <= SIZE - 2 => {
                return img
            }
            _ => {}
        }
    }
}

fn render_once(digit: u8, rng: &mut impl Rng) -> Vec<u8> {
    let angle = rng.gen_range(-0.25..0.25);
    let scale = rng.gen_range(0.75..1.0);
    let aspect = rng.gen_range(0.8..1.15);
    let shear = rng.gen_range(-0.3..0.3);
    let (tx, ty) = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
    let pen = rng.gen_range(0.9..1.5);
    let (s, c) = (f64::sin(angle), f64::cos(angle));
    let box_px = 20.0 * scale;

    let strokes: Vec<Stroke> = glyph(digit)
        .into_iter()
        .map(|stroke| {
            stroke
                .into_iter()
                .map(|(x, y)| {
                    let x = x + rng.gen_range(-0.03..0.03);
                    let y = y + rng.gen_range(-0.03..0.03);
                    // centre, shear, aspect, rotate, scale to pixels
                    let (u, v) = (x - 0.5, y - 0.5);
                    let u = (u + shear * v) * aspect;
                    let (u, v) = (c * u - s * v, s * u + c * v);
                    (14.0 + tx + u * box_px, 14.0 + ty + v * box_px)
                })
                .collect()
        })
        .collect();

    let mut img = vec![0u8; SIZE * SIZE];
    for r in 0..SIZE {
        for col in 0..SIZE {
            let p = (col as f64 + 0.5, r as f64 + 0.5);
            let mut d = f64::INFINITY;
            for stroke in &strokes {
                for w in stroke.windows(2) {
                    d = d.min(seg_dist(p, w[0], w[1]));
                }
            }
            let v = (pen + 0.5 - d).clamp(0.0, 1.0);
            img[r * SIZE + col] = (v * 255.0).round() as u8;
        }
    }
    img
}

/// `per_class` samples of every digit, interleaved by class
/// (0, 1, ..., 9, 0, 1, ...), reproducible from `seed`.
pub fn synth_digits(per_class: usize, seed: u64) -> (ImageSet, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(per_class * 10 * SIZE * SIZE);
    let mut labels = Vec::with_capacity(per_class * 10);
    for _ in 0..per_class {
        for d in 0..10u8 {
            pixels.extend(render_digit(d, &mut rng));
            labels.push(d);
        }
    }
    (ImageSet::new(SIZE, SIZE, pixels), labels)
}

/// Bounding box `(row_min, row_max, col_min, col_max)` of the nonzero pixels.
pub fn bounding_box(
    img: &[u8],
    height: usize,
    width: usize,
) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for r in 0..height {
        for c in 0..width {
            if img[r * width + c] > 0 {
                bb = Some(match bb {
                    None => (r, r, c, c),
                    Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                });
            }
        }
    }
    bb
}

/// Shifts an image by `(dr, dc)`; returns `None` if any mass would leave the grid.
pub fn translate(img: &[u8], height: usize, width: usize, dr: i64, dc: i64) -> Option<Vec<u8>> {
    let (r0, r1, c0, c1) = bounding_box(img, height, width)?;
    let fits = r0 as i64 + dr >= 0
        && (r1 as i64 + dr) < height as i64
        && c0 as i64 + dc >= 0
        && (c1 as i64 + dc) < width as i64;
    if !fits {
        return None;
    }
    let mut out = vec![0u8; img.len()];
    for r in r0..=r1 {
        for c in c0..=c1 {
            let nr = (r as i64 + dr) as usize;
            let nc = (c as i64 + dc) as usize;
            out[nr * width + nc] = img[r * width + c];
        }
    }
    Some(out)
}
