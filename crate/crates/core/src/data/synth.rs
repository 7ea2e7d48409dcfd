//! Procedural ten-class digit glyphs: fixed polyline templates, randomly
//! warped and stroked onto a 32 x 32 canvas, light strokes on black.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, IMAGE_LEN};
use crate::classifier::IMAGE_SIZE;
use crate::error::{Error, Result};

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, steps: usize) -> Stroke {
    (0..=steps)
        .map(|i| {
            let a = from + (to - from) * i as f64 / steps as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Strokes of each digit in a unit box, x to the right and y downward.
fn template(digit: usize) -> Vec<Stroke> {
    use std::f64::consts::PI;
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.4, 0.5, 0.0, 2.0 * PI, 16)],
        1 => vec![vec![(0.3, 0.2), (0.55, 0.0), (0.55, 1.0)]],
        2 => vec![vec![(0.1, 0.25), (0.3, 0.03), (0.7, 0.03), (0.9, 0.25), (0.8, 0.5), (0.1, 1.0), (0.95, 1.0)]],
        3 => vec![vec![(0.1, 0.0), (0.9, 0.0), (0.45, 0.42), (0.85, 0.6), (0.85, 0.85), (0.6, 1.0), (0.1, 0.92)]],
        4 => vec![vec![(0.7, 1.0), (0.7, 0.0), (0.05, 0.68), (0.95, 0.68)]],
        5 => vec![vec![(0.9, 0.0), (0.15, 0.0), (0.1, 0.45), (0.6, 0.38), (0.92, 0.65), (0.8, 0.95), (0.1, 0.95)]],
        6 => vec![vec![(0.8, 0.0), (0.3, 0.3), (0.1, 0.7), (0.3, 1.0), (0.75, 0.97), (0.88, 0.72), (0.55, 0.5), (0.15, 0.65)]],
        7 => vec![vec![(0.05, 0.0), (0.95, 0.0), (0.4, 1.0)]],
        8 => vec![ellipse(0.5, 0.24, 0.3, 0.24, 0.0, 2.0 * PI, 12), ellipse(0.5, 0.73, 0.38, 0.27, 0.0, 2.0 * PI, 12)],
        9 => vec![ellipse(0.5, 0.3, 0.36, 0.3, 0.0, 2.0 * PI, 12), vec![(0.86, 0.3), (0.75, 1.0)]],
        _ => unreachable!("ten classes"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn render<R: Rng>(digit: usize, rng: &mut R, out: &mut [f32]) {
    let angle = rng.gen_range(-0.2..0.2);
    let scale = rng.gen_range(0.85..1.1);
    let shear = rng.gen_range(-0.15..0.15);
    let (sx, sy) = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
    let thickness = rng.gen_range(1.1..2.0);
    let intensity = rng.gen_range(0.8..1.0);
    let (width, height) = (13.0 * scale, 20.0 * scale);
    let (c, s) = (f64::cos(angle), f64::sin(angle));
    let centre = IMAGE_SIZE as f64 / 2.0;
    let strokes: Vec<Stroke> = template(digit)
        .into_iter()
        .map(|stroke| {
            stroke
                .into_iter()
                .map(|(x, y)| {
                    let x = (x + rng.gen_range(-0.04..0.04) - 0.5) * width;
                    let y = (y + rng.gen_range(-0.04..0.04) - 0.5) * height;
                    let x = x + shear * y;
                    (c * x - s * y + centre + sx, s * x + c * y + centre + sy)
                })
                .collect()
        })
        .collect();
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    for r in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let p = (col as f64 + 0.5, r as f64 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|st| st.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let v = (intensity * (thickness - d + 0.5).clamp(0.0, 1.0)) as f32;
            for ch in 0..3 {
                out[ch * plane + r * IMAGE_SIZE + col] = v;
            }
        }
    }
}

/// `n_per_class` glyphs of each digit, labels cycling 0, 1, ..., 9 so any
/// prefix of length 10k is class-balanced. Deterministic per seed.
pub fn synth_digits(n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::contract("synth_digits needs at least one sample per class"));
    }
    let n = n_per_class * 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = vec![0f32; n * IMAGE_LEN];
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    for (i, &y) in labels.iter().enumerate() {
        render(y, &mut rng, &mut images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]);
    }
    Dataset::new(format!("synth{seed}"), images, labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = synth_digits(10, 5).unwrap();
        assert_eq!(a.len(), 100);
        for c in 0..10 {
            assert_eq!(a.labels().iter().filter(|&&y| y == c).count(), 10);
        }
        assert_eq!(a, synth_digits(10, 5).unwrap());
        assert_ne!(a.images(), synth_digits(10, 6).unwrap().images());
    }

    #[test]
    fn glyphs_have_ink_and_background() {
        let ds = synth_digits(1, 0).unwrap();
        for i in 0..ds.len() {
            let im = &ds.image(i)[..1024];
            let ink = im.iter().filter(|&&v| v > 0.5).count();
            assert!((20..400).contains(&ink), "digit {i}: {ink} ink pixels");
            assert_eq!(im[0], 0.0);
        }
    }
}
