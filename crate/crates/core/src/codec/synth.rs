//! Procedural greyscale test images: gradients, gratings, shapes and grain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Image;

enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }
}

/// Deterministic image `index` of the set keyed by `seed`.
pub fn synthetic_image(seed: u64, index: u64, width: usize, height: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let (w, h) = (width as f64, height as f64);
    let base = rng.random_range(60.0..200.0);
    let gx = rng.random_range(-60.0..60.0) / w;
    let gy = rng.random_range(-60.0..60.0) / h;
    let gratings: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=3))
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(3.0..24.0);
            let k = std::f64::consts::TAU / period;
            (k * theta.cos(), k * theta.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(4.0..30.0))
        })
        .collect();
    let shapes: Vec<(Shape, f64)> = (0..rng.random_range(2..=6))
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                Shape::Disk { cx: rng.random_range(0.0..w), cy: rng.random_range(0.0..h), r: rng.random_range(2.0..(w / 3.0).max(3.0)) }
            } else {
                let (x0, y0) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
                Shape::Rect { x0, y0, x1: x0 + rng.random_range(2.0..(w / 2.0).max(3.0)), y1: y0 + rng.random_range(2.0..(h / 2.0).max(3.0)) }
            };
            (shape, rng.random_range(-80.0..80.0))
        })
        .collect();
    let grain = rng.random_range(0.0..4.0);
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = base + gx * xf + gy * yf;
            for &(kx, ky, phase, amp) in &gratings {
                v += amp * (kx * xf + ky * yf + phase).sin();
            }
            for (s, delta) in &shapes {
                if s.contains(xf, yf) {
                    v += delta;
                }
            }
            // Irwin-Hall approximation keeps this cheap and bounded.
            let noise: f64 = (0..4).map(|_| rng.random::<f64>()).sum::<f64>() - 2.0;
            v += grain * noise * 1.7;
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Image { width, height, channels: 1, data }
}

pub fn synthetic_images(seed: u64, count: usize, width: usize, height: usize) -> Vec<Image> {
    (0..count as u64).map(|i| synthetic_image(seed, i, width, height)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_varied() {
        let a = synthetic_image(1, 0, 32, 16);
        assert_eq!(a, synthetic_image(1, 0, 32, 16));
        assert_ne!(a, synthetic_image(1, 1, 32, 16));
        assert_eq!(a.data.len(), 512);
        let distinct: std::collections::HashSet<u8> = a.data.iter().copied().collect();
        assert!(distinct.len() > 10);
    }
}
