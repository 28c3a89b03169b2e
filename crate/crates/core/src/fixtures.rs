//! Seeded synthetic images for tests, benchmarks and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

/// I.i.d. uniform noise in `[0, 1]`.
pub fn noise(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..3 * h * w).map(|_| rng.gen::<f64>()).collect()).expect("positive dims")
}

/// Smooth image: a few low-frequency sinusoids per channel.
pub fn smooth(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            [
                rng.gen_range(0.3..2.5),
                rng.gen_range(0.3..2.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.05..0.15),
            ]
        })
        .collect();
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
                let v: f64 = waves[c * 3..c * 3 + 3]
                    .iter()
                    .map(|[a, b, p, amp]| amp * (std::f64::consts::TAU * (a * fx + b * fy) + p).sin())
                    .sum();
                data[(c * h + y) * w + x] = 0.5 + v;
            }
        }
    }
    Image::new(h, w, data).expect("positive dims")
}

/// Painting-like image: a soft colour field overlaid with short oriented
/// brush strokes, all drawn from `seed`.
pub fn painting(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    let base: [f64; 3] = [
        rng.gen_range(0.2..0.6),
        rng.gen_range(0.2..0.6),
        rng.gen_range(0.2..0.6),
    ];
    for (c, b) in base.iter().enumerate() {
        data[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = *b);
    }
    let scale = h.min(w) as f64;
    for _ in 0..10 {
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let r = rng.gen_range(0.1..0.35) * scale;
        let col: [f64; 3] = [
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        ];
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let k = (-d2 / (r * r)).exp();
                for c in 0..3 {
                    data[c * n + y * w + x] += col[c] * k;
                }
            }
        }
    }
    let strokes = n / 40;
    let main_angle = rng.gen_range(0.0..std::f64::consts::PI);
    for _ in 0..strokes {
        let (y0, x0) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let angle = main_angle + rng.gen_range(-0.5..0.5);
        let len = rng.gen_range(4.0..14.0);
        let half_w = rng.gen_range(0.8..2.2);
        let (dy, dx) = (angle.sin(), angle.cos());
        let col: [f64; 3] = [
            rng.gen_range(-0.25..0.25),
            rng.gen_range(-0.25..0.25),
            rng.gen_range(-0.25..0.25),
        ];
        let alpha = rng.gen_range(0.3..0.8);
        let reach = (len + half_w + 1.0) as isize;
        let (iy, ix) = (y0 as isize, x0 as isize);
        for y in (iy - reach).max(0)..(iy + reach).min(h as isize) {
            for x in (ix - reach).max(0)..(ix + reach).min(w as isize) {
                let (py, px) = (y as f64 - y0, x as f64 - x0);
                let t = (py * dy + px * dx).clamp(0.0, len);
                let dist = ((py - t * dy).powi(2) + (px - t * dx).powi(2)).sqrt();
                if dist <= half_w {
                    let p = y as usize * w + x as usize;
                    for c in 0..3 {
                        let v = &mut data[c * n + p];
                        *v = (1.0 - alpha) * *v + alpha * (*v + col[c]);
                    }
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Image::new(h, w, data).expect("positive dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_seeded_and_in_range() {
        for f in [noise, smooth, painting] {
            let a = f(24, 20, 3);
            assert_eq!(a, f(24, 20, 3));
            assert_ne!(a, f(24, 20, 4));
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
