//! Procedural clean images, so that datasets need no external files.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    /// Linear colour ramp in a random direction.
    Gradient,
    /// Two-colour checkerboard with random cell size.
    Checkerboard,
    /// Sum of a few random low-frequency sinusoids per channel.
    SmoothField,
    /// Overlapping flat-coloured rectangles on a background.
    Blocks,
}

impl SourceKind {
    pub const ALL: [SourceKind; 4] = [
        SourceKind::Gradient,
        SourceKind::Checkerboard,
        SourceKind::SmoothField,
        SourceKind::Blocks,
    ];
}

fn colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

/// A `(1, 3, h, w)` image in [0, 1].
pub fn procedural_image(kind: SourceKind, h: usize, w: usize, seed: u64) -> Result<Tensor> {
    let shape = Shape::new(1, 3, h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Tensor::zeros(shape);
    match kind {
        SourceKind::Gradient => {
            let (a, b) = (colour(&mut rng), colour(&mut rng));
            let theta: f64 = rng.gen_range(0.0..2.0 * PI);
            let (dy, dx) = theta.sin_cos();
            let span = (h as f64 * dy.abs() + w as f64 * dx.abs()).max(1.0);
            for y in 0..h {
                for x in 0..w {
                    let t = ((y as f64 - h as f64 / 2.0) * dy + (x as f64 - w as f64 / 2.0) * dx) / span + 0.5;
                    for c in 0..3 {
                        img.set(0, c, y, x, a[c] + (b[c] - a[c]) * t.clamp(0.0, 1.0));
                    }
                }
            }
        }
        SourceKind::Checkerboard => {
            let (a, b) = (colour(&mut rng), colour(&mut rng));
            let cell = rng.gen_range(3..=12usize);
            let (oy, ox) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
            for y in 0..h {
                for x in 0..w {
                    let col = if ((y + oy) / cell + (x + ox) / cell) % 2 == 0 { a } else { b };
                    for c in 0..3 {
                        img.set(0, c, y, x, col[c]);
                    }
                }
            }
        }
        SourceKind::SmoothField => {
            for c in 0..3 {
                let waves: Vec<(f64, f64, f64, f64)> = (0..3)
                    .map(|_| {
                        (
                            rng.gen_range(-3.0..3.0),
                            rng.gen_range(-3.0..3.0),
                            rng.gen_range(0.0..2.0 * PI),
                            rng.gen_range(0.05..0.15),
                        )
                    })
                    .collect();
                let base = rng.gen_range(0.3..0.7);
                let plane = img.plane_mut(0, c);
                for y in 0..h {
                    for x in 0..w {
                        let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
                        let v: f64 = waves
                            .iter()
                            .map(|&(ky, kx, ph, amp)| amp * (2.0 * PI * (ky * fy + kx * fx) + ph).sin())
                            .sum();
                        plane[y * w + x] = (base + v).clamp(0.0, 1.0);
                    }
                }
            }
        }
        SourceKind::Blocks => {
            let bg = colour(&mut rng);
            for c in 0..3 {
                img.plane_mut(0, c).fill(bg[c]);
            }
            for _ in 0..rng.gen_range(3..=8) {
                let col = colour(&mut rng);
                let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
                let (bh, bw) = (rng.gen_range(2..=h.max(3) / 2), rng.gen_range(2..=w.max(3) / 2));
                for y in y0..(y0 + bh).min(h) {
                    for x in x0..(x0 + bw).min(w) {
                        for c in 0..3 {
                            img.set(0, c, y, x, col[c]);
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

/// `count` images cycling through every [`SourceKind`], each with its own seed.
pub fn procedural_sources(count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<Tensor>> {
    (0..count)
        .map(|i| {
            let kind = SourceKind::ALL[i % SourceKind::ALL.len()];
            procedural_image(kind, h, w, seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_in_range_and_deterministic() {
        for kind in SourceKind::ALL {
            let a = procedural_image(kind, 17, 23, 4).unwrap();
            assert_eq!(a.shape().dims(), [1, 3, 17, 23]);
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)), "{kind:?}");
            assert_eq!(a, procedural_image(kind, 17, 23, 4).unwrap());
            assert_ne!(a, procedural_image(kind, 17, 23, 5).unwrap(), "{kind:?}");
        }
    }

    #[test]
    fn sources_cycle_kinds() {
        let s = procedural_sources(6, 8, 8, 1).unwrap();
        assert_eq!(s.len(), 6);
        assert_ne!(s[0], s[4]);
    }
}
