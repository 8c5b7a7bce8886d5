//! Screen-capture moiré simulation.
//!
//! A clean image is shown on a display whose pixels are made of vertical
//! R, G, B subpixel stripes with horizontal row gaps. A camera looks at the
//! display through a slightly rotated and scaled sampling grid and records it
//! with a Bayer colour filter array, which is then demosaiced bilinearly.
//! The interference between the display lattice and the sensor mosaic is what
//! produces the coloured bands.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Bayer layout, named by the colours of the top-left 2×2 cell in reading order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cfa {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl Cfa {
    pub const ALL: [Cfa; 4] = [Cfa::Rggb, Cfa::Bggr, Cfa::Grbg, Cfa::Gbrg];

    /// Colour channel (0 = R, 1 = G, 2 = B) recorded at pixel `(y, x)`.
    pub fn channel_at(self, y: usize, x: usize) -> usize {
        let cell = match self {
            Cfa::Rggb => [0, 1, 1, 2],
            Cfa::Bggr => [2, 1, 1, 0],
            Cfa::Grbg => [1, 0, 2, 1],
            Cfa::Gbrg => [1, 2, 0, 1],
        };
        cell[(y % 2) * 2 + x % 2]
    }

    pub fn name(self) -> &'static str {
        match self {
            Cfa::Rggb => "rggb",
            Cfa::Bggr => "bggr",
            Cfa::Grbg => "grbg",
            Cfa::Gbrg => "gbrg",
        }
    }
}

impl fmt::Display for Cfa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Cfa {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Cfa::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown CFA pattern '{s}' (expected rggb, bggr, grbg or gbrg)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    /// Rotation of the camera grid relative to the display, in degrees.
    pub angle: f64,
    /// Display pixels per camera pixel.
    pub scale: f64,
    /// Display lattice period in display pixels.
    pub lattice_period: f64,
    pub cfa: Cfa,
    /// Blend weight of the captured image against the clean one.
    pub intensity: f64,
    /// Selects the lattice phase.
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lattice_period >= 2.0) || !self.lattice_period.is_finite() {
            return Err(Error::Config(format!("lattice_period must be >= 2, got {}", self.lattice_period)));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::Config(format!("intensity must be in [0, 1], got {}", self.intensity)));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() || !self.angle.is_finite() {
            return Err(Error::Config(format!(
                "scale must be positive and angle finite, got scale {} angle {}",
                self.scale, self.angle
            )));
        }
        Ok(())
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            angle: 5.0,
            scale: 0.95,
            lattice_period: 2.2,
            cfa: Cfa::Rggb,
            intensity: 1.0,
            seed: 0,
        }
    }
}

/// A clean image and its moiré-corrupted capture, both `(1, 3, h, w)` in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub clean: Tensor,
    pub moire: Tensor,
    pub spec: SynthSpec,
}

/// Mean-one subpixel mask of channel `c` at display position `(u, v)`.
fn lattice(u: f64, v: f64, c: usize, period: f64) -> f64 {
    let stripe = 1.0 + (2.0 * PI * (u / period - c as f64 / 3.0)).cos();
    let rows = 1.0 + 0.5 * (2.0 * PI * v / period).cos();
    stripe * rows
}

/// Sub-samples per axis over which a sensor pixel integrates the lattice.
const FOOTPRINT: usize = 4;

/// What the camera sees before the colour filter: the displayed image
/// modulated by the subpixel lattice, integrated over each sensor pixel of the
/// rotated, scaled grid. Content stays registered with the clean image; only
/// the lattice is resampled.
fn capture(clean: &Tensor, spec: &SynthSpec) -> Tensor {
    let s = clean.shape();
    let (h, w) = (s.h, s.w);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (pu, pv) = (
        rng.gen_range(0.0..spec.lattice_period),
        rng.gen_range(0.0..spec.lattice_period),
    );
    let (sin, cos) = spec.angle.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Tensor::zeros(s);
    for c in 0..3 {
        let src = clean.plane(0, c);
        let dst = out.plane_mut(0, c);
        for y in 0..h {
            for x in 0..w {
                let mut mask = 0.0;
                for sy in 0..FOOTPRINT {
                    for sx in 0..FOOTPRINT {
                        let oy = (sy as f64 + 0.5) / FOOTPRINT as f64 - 0.5;
                        let ox = (sx as f64 + 0.5) / FOOTPRINT as f64 - 0.5;
                        let (dy, dx) = ((y as f64 + oy - cy) * spec.scale, (x as f64 + ox - cx) * spec.scale);
                        let u = cos * dx - sin * dy + pu;
                        let v = sin * dx + cos * dy + pv;
                        mask += lattice(u, v, c, spec.lattice_period);
                    }
                }
                dst[y * w + x] = src[y * w + x] * mask / (FOOTPRINT * FOOTPRINT) as f64;
            }
        }
    }
    out
}

/// Keeps one channel per pixel according to `cfa`, then rebuilds the other
/// two by normalized bilinear interpolation of the recorded neighbours.
pub fn mosaic_demosaic(img: &Tensor, cfa: Cfa) -> Tensor {
    const GREEN: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]];
    const RED_BLUE: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
    let s = img.shape();
    let (h, w) = (s.h, s.w);
    let mut out = Tensor::zeros(s);
    for c in 0..3 {
        let kernel = if c == 1 { &GREEN } else { &RED_BLUE };
        let src = img.plane(0, c);
        let dst = out.plane_mut(0, c);
        for y in 0..h {
            for x in 0..w {
                let (mut num, mut den) = (0.0, 0.0);
                for (ky, row) in kernel.iter().enumerate() {
                    for (kx, &k) in row.iter().enumerate() {
                        let (yy, xx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                        if k == 0.0 || yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let (yy, xx) = (yy as usize, xx as usize);
                        if cfa.channel_at(yy, xx) == c {
                            num += k * src[yy * w + xx];
                            den += k;
                        }
                    }
                }
                dst[y * w + x] = if den > 0.0 { num / den } else { 0.0 };
            }
        }
    }
    out
}

fn check_clean(clean: &Tensor) -> Result<Shape> {
    let s = clean.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape(format!("synth expects a (1, 3, h, w) image, got {s}")));
    }
    if s.h < 2 || s.w < 2 {
        return Err(Error::shape(format!("synth image {}x{} is too small", s.h, s.w)));
    }
    if clean.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config("clean image values must lie in [0, 1]".into()));
    }
    Ok(s)
}

/// Produces the moiré version of `clean` described by `spec`.
pub fn synth_pair(clean: &Tensor, spec: &SynthSpec) -> Result<ImagePair> {
    check_clean(clean)?;
    spec.validate()?;
    let captured = mosaic_demosaic(&capture(clean, spec), spec.cfa);
    let a = spec.intensity;
    let data = clean
        .data()
        .iter()
        .zip(captured.data())
        .map(|(&c, &m)| ((1.0 - a) * c + a * m).clamp(0.0, 1.0))
        .collect();
    Ok(ImagePair {
        clean: clean.clone(),
        moire: Tensor::from_vec(clean.shape(), data)?,
        spec: *spec,
    })
}
