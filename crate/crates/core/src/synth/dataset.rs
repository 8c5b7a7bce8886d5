use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::moire::{synth_pair, Cfa, ImagePair, SynthSpec};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Inclusive ranges from which per-pair specs are drawn uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecRanges {
    pub angle: (f64, f64),
    pub scale: (f64, f64),
    pub lattice_period: (f64, f64),
    pub intensity: (f64, f64),
    /// Patterns to choose from.
    pub cfa: Vec<Cfa>,
}

impl Default for SpecRanges {
    fn default() -> Self {
        SpecRanges {
            angle: (-10.0, 10.0),
            scale: (0.9, 1.1),
            lattice_period: (2.05, 2.6),
            intensity: (0.15, 0.5),
            cfa: Cfa::ALL.to_vec(),
        }
    }
}

impl SpecRanges {
    /// Every range collapsed to the corresponding field of `spec`.
    pub fn point(spec: &SynthSpec) -> Self {
        SpecRanges {
            angle: (spec.angle, spec.angle),
            scale: (spec.scale, spec.scale),
            lattice_period: (spec.lattice_period, spec.lattice_period),
            intensity: (spec.intensity, spec.intensity),
            cfa: vec![spec.cfa],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("angle", self.angle),
            ("scale", self.scale),
            ("lattice_period", self.lattice_period),
            ("intensity", self.intensity),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is empty or not finite")));
            }
        }
        if self.cfa.is_empty() {
            return Err(Error::Config("no CFA pattern to choose from".into()));
        }
        let probe = SynthSpec {
            angle: self.angle.0,
            scale: self.scale.0,
            lattice_period: self.lattice_period.0,
            cfa: self.cfa[0],
            intensity: self.intensity.0,
            seed: 0,
        };
        probe.validate()?;
        SynthSpec {
            scale: self.scale.1,
            lattice_period: self.lattice_period.1,
            intensity: self.intensity.1,
            ..probe
        }
        .validate()
    }

    fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..=hi)
        }
    }

    /// Spec for pair `index` of a dataset generated with `seed`.
    pub fn sample(&self, seed: u64, index: usize) -> SynthSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        SynthSpec {
            angle: Self::draw(&mut rng, self.angle),
            scale: Self::draw(&mut rng, self.scale),
            lattice_period: Self::draw(&mut rng, self.lattice_period),
            intensity: Self::draw(&mut rng, self.intensity),
            cfa: self.cfa[rng.gen_range(0..self.cfa.len())],
            seed: rng.gen(),
        }
    }
}

/// Pairs split by index into training and validation parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Training pairs first, then validation pairs.
    pub fn iter(&self) -> impl Iterator<Item = &ImagePair> {
        self.train.iter().chain(&self.val)
    }
}

/// Number of training pairs among `n`: 90% rounded down, at least one.
pub fn train_count(n: usize) -> usize {
    (n * 9 / 10).max(1).min(n)
}

/// Builds `n_pairs` pairs; pair `i` uses source `i mod len` and a spec drawn
/// from `ranges`. Pairs are generated independently, so the result does not
/// depend on how the work is scheduled.
pub fn make_dataset(sources: &[Tensor], ranges: &SpecRanges, n_pairs: usize, seed: u64) -> Result<Dataset> {
    if sources.is_empty() {
        return Err(Error::Config("make_dataset: no source images".into()));
    }
    if n_pairs == 0 {
        return Err(Error::Config("make_dataset: n_pairs must be >= 1".into()));
    }
    ranges.validate()?;
    let work = sources[0].len() * 40;
    let pairs = par::map_indexed(n_pairs, work, |i| {
        synth_pair(&sources[i % sources.len()], &ranges.sample(seed, i))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut train = pairs;
    let val = train.split_off(train_count(n_pairs));
    Ok(Dataset { train, val })
}

fn crop(img: &Tensor, y: usize, x: usize, size: usize) -> Result<Tensor> {
    let s = img.shape();
    let mut out = Tensor::zeros(crate::tensor::Shape::new(s.n, s.c, size, size)?);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = img.plane(n, c);
            let dst = out.plane_mut(n, c);
            for r in 0..size {
                dst[r * size..(r + 1) * size].copy_from_slice(&src[(y + r) * s.w + x..(y + r) * s.w + x + size]);
            }
        }
    }
    Ok(out)
}

/// Square crop of both images at the same seeded offset.
pub fn sample_patch(pair: &ImagePair, size: usize, seed: u64) -> Result<ImagePair> {
    let s = pair.clean.shape();
    if size == 0 || size > s.h || size > s.w {
        return Err(Error::shape(format!("patch size {size} does not fit a {}x{} image", s.h, s.w)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = rng.gen_range(0..=s.h - size);
    let x = rng.gen_range(0..=s.w - size);
    Ok(ImagePair {
        clean: crop(&pair.clean, y, x, size)?,
        moire: crop(&pair.moire, y, x, size)?,
        spec: pair.spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::source::procedural_sources;

    fn sources() -> Vec<Tensor> {
        procedural_sources(3, 16, 16, 7).unwrap()
    }

    #[test]
    fn split_arithmetic() {
        let d = make_dataset(&sources(), &SpecRanges::default(), 10, 1).unwrap();
        assert_eq!((d.train.len(), d.val.len()), (9, 1));
        assert_eq!(train_count(1), 1);
        assert_eq!(train_count(64), 57);
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = make_dataset(&sources(), &SpecRanges::default(), 5, 3).unwrap();
        let b = make_dataset(&sources(), &SpecRanges::default(), 5, 3).unwrap();
        assert_eq!(a, b);
        let c = make_dataset(&sources(), &SpecRanges::default(), 5, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn independent_of_parallelism() {
        par::set_parallel(false);
        let a = make_dataset(&sources(), &SpecRanges::default(), 6, 3);
        par::set_parallel(true);
        let b = make_dataset(&sources(), &SpecRanges::default(), 6, 3);
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn point_ranges_fix_the_spec() {
        let spec = SynthSpec::default();
        let d = make_dataset(&sources(), &SpecRanges::point(&spec), 4, 2).unwrap();
        for p in d.iter() {
            assert_eq!(SynthSpec { seed: spec.seed, ..p.spec }, spec);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(make_dataset(&[], &SpecRanges::default(), 4, 0).is_err());
        assert!(make_dataset(&sources(), &SpecRanges::default(), 0, 0).is_err());
        let bad = SpecRanges {
            intensity: (0.5, 0.2),
            ..Default::default()
        };
        assert!(make_dataset(&sources(), &bad, 2, 0).is_err());
    }

    #[test]
    fn patches_are_aligned_and_seeded() {
        let d = make_dataset(&sources(), &SpecRanges::default(), 1, 5).unwrap();
        let pair = &d.train[0];
        assert_eq!(&sample_patch(pair, 16, 0).unwrap(), pair);
        let a = sample_patch(pair, 8, 1).unwrap();
        assert_eq!(a, sample_patch(pair, 8, 1).unwrap());
        let offsets: std::collections::HashSet<Vec<u64>> = (0..8)
            .map(|s| sample_patch(pair, 8, s).unwrap().clean.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert!(offsets.len() > 1);
        assert_eq!(a.spec, pair.spec);
        assert!(sample_patch(pair, 17, 0).is_err());
        // same offset in both images: locate the crop in the source
        let (s, full) = (8, &pair.clean);
        let found = (0..=8).flat_map(|y| (0..=8).map(move |x| (y, x))).find(|&(y, x)| {
            crop(full, y, x, s).unwrap() == a.clean && crop(&pair.moire, y, x, s).unwrap() == a.moire
        });
        assert!(found.is_some());
    }
}
