//! 8-bit RGB PNG files and the tab-separated pair manifest.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use super::moire::{ImagePair, SynthSpec};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Quantizes a `(1, 3, h, w)` tensor to 8 bits after clamping to [0, 1].
pub fn to_rgb8(img: &Tensor) -> Result<RgbImage> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape(format!("PNG export needs a (1, 3, h, w) tensor, got {s}")));
    }
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = RgbImage::new(s.w as u32, s.h as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        px.0 = [q(img.plane(0, 0)[i]), q(img.plane(0, 1)[i]), q(img.plane(0, 2)[i])];
    }
    Ok(out)
}

pub fn from_rgb8(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(Shape::new(1, 3, h, w)?);
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out.plane_mut(0, c)[i] = f64::from(px.0[c]) / 255.0;
        }
    }
    Ok(out)
}

pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let rgb = to_rgb8(img)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    rgb.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| image_err(path, e))?;
    from_rgb8(&img.to_rgb8())
}

pub const MANIFEST_HEADER: &str = "#clean\tmoire\tsplit\tangle\tscale\tperiod\tcfa\tintensity\tseed";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One manifest line. Image paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    pub moire: PathBuf,
    pub split: Split,
    pub spec: SynthSpec,
}

impl ManifestEntry {
    fn line(&self) -> String {
        let s = &self.spec;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.clean.display(),
            self.moire.display(),
            self.split.name(),
            s.angle,
            s.scale,
            s.lattice_period,
            s.cfa,
            s.intensity,
            s.seed
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("manifest line {lineno}: {what}"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(bad(&format!("expected 9 tab-separated fields, found {}", f.len())));
        }
        let num = |i: usize, name: &str| f[i].parse::<f64>().map_err(|_| bad(&format!("bad {name} '{}'", f[i])));
        let split = match f[2] {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(bad(&format!("bad split '{other}'"))),
        };
        Ok(ManifestEntry {
            clean: PathBuf::from(f[0]),
            moire: PathBuf::from(f[1]),
            split,
            spec: SynthSpec {
                angle: num(3, "angle")?,
                scale: num(4, "scale")?,
                lattice_period: num(5, "period")?,
                cfa: f[6].parse().map_err(|_| bad(&format!("bad cfa '{}'", f[6])))?,
                intensity: num(7, "intensity")?,
                seed: f[8].parse().map_err(|_| bad(&format!("bad seed '{}'", f[8])))?,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&e.line());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|(i, l)| ManifestEntry::parse(l, i + 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest { root, entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Image files named by the manifest that do not exist.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        self.entries
            .iter()
            .flat_map(|e| [self.resolve(&e.clean), self.resolve(&e.moire)])
            .filter(|p| !p.is_file())
            .collect()
    }

    /// Loads every pair of the given split.
    pub fn load_pairs(&self, split: Split) -> Result<Vec<ImagePair>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let clean = read_png(&self.resolve(&e.clean))?;
                let moire = read_png(&self.resolve(&e.moire))?;
                if clean.shape() != moire.shape() {
                    return Err(Error::shape(format!(
                        "{}: clean {} and moire {} differ in size",
                        e.clean.display(),
                        clean.shape(),
                        moire.shape()
                    )));
                }
                Ok(ImagePair {
                    clean,
                    moire,
                    spec: e.spec,
                })
            })
            .collect()
    }
}

/// Writes `pair_{i:04}_clean.png` / `pair_{i:04}_moire.png` for every pair
/// plus `manifest.tsv` into `dir`, and returns the manifest.
pub fn write_dataset(dir: &Path, dataset: &super::dataset::Dataset) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    let splits = dataset
        .train
        .iter()
        .map(|p| (p, Split::Train))
        .chain(dataset.val.iter().map(|p| (p, Split::Val)));
    for (i, (pair, split)) in splits.enumerate() {
        let clean = PathBuf::from(format!("pair_{i:04}_clean.png"));
        let moire = PathBuf::from(format!("pair_{i:04}_moire.png"));
        write_png(&dir.join(&clean), &pair.clean)?;
        write_png(&dir.join(&moire), &pair.moire)?;
        entries.push(ManifestEntry {
            clean,
            moire,
            split,
            spec: pair.spec,
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.write(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::dataset::{make_dataset, SpecRanges};
    use crate::synth::source::procedural_sources;
    use crate::tensor::Fill;

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Tensor::new([1, 3, 5, 7], Fill::Uniform { lo: -0.1, hi: 1.1, seed: 1 }).unwrap();
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a.clamp(0.0, 1.0) - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        write_png(&path, &back).unwrap();
        assert_eq!(read_png(&path).unwrap(), back);
    }

    #[test]
    fn unreadable_png_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        assert!(matches!(read_png(&path), Err(Error::Io { .. })));
        fs::write(&path, b"not a png").unwrap();
        assert!(matches!(read_png(&path), Err(Error::Image { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sources = procedural_sources(2, 8, 8, 1).unwrap();
        let ds = make_dataset(&sources, &SpecRanges::default(), 4, 2).unwrap();
        let m = write_dataset(dir.path(), &ds).unwrap();
        let n_png = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
            .count();
        assert_eq!(n_png, 8);
        let back = Manifest::read(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(back, m);
        assert!(back.missing_files().is_empty());
        assert_eq!(back.load_pairs(Split::Train).unwrap().len(), 3);
        let val = back.load_pairs(Split::Val).unwrap();
        assert_eq!(val[0].spec, ds.val[0].spec);
    }

    #[test]
    fn malformed_manifest_lines_are_rejected() {
        assert!(Manifest::parse("a\tb\n", PathBuf::new()).is_err());
        let line = "a.png\tb.png\ttrain\t1\t1\t2\tqqqq\t0.5\t3";
        let err = Manifest::parse(line, PathBuf::new()).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}
