//! Checkpoint files.
//!
//! Layout: the line `MDDM1`, a `config key=value ...` line, one manifest line
//! per parameter tensor (`name 4 n c h w`), a blank line, the little-endian
//! f32 payloads in manifest order; then the optimizer block in the same
//! manifest/blank/payload layout with tensors `adam.m.<name>`,
//! `adam.v.<name>` and `adam.t.<name>` (step count).

use std::fs;
use std::path::Path;

use super::adam::Adam;
use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &str = "MDDM1";

/// Largest step count an f32 stores exactly.
const MAX_STEPS: u64 = 1 << 24;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optim: Adam,
    /// Completed epochs.
    pub epoch: usize,
}

fn fmt_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

fn config_line(cfg: &ModelConfig, optim: &Adam, epoch: usize) -> String {
    let counts: Vec<String> = cfg.cdr_counts.iter().map(|c| c.to_string()).collect();
    format!(
        "config branches={} channels={} cdr_counts={} dfe={} nl_grid={} nl_from={} reduction={} seed={} epoch={} lr={:e} beta1={:e} beta2={:e} eps={:e}",
        cfg.branches,
        cfg.channels,
        counts.join(","),
        u8::from(cfg.dfe_enabled),
        cfg.nonlocal_grid,
        cfg.nonlocal_from_branch,
        cfg.attention_reduction,
        cfg.seed,
        epoch,
        optim.lr,
        optim.beta1,
        optim.beta2,
        optim.eps
    )
}

fn push_block(out: &mut Vec<u8>, tensors: &[(String, &[f64], Shape)]) {
    for (name, _, s) in tensors {
        out.extend_from_slice(format!("{name} 4 {} {} {} {}\n", s.n, s.c, s.h, s.w).as_bytes());
    }
    out.push(b'\n');
    for (_, data, _) in tensors {
        for &v in data.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let mut optim = self.optim.clone();
        optim.sync(params);
        if let Some(&t) = optim.t.iter().find(|&&t| t > MAX_STEPS) {
            return Err(Error::Config(format!("step count {t} exceeds what a checkpoint can store")));
        }
        let mut out = Vec::new();
        out.extend_from_slice(format!("{MAGIC}\n").as_bytes());
        out.extend_from_slice(config_line(self.model.config(), &optim, self.epoch).as_bytes());
        out.push(b'\n');
        let block: Vec<(String, &[f64], Shape)> =
            params.iter().map(|(n, t)| (n.to_string(), t.data(), t.shape())).collect();
        push_block(&mut out, &block);
        let steps: Vec<[f64; 1]> = optim.t.iter().map(|&t| [t as f64]).collect();
        let one = Shape::new(1, 1, 1, 1)?;
        let mut opt_block = Vec::new();
        for (k, (name, t)) in params.iter().enumerate() {
            opt_block.push((format!("adam.m.{name}"), &optim.m[k][..], t.shape()));
            opt_block.push((format!("adam.v.{name}"), &optim.v[k][..], t.shape()));
            opt_block.push((format!("adam.t.{name}"), &steps[k][..], one));
        }
        push_block(&mut out, &opt_block);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.line()?;
        if magic != MAGIC {
            return Err(fmt_err(0, format!("bad magic '{magic}', expected {MAGIC}")));
        }
        let cfg_at = r.pos;
        let (cfg, mut optim, epoch) = parse_config(&r.line()?, cfg_at)?;
        let model = Model::new(&cfg).map_err(|e| fmt_err(cfg_at, format!("config rejected: {e}")))?;
        let mut model = model;
        let entries = r.block()?;
        load_params(&mut model.params, &entries)?;

        let opt_entries = r.block()?;
        optim.sync(&model.params);
        let expected = 3 * model.params.len();
        if opt_entries.len() != expected {
            let at = opt_entries.first().map_or(r.pos, |e| e.offset);
            return Err(fmt_err(at, format!("optimizer block has {} tensors, expected {expected}", opt_entries.len())));
        }
        for (k, (name, t)) in model.params.iter().enumerate() {
            let group = &opt_entries[3 * k..3 * k + 3];
            for (e, kind) in group.iter().zip(["m", "v", "t"]) {
                let want = format!("adam.{kind}.{name}");
                let shape = if kind == "t" { Shape::new(1, 1, 1, 1)? } else { t.shape() };
                if e.name != want || e.shape != shape {
                    return Err(fmt_err(e.offset, format!("expected {want} {shape}, found {} {}", e.name, e.shape)));
                }
            }
            optim.m[k] = group[0].data.clone();
            optim.v[k] = group[1].data.clone();
            let steps = group[2].data[0];
            if steps < 0.0 || steps.fract() != 0.0 {
                return Err(fmt_err(group[2].offset, format!("step count {steps} is not a whole number")));
            }
            optim.t[k] = steps as u64;
        }
        if r.pos != bytes.len() {
            return Err(fmt_err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { model, optim, epoch })
    }
}

fn load_params(params: &mut ParamStore, entries: &[Entry]) -> Result<()> {
    if entries.len() != params.len() {
        let at = entries.first().map_or(0, |e| e.offset);
        return Err(fmt_err(
            at,
            format!("{} parameter tensors, the configured model has {}", entries.len(), params.len()),
        ));
    }
    for e in entries {
        let id = params
            .id(&e.name)
            .ok_or_else(|| fmt_err(e.offset, format!("unknown parameter '{}'", e.name)))?;
        if params.get(id).shape() != e.shape {
            return Err(fmt_err(
                e.offset,
                format!("{} has shape {}, expected {}", e.name, e.shape, params.get(id).shape()),
            ));
        }
        *params.get_mut(id) = Tensor::from_vec(e.shape, e.data.clone())?;
    }
    Ok(())
}

fn parse_config(line: &str, offset: usize) -> Result<(ModelConfig, Adam, usize)> {
    let rest = line
        .strip_prefix("config ")
        .ok_or_else(|| fmt_err(offset, "missing config line"))?;
    let mut cfg = ModelConfig::desk();
    let mut optim = Adam::new(0.0);
    let mut epoch = 0;
    let mut seen = Vec::new();
    for field in rest.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| fmt_err(offset, format!("config field '{field}' is not key=value")))?;
        let bad = || fmt_err(offset, format!("bad value for {k}: '{v}'"));
        let int = || v.parse::<usize>().map_err(|_| bad());
        let real = || v.parse::<f64>().map_err(|_| bad());
        match k {
            "branches" => cfg.branches = int()?,
            "channels" => cfg.channels = int()?,
            "cdr_counts" => {
                cfg.cdr_counts = v.split(',').map(|x| x.parse().map_err(|_| bad())).collect::<Result<_>>()?
            }
            "dfe" => cfg.dfe_enabled = int()? != 0,
            "nl_grid" => cfg.nonlocal_grid = int()?,
            "nl_from" => cfg.nonlocal_from_branch = int()?,
            "reduction" => cfg.attention_reduction = int()?,
            "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
            "epoch" => epoch = int()?,
            "lr" => optim.lr = real()?,
            "beta1" => optim.beta1 = real()?,
            "beta2" => optim.beta2 = real()?,
            "eps" => optim.eps = real()?,
            _ => return Err(fmt_err(offset, format!("unknown config key '{k}'"))),
        }
        seen.push(k.to_string());
    }
    for required in ["branches", "channels", "cdr_counts", "dfe", "nl_grid", "nl_from", "reduction", "seed", "epoch", "lr"] {
        if !seen.iter().any(|s| s == required) {
            return Err(fmt_err(offset, format!("config line lacks '{required}'")));
        }
    }
    Ok((cfg, optim, epoch))
}

struct Entry {
    name: String,
    shape: Shape,
    data: Vec<f64>,
    offset: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn line(&mut self) -> Result<String> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt_err(self.pos, "unterminated header line"))?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| fmt_err(self.pos, "header is not UTF-8"))?;
        self.pos += end + 1;
        Ok(line.to_string())
    }

    /// Manifest lines up to a blank line, then their payloads.
    fn block(&mut self) -> Result<Vec<Entry>> {
        let mut entries = Vec::new();
        loop {
            let at = self.pos;
            let line = self.line()?;
            if line.is_empty() {
                break;
            }
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 6 || f[1] != "4" {
                return Err(fmt_err(at, format!("bad manifest line '{line}'")));
            }
            let dims: Vec<usize> = f[2..]
                .iter()
                .map(|d| d.parse().map_err(|_| fmt_err(at, format!("bad dimension '{d}'"))))
                .collect::<Result<_>>()?;
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]).map_err(|e| fmt_err(at, e.to_string()))?;
            entries.push(Entry {
                name: f[0].to_string(),
                shape,
                data: Vec::new(),
                offset: at,
            });
        }
        for e in &mut entries {
            let need = e.shape.len() * 4;
            if self.bytes.len() - self.pos < need {
                return Err(fmt_err(
                    self.pos,
                    format!("payload of {} truncated: need {need} bytes, {} left", e.name, self.bytes.len() - self.pos),
                ));
            }
            e.offset = self.pos;
            e.data = self.bytes[self.pos..self.pos + need]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            self.pos += need;
        }
        Ok(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LossConfig;
    use crate::tensor::Fill;

    fn trained_checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            channels: 4,
            attention_reduction: 4,
            ..ModelConfig::desk()
        };
        let mut model = Model::new(&cfg).unwrap();
        let mut optim = Adam::new(1e-3);
        let x = Tensor::new([1, 3, 16, 16], Fill::Uniform { lo: 0.0, hi: 1.0, seed: 1 }).unwrap();
        let y = Tensor::new([1, 3, 16, 16], Fill::Uniform { lo: 0.0, hi: 1.0, seed: 2 }).unwrap();
        for _ in 0..2 {
            let (_, g) = model.net.loss_and_grads(&model.params, &x, &y, &LossConfig::default()).unwrap();
            optim.step(&mut model.params, &g).unwrap();
        }
        Checkpoint { model, optim, epoch: 7 }
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let ck = trained_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        assert!(bytes.starts_with(b"MDDM1\nconfig branches=3 "));
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.epoch, 7);
        assert_eq!(back.model.config(), ck.model.config());
        assert_eq!(back.optim.t, ck.optim.t);
        assert_eq!(back.optim.lr, 1e-3);
    }

    #[test]
    fn inference_survives_single_precision() {
        let ck = trained_checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let x = Tensor::new([1, 3, 16, 16], Fill::Uniform { lo: 0.0, hi: 1.0, seed: 3 }).unwrap();
        let (a, b) = (ck.model.forward(&x).unwrap(), back.model.forward(&x).unwrap());
        let worst = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-6, "{worst}");
    }

    #[test]
    fn corruption_is_reported_with_offsets() {
        let bytes = trained_checkpoint().to_bytes().unwrap();
        for cut in [3, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        let err = Checkpoint::from_bytes(&extra).unwrap_err();
        assert!(err.to_string().contains(&format!("byte {}", bytes.len())), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let ck = trained_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        back.save(&dir.path().join("again.ckpt")).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(dir.path().join("again.ckpt")).unwrap());
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
