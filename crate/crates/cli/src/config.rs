//! `key = value` configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mddm::network::{LossConfig, ModelConfig};
use mddm::synth::{Cfa, SpecRanges};
use mddm::train::{Growth, Schedule, TrainConfig};

use crate::CliError;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for synthesis, initialization, shuffling and checks"),
    ("model.preset", "desk | reference | toy"),
    ("model.branches", "number of branches"),
    ("model.channels", "feature channels"),
    ("model.cdr_counts", "residual blocks per branch, comma separated (entry 0 unused)"),
    ("model.dfe", "feature-encoding bypass on/off"),
    ("model.nonlocal_grid", "region grid of the non-local blocks"),
    ("model.nonlocal_from", "first branch with a non-local block"),
    ("model.reduction", "channel-attention reduction"),
    ("synth.pairs", "number of pairs"),
    ("synth.size", "side of the square images"),
    ("synth.sources", "number of procedural source images"),
    ("synth.source_dir", "directory of PNG sources used instead of procedural ones"),
    ("synth.angle", "sensor angle range in degrees, 'lo,hi'"),
    ("synth.scale", "sensor scale range, 'lo,hi'"),
    ("synth.period", "lattice period range in pixels, 'lo,hi'"),
    ("synth.intensity", "blend intensity range, 'lo,hi'"),
    ("synth.cfa", "Bayer patterns to draw from, comma separated"),
    ("train.data", "dataset manifest"),
    ("train.resume", "checkpoint to continue from"),
    ("train.batch", "patches per step"),
    ("train.patch", "patch side"),
    ("train.epochs", "base-phase epochs"),
    ("train.finetune_epochs", "finetune-phase epochs"),
    ("train.lr", "initial learning rate"),
    ("train.decay_every", "epochs between rate drops"),
    ("train.decay_factor", "divisor applied at each drop"),
    ("train.finetune_lr", "finetune learning rate"),
    ("train.finetune_decay_every", "finetune epochs between rate drops"),
    ("train.grow", "branch growth plan 'epoch:blocks,...'"),
    ("train.loss_eps", "Charbonnier epsilon"),
    ("params.size", "input side for FLOP counts"),
    ("eval.split", "all | train | val"),
    ("gradcheck.configs", "random configurations per layer"),
    ("gradcheck.tol", "relative-error tolerance"),
    ("gradcheck.fault", "operation whose backward is corrupted (negative control)"),
];

/// Settings for `synth`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub pairs: usize,
    pub size: usize,
    pub sources: usize,
    pub source_dir: Option<PathBuf>,
    pub ranges: SpecRanges,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CliConfig {
    values: BTreeMap<String, String>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn check_key(key: &str) -> Result<(), CliError> {
    if KEYS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(usage(format!("unknown configuration key '{key}'")))
    }
}

impl CliConfig {
    /// Parses file text: `key = value` lines, `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut cfg = CliConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{origin}:{}: expected 'key = value'", i + 1)))?;
            let k = k.trim();
            check_key(k).map_err(|e| usage(format!("{origin}:{}: {e}", i + 1)))?;
            cfg.values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(cfg)
    }

    /// File (if any), then `key=value` overrides, then the seed flag.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Core(mddm::Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                }))?;
                Self::parse(&text, &p.display().to_string())?
            }
            None => CliConfig::default(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| usage(format!("override '{o}' is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = seed {
            cfg.set("seed", &s.to_string())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        check_key(key)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| usage(format!("{key} = '{v}': {e}"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    fn flag(&self, key: &str) -> Result<Option<bool>, CliError> {
        self.raw(key)
            .map(|v| match v {
                "1" | "true" | "on" | "yes" => Ok(true),
                "0" | "false" | "off" | "no" => Ok(false),
                _ => Err(usage(format!("{key} = '{v}': expected true or false"))),
            })
            .transpose()
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|x| x.trim().parse::<T>().map_err(|e| usage(format!("{key} = '{v}': {e}"))))
                    .collect()
            })
            .transpose()
    }

    /// A single value is a collapsed range.
    fn range(&self, key: &str, default: (f64, f64)) -> Result<(f64, f64), CliError> {
        match self.list::<f64>(key)? {
            None => Ok(default),
            Some(v) if v.len() == 1 => Ok((v[0], v[0])),
            Some(v) if v.len() == 2 => Ok((v[0], v[1])),
            Some(_) => Err(usage(format!("{key}: expected 'lo,hi' or a single value"))),
        }
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get_or("seed", 0)
    }

    pub fn model(&self) -> Result<ModelConfig, CliError> {
        let mut m = match self.raw("model.preset").unwrap_or("desk") {
            "desk" => ModelConfig::desk(),
            "reference" => ModelConfig::reference(),
            "toy" => ModelConfig::toy(),
            other => return Err(usage(format!("model.preset = '{other}': expected desk, reference or toy"))),
        };
        if let Some(b) = self.get("model.branches")? {
            m.branches = b;
            if self.raw("model.cdr_counts").is_none() {
                let last = m.cdr_counts.last().copied().unwrap_or(0);
                m.cdr_counts.resize(b, last);
            }
        }
        if let Some(c) = self.get("model.channels")? {
            m.channels = c;
        }
        if let Some(c) = self.list("model.cdr_counts")? {
            m.cdr_counts = c;
        }
        if let Some(d) = self.flag("model.dfe")? {
            m.dfe_enabled = d;
        }
        if let Some(g) = self.get("model.nonlocal_grid")? {
            m.nonlocal_grid = g;
        }
        if let Some(f) = self.get("model.nonlocal_from")? {
            m.nonlocal_from_branch = f;
        }
        if let Some(r) = self.get("model.reduction")? {
            m.attention_reduction = r;
        }
        m.seed = self.seed()?;
        m.validate().map_err(CliError::Core)?;
        Ok(m)
    }

    /// Training defaults are tuned for short desk runs; the schedule keeps
    /// the step-decay shape with a higher starting rate.
    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let d = Schedule::default();
        let schedule = Schedule {
            initial_lr: self.get_or("train.lr", 1e-3)?,
            decay_every: self.get_or("train.decay_every", 45)?,
            decay_factor: self.get_or("train.decay_factor", d.decay_factor)?,
            finetune_lr: self.get_or("train.finetune_lr", d.finetune_lr)?,
            finetune_decay_every: self.get_or("train.finetune_decay_every", d.finetune_decay_every)?,
        };
        let grow_plan = match self.raw("train.grow") {
            None | Some("") => Vec::new(),
            Some(v) => v
                .split(',')
                .map(|item| {
                    let (e, c) = item
                        .trim()
                        .split_once(':')
                        .ok_or_else(|| usage(format!("train.grow item '{item}' is not epoch:blocks")))?;
                    let bad = |_| usage(format!("train.grow item '{item}' is not epoch:blocks"));
                    Ok(Growth {
                        epoch: e.trim().parse().map_err(bad)?,
                        cdr_count: c.trim().parse().map_err(bad)?,
                    })
                })
                .collect::<Result<_, CliError>>()?,
        };
        Ok(TrainConfig {
            batch: self.get_or("train.batch", 4)?,
            patch: self.get_or("train.patch", 32)?,
            epochs: self.get_or("train.epochs", 60)?,
            finetune_epochs: self.get_or("train.finetune_epochs", 0)?,
            schedule,
            grow_plan,
            seed: self.seed()?,
            loss: LossConfig {
                eps: self.get_or("train.loss_eps", LossConfig::default().eps)?,
            },
        })
    }

    pub fn synth(&self) -> Result<SynthSettings, CliError> {
        let d = SpecRanges::default();
        let cfa = match self.list::<Cfa>("synth.cfa")? {
            Some(v) => v,
            None => d.cfa.clone(),
        };
        let ranges = SpecRanges {
            angle: self.range("synth.angle", d.angle)?,
            scale: self.range("synth.scale", d.scale)?,
            lattice_period: self.range("synth.period", d.lattice_period)?,
            intensity: self.range("synth.intensity", d.intensity)?,
            cfa,
        };
        ranges.validate().map_err(CliError::Core)?;
        let s = SynthSettings {
            pairs: self.get_or("synth.pairs", 64)?,
            size: self.get_or("synth.size", 64)?,
            sources: self.get_or("synth.sources", 16)?,
            source_dir: self.path("synth.source_dir"),
            ranges,
        };
        if s.pairs == 0 || s.size < 2 || s.sources == 0 {
            return Err(usage("synth.pairs and synth.sources must be >= 1 and synth.size >= 2"));
        }
        Ok(s)
    }
}
