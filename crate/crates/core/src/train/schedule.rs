use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Base,
    Finetune,
}

/// Step decay: the rate is divided by `decay_factor` every `decay_every` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub initial_lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub finetune_lr: f64,
    pub finetune_decay_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            initial_lr: 1e-4,
            decay_every: 30,
            decay_factor: 10.0,
            finetune_lr: 1e-5,
            finetune_decay_every: 50,
        }
    }
}

/// `x / 10^k`, computed on the decimal representation so that decimal
/// rates stay exact (1e-5 / 10 is 1e-6, not its binary neighbour).
fn decimal_shift(x: f64, k: i64) -> f64 {
    let s = format!("{x:e}");
    let (mantissa, exp) = s.split_once('e').expect("LowerExp always has an exponent");
    let exp: i64 = exp.parse().expect("integer exponent");
    format!("{mantissa}e{}", exp - k).parse().expect("valid float literal")
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.initial_lr > 0.0
            && self.finetune_lr > 0.0
            && self.decay_factor > 0.0
            && self.decay_every > 0
            && self.finetune_decay_every > 0
            && self.initial_lr.is_finite()
            && self.finetune_lr.is_finite()
            && self.decay_factor.is_finite();
        if !ok {
            return Err(Error::Config(format!("schedule values must all be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize, phase: Phase) -> f64 {
        let (base, every) = match phase {
            Phase::Base => (self.initial_lr, self.decay_every),
            Phase::Finetune => (self.finetune_lr, self.finetune_decay_every),
        };
        let k = (epoch / every) as i64;
        let digits = self.decay_factor.log10();
        if digits.fract() == 0.0 && 10f64.powi(digits as i32) == self.decay_factor {
            decimal_shift(base, k * digits as i64)
        } else {
            base / self.decay_factor.powi(k as i32)
        }
    }
}
