use crate::error::{Error, Result};

pub const MAX_BRANCHES: usize = 6;

/// Architecture of the multi-branch model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of resolution branches, 1 to 6. Branch `i` works at 1/2^i scale.
    pub branches: usize,
    pub channels: usize,
    /// Residual blocks per branch; entry 0 (the full-resolution branch) is unused.
    pub cdr_counts: Vec<usize>,
    pub dfe_enabled: bool,
    pub nonlocal_grid: usize,
    /// First branch index that ends with a non-local block.
    pub nonlocal_from_branch: usize,
    pub attention_reduction: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: three branches, 16 channels.
    pub fn desk() -> Self {
        ModelConfig {
            branches: 3,
            channels: 16,
            cdr_counts: vec![0, 2, 3],
            dfe_enabled: true,
            nonlocal_grid: 2,
            nonlocal_from_branch: 2,
            attention_reduction: 16,
            seed: 0,
        }
    }

    /// Full six-branch configuration, 64 channels.
    pub fn reference() -> Self {
        ModelConfig {
            branches: 6,
            channels: 64,
            cdr_counts: vec![0, 3, 4, 5, 6, 7],
            dfe_enabled: true,
            nonlocal_grid: 2,
            nonlocal_from_branch: 2,
            attention_reduction: 16,
            seed: 0,
        }
    }

    /// Small configuration used by the end-to-end gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            branches: 3,
            channels: 4,
            cdr_counts: vec![0, 1, 2],
            dfe_enabled: true,
            nonlocal_grid: 2,
            nonlocal_from_branch: 2,
            attention_reduction: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_BRANCHES).contains(&self.branches) {
            return Err(Error::Config(format!(
                "branches must be in 1..={MAX_BRANCHES}, got {}",
                self.branches
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be >= 1".into()));
        }
        if self.cdr_counts.len() != self.branches {
            return Err(Error::Config(format!(
                "cdr_counts has {} entries for {} branches",
                self.cdr_counts.len(),
                self.branches
            )));
        }
        let deep = &self.cdr_counts[1.min(self.branches)..];
        if deep.contains(&0) {
            return Err(Error::Config("every branch >= 1 needs at least one residual block".into()));
        }
        if deep.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "cdr_counts must be non-decreasing from branch 1: {:?}",
                self.cdr_counts
            )));
        }
        if self.attention_reduction == 0 || !self.channels.is_multiple_of(self.attention_reduction) {
            return Err(Error::Config(format!(
                "channels {} not divisible by attention_reduction {}",
                self.channels, self.attention_reduction
            )));
        }
        if self.nonlocal_grid == 0 {
            return Err(Error::Config("nonlocal_grid must be >= 1".into()));
        }
        if self.nonlocal_from_branch == 0 {
            return Err(Error::Config("nonlocal_from_branch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn has_nonlocal(&self, branch: usize) -> bool {
        branch >= 1 && branch >= self.nonlocal_from_branch
    }

    /// Input height and width must be multiples of this value: every branch
    /// halves the resolution, and non-local branches split their map into a
    /// `nonlocal_grid` × `nonlocal_grid` arrangement of regions.
    pub fn divisor(&self) -> usize {
        let mut d = 1usize << (self.branches - 1);
        if self.has_nonlocal(self.branches - 1) {
            d *= self.nonlocal_grid;
        }
        // lcm with shallower non-local branches is already covered: 2^i * grid
        // divides 2^(B-1) * grid for i < B.
        d
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(Error::shape(format!(
                "input {h}x{w} must be divisible by {d} for {} branches",
                self.branches
            )));
        }
        Ok(())
    }

    /// Same architecture restricted to the first `branches` branches.
    pub fn truncated(&self, branches: usize) -> ModelConfig {
        let mut c = self.clone();
        c.branches = branches;
        c.cdr_counts.truncate(branches);
        c
    }

    /// Appends one branch with `cdr_count` residual blocks.
    pub fn grown(&self, cdr_count: usize) -> Result<ModelConfig> {
        let mut c = self.clone();
        c.branches += 1;
        c.cdr_counts.push(cdr_count);
        c.validate()?;
        Ok(c)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::reference().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn rejects_decreasing_depth() {
        let mut c = ModelConfig::desk();
        c.cdr_counts = vec![0, 3, 2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_bad_reduction_and_branch_count() {
        let mut c = ModelConfig::desk();
        c.attention_reduction = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.branches = 7;
        c.cdr_counts = vec![0, 1, 1, 1, 1, 1, 1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn divisor_accounts_for_region_grid() {
        assert_eq!(ModelConfig::desk().divisor(), 8);
        assert_eq!(ModelConfig::desk().truncated(2).divisor(), 2);
        assert_eq!(ModelConfig::desk().truncated(1).divisor(), 1);
        assert!(ModelConfig::desk().check_input(32, 32).is_ok());
        assert!(ModelConfig::desk().check_input(36, 32).is_err());
    }
}
