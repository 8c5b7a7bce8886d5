//! Closed-form parameter and FLOP counts.
//!
//! FLOPs count convolutions only: `2·k²·in·out·out_h·out_w` per layer.

use super::config::ModelConfig;
use crate::layers::nonlocal::embed_channels;

fn conv_params(in_c: usize, out_c: usize, k: usize, bias: bool) -> u64 {
    (k * k * in_c * out_c + if bias { out_c } else { 0 }) as u64
}

fn conv_flops(in_c: usize, out_c: usize, k: usize, oh: usize, ow: usize) -> u64 {
    2 * (k * k * in_c * out_c) as u64 * (oh * ow) as u64
}

/// Cost of one branch, with the DFE bypass reported separately (and also
/// included in the totals).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BranchCost {
    pub params: u64,
    pub flops: u64,
    pub dfe_params: u64,
    pub dfe_flops: u64,
}

/// Per-branch costs, including each branch's head and scale; `h`, `w` is
/// the model input size.
pub fn branch_costs(cfg: &ModelConfig, h: usize, w: usize) -> Vec<BranchCost> {
    let c = cfg.channels;
    let mut out = Vec::with_capacity(cfg.branches);
    let head = BranchCost {
        params: conv_params(c, 3, 3, true) + 1,
        flops: conv_flops(c, 3, 3, h, w),
        ..Default::default()
    };
    let mut b0 = head;
    for in_c in [3, c, c] {
        b0.params += conv_params(in_c, c, 3, true) + c as u64;
        b0.flops += conv_flops(in_c, c, 3, h, w);
    }
    out.push(b0);
    for i in 1..cfg.branches {
        let (bh, bw) = (h >> i, w >> i);
        let k = cfg.cdr_counts[i];
        let mut b = head;
        // downsample
        b.params += conv_params(c, c, 3, true) + c as u64;
        b.flops += conv_flops(c, c, 3, bh, bw);
        // residual blocks
        let r = c / cfg.attention_reduction;
        let block_params = conv_params(c, c, 3, true)
            + conv_params(c, c, 3, !cfg.dfe_enabled)
            + c as u64
            + conv_params(c, r, 1, true)
            + r as u64
            + conv_params(r, c, 1, true);
        let block_flops = 2 * conv_flops(c, c, 3, bh, bw) + conv_flops(c, r, 1, 1, 1) + conv_flops(r, c, 1, 1, 1);
        b.params += k as u64 * block_params;
        b.flops += k as u64 * block_flops;
        if cfg.dfe_enabled {
            b.dfe_params = k as u64 * (conv_params(c, c, 3, true) + c as u64);
            b.dfe_flops = k as u64 * conv_flops(c, c, 3, bh, bw);
            b.params += b.dfe_params;
            b.flops += b.dfe_flops;
        }
        if cfg.has_nonlocal(i) {
            let m = embed_channels(c);
            b.params += conv_params(c, m, 1, true) + conv_params(c, m, 1, false) + conv_params(c, m, 1, true);
            b.params += conv_params(m, c, 1, true);
            b.flops += 3 * conv_flops(c, m, 1, bh, bw) + conv_flops(m, c, 1, bh, bw);
        }
        for s in 0..i {
            let (sh, sw) = (h >> (i - s), w >> (i - s));
            b.params += conv_params(c, 4 * c, 3, true) + c as u64;
            b.flops += conv_flops(c, 4 * c, 3, sh, sw);
        }
        out.push(b);
    }
    out
}

/// Exact number of learnable scalars.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    branch_costs(cfg, 0, 0).iter().map(|b| b.params).sum()
}

pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
    branch_costs(cfg, h, w).iter().map(|b| b.flops).sum()
}
