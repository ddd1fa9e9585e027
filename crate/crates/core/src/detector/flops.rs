use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Toggles};
use crate::error::Result;
use crate::rfafpn::{BiFpn, DEFAULT_KERNELS};

/// `C_out·C_in_per_group·k²·H'·W'`
pub fn conv_macs(c_out: usize, c_in_per_group: usize, k: usize, h_out: usize, w_out: usize) -> u64 {
    (c_out * c_in_per_group * k * k * h_out * w_out) as u64
}

/// `in·out`
pub fn affine_macs(input: usize, output: usize) -> u64 {
    (input * output) as u64
}

/// Attention over `n` tokens of width `d` with query/key width `d_a`:
/// query and key projections, value projection, scores and mixing.
pub fn attention_macs(n: usize, d: usize, d_a: usize) -> u64 {
    (n * d * d_a * 2 + n * d * d + n * n * d_a + n * n * d) as u64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleFlops {
    pub module: String,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantFlops {
    pub variant: String,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    /// Inference cost per enabled block.
    pub modules: Vec<ModuleFlops>,
    pub total_macs: u64,
    /// `2 · total_macs`
    pub total_flops: u64,
    pub variants: Vec<VariantFlops>,
}

impl FlopReport {
    pub fn module(&self, name: &str) -> Option<u64> {
        self.modules.iter().find(|m| m.module == name).map(|m| m.macs)
    }
}

fn module_macs(cfg: &ModelConfig, t: &Toggles) -> Vec<ModuleFlops> {
    let s = cfg.input_size;
    let c = cfg.channels;
    let w = &cfg.stage_widths;
    let g = cfg.grid_sizes();
    let sq = |x: usize| x * x;

    let mut backbone = conv_macs(w[0], 3, 3, s, s);
    let h1 = s.div_ceil(2);
    backbone += conv_macs(w[1], w[0], 3, h1, h1);
    for l in 1..cfg.levels {
        backbone += conv_macs(w[l + 1], w[l], 3, g[l], g[l]);
    }
    for l in 0..cfg.levels {
        backbone += conv_macs(c, w[l + 1], 1, g[l], g[l]);
    }
    let mut out = vec![ModuleFlops {
        module: "backbone".into(),
        macs: backbone,
    }];

    if t.rfaconv {
        let per_pixel: usize = DEFAULT_KERNELS.iter().map(|k| c * k * k + c * c).sum();
        let macs = g.iter().map(|&x| (per_pixel * sq(x)) as u64).sum();
        out.push(ModuleFlops {
            module: "rfaconv".into(),
            macs,
        });
    }
    if t.bifpn {
        let macs = BiFpn::layout(cfg.levels)
            .iter()
            .map(|&(lvl, _)| conv_macs(c, 1, 3, g[lvl], g[lvl]) + conv_macs(c, c, 1, g[lvl], g[lvl]))
            .sum();
        out.push(ModuleFlops {
            module: "bifpn".into(),
            macs,
        });
    }
    if t.caa {
        let n = sq(g[0]);
        let macs = if t.self_attention {
            attention_macs(n, c, c.div_ceil(2))
        } else {
            affine_macs(c, c) * n as u64
        };
        out.push(ModuleFlops {
            module: "caa".into(),
            macs,
        });
    }
    out.push(ModuleFlops {
        module: "head".into(),
        macs: conv_macs(c, c, 3, g[0], g[0]) + conv_macs(cfg.prediction_len(), c, 1, g[0], g[0]),
    });
    out
}

/// Analytic inference cost of `cfg` and of every ablation variant. Training
/// only blocks (the discriminator) and data augmentation cost nothing here.
pub fn count_flops(cfg: &ModelConfig) -> Result<FlopReport> {
    cfg.validate()?;
    let modules = module_macs(cfg, &cfg.toggles);
    let total_macs = modules.iter().map(|m| m.macs).sum();
    let variants = Toggles::VARIANTS
        .iter()
        .map(|&name| {
            let macs: u64 = module_macs(cfg, &Toggles::variant(name)?).iter().map(|m| m.macs).sum();
            Ok(VariantFlops {
                variant: name.to_string(),
                macs,
                flops: 2 * macs,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FlopReport {
        modules,
        total_macs,
        total_flops: 2 * total_macs,
        variants,
    })
}
