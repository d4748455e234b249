//! Pipeline defaults, an optional JSON config file, and the merge with flags.
//!
//! Precedence is flag, then config file, then built-in default. The seed
//! additionally falls back to `FORGE_SEED` before the default of 0.

use std::path::Path;

use forge_core::capm::CapmHyper;
use forge_core::episode::DEFAULT_MAX_SHOTS;
use forge_core::fusion::{DEFAULT_BETA, DEFAULT_LAMBDA, DEFAULT_TOP_N};
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_SHOTS_GRID: [usize; 5] = [0, 1, 2, 4, 8];

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub top_n: Option<usize>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub shots_grid: Option<Vec<usize>>,
    #[serde(default)]
    pub capm: CapmOverrides,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapmOverrides {
    pub d_b: Option<usize>,
    pub d_p: Option<usize>,
    pub k: Option<usize>,
    pub r: Option<usize>,
    pub eta: Option<f64>,
    pub tau_min: Option<f64>,
    pub tau_max: Option<f64>,
    pub b2_init: Option<f64>,
    pub heads: Option<usize>,
    pub gate_hidden: Option<usize>,
}

impl CapmOverrides {
    /// Fields set in `top` win over fields set in `self`.
    pub fn overlay(&self, top: &CapmOverrides) -> CapmOverrides {
        CapmOverrides {
            d_b: top.d_b.or(self.d_b),
            d_p: top.d_p.or(self.d_p),
            k: top.k.or(self.k),
            r: top.r.or(self.r),
            eta: top.eta.or(self.eta),
            tau_min: top.tau_min.or(self.tau_min),
            tau_max: top.tau_max.or(self.tau_max),
            b2_init: top.b2_init.or(self.b2_init),
            heads: top.heads.or(self.heads),
            gate_hidden: top.gate_hidden.or(self.gate_hidden),
        }
    }

    pub fn apply(&self, base: CapmHyper) -> CapmHyper {
        CapmHyper {
            d_b: self.d_b.unwrap_or(base.d_b),
            d_p: self.d_p.unwrap_or(base.d_p),
            k: self.k.unwrap_or(base.k),
            r: self.r.unwrap_or(base.r),
            eta: self.eta.unwrap_or(base.eta),
            tau_min: self.tau_min.unwrap_or(base.tau_min),
            tau_max: self.tau_max.unwrap_or(base.tau_max),
            b2_init: self.b2_init.unwrap_or(base.b2_init),
            heads: self.heads.unwrap_or(base.heads),
            gate_hidden: self.gate_hidden.unwrap_or(base.gate_hidden),
        }
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForgeConfig {
    pub lambda: f64,
    pub beta: f64,
    pub top_n: usize,
    pub k: usize,
    pub seed: u64,
    pub shots_grid: Vec<usize>,
    pub capm: CapmHyper,
}

/// Values given on the command line, all optional.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub top_n: Option<usize>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub capm: CapmOverrides,
}

pub fn load_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("FORGE_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("FORGE_SEED={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

pub fn resolve(file: Option<&FileConfig>, flags: &FlagOverrides) -> Result<ForgeConfig> {
    let empty = FileConfig::default();
    let file = file.unwrap_or(&empty);
    let seed = match flags.seed.or(file.seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let cfg = ForgeConfig {
        lambda: flags.lambda.or(file.lambda).unwrap_or(DEFAULT_LAMBDA),
        beta: flags.beta.or(file.beta).unwrap_or(DEFAULT_BETA),
        top_n: flags.top_n.or(file.top_n).unwrap_or(DEFAULT_TOP_N),
        k: flags.k.or(file.k).unwrap_or(DEFAULT_K),
        seed,
        shots_grid: file
            .shots_grid
            .clone()
            .unwrap_or_else(|| DEFAULT_SHOTS_GRID.to_vec()),
        capm: file.capm.overlay(&flags.capm).apply(CapmHyper::default()),
    };
    cfg.validate()?;
    Ok(cfg)
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(usage(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(usage(format!("beta must be positive, got {}", self.beta)));
        }
        if self.top_n == 0 {
            return Err(usage("top_n must be at least 1"));
        }
        if self.k == 0 || self.k > DEFAULT_MAX_SHOTS {
            return Err(usage(format!(
                "k must lie in 1..={DEFAULT_MAX_SHOTS}, got {}",
                self.k
            )));
        }
        if self.shots_grid.first() != Some(&0)
            || self.shots_grid.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(usage(format!(
                "shots_grid must start at 0 and increase strictly, got {:?}",
                self.shots_grid
            )));
        }
        self.capm.validate().map_err(usage)?;
        Ok(())
    }
}
