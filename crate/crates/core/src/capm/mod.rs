//! Context-adaptive prototype modulator.
//!
//! A four-stage plug-in that turns a set of demonstrations into a
//! multiplicative gate on an attention output:
//!
//! 1. [`encode_demo`]: segment-masked cross-attention from learnable queries
//!    onto each demonstration's tokens gives an instruction anchor, a
//!    response anchor and `K` context slots.
//! 2. [`modulate`] + [`interact`]: the slots are pooled into a global token
//!    that is modulated by a rank-`r` transform predicted from the anchors;
//!    the per-demo tokens then pass through one self-attention block.
//! 3. [`assemble_bank`] + [`route`]: all tokens and slots are calibrated into
//!    a unit-norm prototype bank that backbone states query by cosine
//!    attention with an inferred temperature.
//! 4. [`gate`]: `Y' = Y ⊙ σ(W₂·GELU(W₁·[LN(h); C] + b₁) + b₂)`.
//!
//! `W₂` starts at zero, so a freshly initialized module multiplies `Y` by the
//! constant `σ(b₂)` whatever the demonstrations are.
//!
//! All arithmetic is `f64`. Reverse-mode gradients are hand derived
//! ([`capm_backward`]) and checked against central differences
//! ([`gradcheck`]).

mod backward;
mod diagnostics;
mod forward;
pub mod gradcheck;
pub mod layers;
mod params;

pub use backward::{capm_backward, CapmGradients};
pub use diagnostics::{forward_diagnostics, LayerDiagnostics, StateNorms};
pub use forward::{
    assemble_bank, capm_forward, encode_demo, gate, interact, modulate, route, CapmTrace,
    DemoInput, DemoSlots, RouteOutput, Segment, TAU_LOGIT_BOUND,
};
pub use params::{CapmParams, SlotKind};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CapmError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("demonstration {demo}: {segment:?} segment has no tokens")]
    EmptySegment { demo: usize, segment: Segment },
    #[error("bank row {0} has zero norm after calibration")]
    ZeroNormRow(usize),
    #[error("diagnostics: {0}")]
    TraceMismatch(String),
    #[error("parameter file: {0}")]
    Format(String),
}

/// Module sizes and fixed constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapmHyper {
    /// Backbone width.
    pub d_b: usize,
    /// Prototype width.
    pub d_p: usize,
    /// Number of generic context probes.
    pub k: usize,
    /// Rank of the modulation.
    pub r: usize,
    pub eta: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    /// Initial gate bias.
    pub b2_init: f64,
    /// Heads of the encoder and interaction attention; must divide `d_p`.
    pub heads: usize,
    /// Hidden width of the gating bottleneck.
    pub gate_hidden: usize,
}

impl Default for CapmHyper {
    fn default() -> Self {
        Self {
            d_b: 12,
            d_p: 8,
            k: 2,
            r: 2,
            eta: 0.1,
            tau_min: 0.05,
            tau_max: 2.0,
            b2_init: 4.0,
            heads: 2,
            gate_hidden: 8,
        }
    }
}

impl CapmHyper {
    /// Hidden width of the coefficient head.
    pub fn coef_hidden(&self) -> usize {
        2 * self.d_p
    }

    /// Output width of the coefficient head: `u`, `v` (each `r × d_p`) and `α`.
    pub fn coef_out(&self) -> usize {
        2 * self.r * self.d_p + self.r
    }

    /// Hidden width of the temperature MLP.
    pub fn tau_hidden(&self) -> usize {
        self.d_p
    }

    /// Bank rows per demonstration: `z`, both anchors and `K` slots.
    pub fn slots_per_demo(&self) -> usize {
        self.k + 3
    }

    pub fn validate(&self) -> Result<(), CapmError> {
        let bad = |m: String| Err(CapmError::InvalidHyper(m));
        for (name, v) in [
            ("d_b", self.d_b),
            ("d_p", self.d_p),
            ("k", self.k),
            ("r", self.r),
            ("heads", self.heads),
            ("gate_hidden", self.gate_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !self.d_p.is_multiple_of(self.heads) {
            return bad(format!("heads ({}) must divide d_p ({})", self.heads, self.d_p));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if !(self.tau_min > 0.0 && self.tau_min.is_finite()) {
            return bad(format!("tau_min must be > 0, got {}", self.tau_min));
        }
        if !(self.tau_max > self.tau_min && self.tau_max.is_finite()) {
            return bad(format!(
                "tau_max ({}) must exceed tau_min ({})",
                self.tau_max, self.tau_min
            ));
        }
        if !(self.b2_init > 0.0 && self.b2_init.is_finite()) {
            return bad(format!("b2_init must be > 0, got {}", self.b2_init));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyper_is_valid() {
        let h = CapmHyper::default();
        h.validate().unwrap();
        assert_eq!(h.eta, 0.1);
        assert_eq!(h.b2_init, 4.0);
        assert_eq!((h.tau_min, h.tau_max), (0.05, 2.0));
        assert_eq!(h.coef_out(), 2 * 2 * 8 + 2);
    }

    #[test]
    fn rejects_bad_hyper() {
        let base = CapmHyper::default();
        for h in [
            CapmHyper { tau_max: 0.05, ..base },
            CapmHyper { heads: 3, ..base },
            CapmHyper { r: 0, ..base },
            CapmHyper { eta: -0.1, ..base },
            CapmHyper { b2_init: 0.0, ..base },
            CapmHyper { tau_min: 0.0, ..base },
        ] {
            assert!(h.validate().is_err(), "{h:?}");
        }
    }
}
