use serde::{Deserialize, Serialize};

use super::{CapmError, CapmTrace};
use crate::linalg::{norm, Mat};

/// Mean Euclidean row norms at one call site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateNorms {
    /// Hidden state after injection, `h + Y'`.
    pub hidden_norm: f64,
    /// The residual contribution `Y'`.
    pub residual_norm: f64,
    /// The raw attention output `Y`.
    pub attention_out_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub zero_shot: StateNorms,
    pub k_shot: StateNorms,
    /// Mean row distance between the k-shot and zero-shot hidden states.
    pub representation_shift: f64,
}

fn mean_row_norm(m: &Mat) -> f64 {
    if m.rows() == 0 {
        return 0.0;
    }
    m.iter_rows().map(norm).sum::<f64>() / m.rows() as f64
}

fn hidden(trace: &CapmTrace) -> Mat {
    trace.h.add(&trace.y_prime)
}

fn state_norms(trace: &CapmTrace) -> StateNorms {
    StateNorms {
        hidden_norm: mean_row_norm(&hidden(trace)),
        residual_norm: mean_row_norm(&trace.y_prime),
        attention_out_norm: mean_row_norm(&trace.y),
    }
}

/// Compares traces of the same inputs run with and without demonstrations,
/// one trace per call site, in layer order.
pub fn forward_diagnostics(
    zero_shot: &[CapmTrace],
    k_shot: &[CapmTrace],
) -> Result<Vec<LayerDiagnostics>, CapmError> {
    if zero_shot.len() != k_shot.len() {
        return Err(CapmError::TraceMismatch(format!(
            "{} zero-shot traces but {} k-shot traces",
            zero_shot.len(),
            k_shot.len()
        )));
    }
    zero_shot
        .iter()
        .zip(k_shot)
        .enumerate()
        .map(|(layer, (z, k))| {
            if z.y_prime.shape() != k.y_prime.shape() {
                return Err(CapmError::TraceMismatch(format!(
                    "layer {layer}: output shapes {:?} and {:?}",
                    z.y_prime.shape(),
                    k.y_prime.shape()
                )));
            }
            let diff = hidden(k).add(&hidden(z).scale(-1.0));
            Ok(LayerDiagnostics {
                layer,
                zero_shot: state_norms(z),
                k_shot: state_norms(k),
                representation_shift: mean_row_norm(&diff),
            })
        })
        .collect()
}
