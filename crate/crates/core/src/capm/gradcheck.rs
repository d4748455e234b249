//! Central-difference verification of [`capm_backward`](super::capm_backward).

use serde::Serialize;

use super::{capm_backward, capm_forward, CapmError, CapmHyper, CapmParams, DemoInput};
use crate::linalg::{dot, Mat};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor of the relative error. With a step of `1e-5` and a loss
/// of order 10 the central difference carries roundoff near `2e-10`, so
/// gradients smaller than the floor are judged on an absolute error of
/// `floor · tol` instead.
pub const DEFAULT_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            floor: DEFAULT_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let den = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / den
}

/// Which forward input a perturbed scalar belongs to.
#[derive(Clone, Copy)]
enum Slot {
    Param(usize),
    H,
    Y,
    Token(usize),
}

struct Inputs {
    params: CapmParams,
    demos: Vec<DemoInput>,
    h: Mat,
    y: Mat,
}

impl Inputs {
    fn tensor_mut(&mut self, slot: Slot) -> &mut Mat {
        match slot {
            Slot::Param(i) => self.params.tensors_mut().swap_remove(i).1,
            Slot::H => &mut self.h,
            Slot::Y => &mut self.y,
            Slot::Token(i) => &mut self.demos[i].tokens,
        }
    }

    fn loss(&self, hyper: &CapmHyper, upstream: &Mat) -> Result<f64, CapmError> {
        let trace = capm_forward(&self.demos, &self.h, &self.y, &self.params, hyper)?;
        Ok(dot(trace.y_prime.as_slice(), upstream.as_slice()))
    }
}

/// Compares every analytic gradient entry (all parameters, `h`, `y` and the
/// demonstration tokens) with `(L(x+ε) − L(x−ε)) / 2ε` where
/// `L = Σ upstream ⊙ Y'`.
pub fn gradcheck(
    demos: &[DemoInput],
    h: &Mat,
    y: &Mat,
    params: &CapmParams,
    hyper: &CapmHyper,
    upstream: &Mat,
    opts: GradcheckOptions,
) -> Result<GradcheckReport, CapmError> {
    let trace = capm_forward(demos, h, y, params, hyper)?;
    let grads = capm_backward(&trace, params, hyper, upstream)?;

    let mut targets: Vec<(String, Slot, &Mat)> = grads
        .params
        .tensors()
        .into_iter()
        .enumerate()
        .map(|(i, (name, g))| (name.to_string(), Slot::Param(i), g))
        .collect();
    targets.push(("h".into(), Slot::H, &grads.h));
    targets.push(("y".into(), Slot::Y, &grads.y));
    for (i, g) in grads.tokens.iter().enumerate() {
        targets.push((format!("tokens{i}"), Slot::Token(i), g));
    }

    let mut inputs = Inputs {
        params: params.clone(),
        demos: demos.to_vec(),
        h: h.clone(),
        y: y.clone(),
    };
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        tensors: Vec::with_capacity(targets.len()),
    };
    for (name, slot, analytic) in targets {
        let mut tc = TensorCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            max_abs_grad: 0.0,
        };
        for idx in 0..analytic.as_slice().len() {
            let orig = inputs.tensor_mut(slot).as_slice()[idx];
            inputs.tensor_mut(slot).as_mut_slice()[idx] = orig + opts.step;
            let plus = inputs.loss(hyper, upstream)?;
            inputs.tensor_mut(slot).as_mut_slice()[idx] = orig - opts.step;
            let minus = inputs.loss(hyper, upstream)?;
            inputs.tensor_mut(slot).as_mut_slice()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.as_slice()[idx];
            let err = relative_error(a, numeric, opts.floor);
            tc.max_abs_grad = tc.max_abs_grad.max(a.abs());
            if err > tc.max_rel_err {
                tc.max_rel_err = err;
            }
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = format!("{name}[{idx}]");
            }
            report.checked += 1;
        }
        report.tensors.push(tc);
    }
    Ok(report)
}
