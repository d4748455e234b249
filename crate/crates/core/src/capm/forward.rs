use serde::{Deserialize, Serialize};

use super::layers::{
    affine, attention, gelu, l2_normalize_rows, layer_norm, rms_norm, sigmoid, AttnCache,
    AttnWeights, NormCache,
};
use super::params::SlotKind;
use super::{CapmError, CapmHyper, CapmParams};
use crate::linalg::{dot, Mat};

/// Side of the conversation a demonstration token belongs to. Image tokens
/// carry the label of the turn they appear in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    User,
    Assistant,
}

/// Backbone embeddings of one demonstration (`L × d_b`) with a segment label
/// per token.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoInput {
    pub tokens: Mat,
    pub segments: Vec<Segment>,
}

/// Encoder output for one demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSlots {
    /// Instruction anchor.
    pub c_in: Vec<f64>,
    /// Response anchor.
    pub c_out: Vec<f64>,
    /// `K × d_p` generic context slots.
    pub context: Mat,
}

impl DemoSlots {
    pub fn is_finite(&self) -> bool {
        self.c_in.iter().chain(&self.c_out).all(|v| v.is_finite()) && self.context.is_finite()
    }
}

// ---------------------------------------------------------------------------
// Caches kept for the reverse pass
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct EncodeCache {
    pub tokens: Mat,
    pub attn: AttnCache,
}

#[derive(Debug, Clone)]
pub(crate) struct ModulateCache {
    pub rms: NormCache,
    pub g: Vec<f64>,
    pub ln: NormCache,
    pub phi: Mat,
    pub coef_pre: Mat,
    pub coef_hidden: Mat,
    pub coef: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct InteractCache {
    pub ln: NormCache,
    pub attn: AttnCache,
}

#[derive(Debug, Clone)]
pub(crate) struct BankCache {
    pub raw: Mat,
    pub kinds: Vec<usize>,
    pub norms: Vec<f64>,
}

/// The temperature logit is clamped to this magnitude so that `τ` stays
/// strictly between its bounds in floating point.
pub const TAU_LOGIT_BOUND: f64 = 30.0;

#[derive(Debug, Clone)]
pub(crate) struct RouteCache {
    pub z_pool: Mat,
    pub tau_pre: Mat,
    pub tau_hidden: Mat,
    pub tau_sigmoid: f64,
    /// The temperature logit hit [`TAU_LOGIT_BOUND`].
    pub tau_clamped: bool,
    pub query_norms: Vec<f64>,
    pub queries: Mat,
    pub cosines: Mat,
}

#[derive(Debug, Clone)]
pub(crate) struct GateCache {
    pub ln: NormCache,
    pub x_gate: Mat,
    pub pre: Mat,
    pub hidden: Mat,
}

#[derive(Debug, Clone)]
pub(crate) struct Caches {
    pub encode: Vec<EncodeCache>,
    pub modulate: Vec<ModulateCache>,
    pub interact: Option<InteractCache>,
    pub bank: Option<BankCache>,
    pub route: Option<RouteCache>,
    pub gate: GateCache,
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct CapmTrace {
    pub slots: Vec<DemoSlots>,
    /// `N × d_p` modulated tokens before interaction.
    pub z: Mat,
    /// `N × d_p` tokens after the interaction block.
    pub z_hat: Mat,
    /// `S × d_p` calibrated unit-norm bank, `S = N·(K+3)`.
    pub bank: Mat,
    /// Routing temperature; `None` when there are no demonstrations.
    pub tau: Option<f64>,
    /// `T × S` routing weights.
    pub routing: Mat,
    /// `T × d_p` routed context.
    pub context: Mat,
    /// `T × d_b` gating multiplier.
    pub gate: Mat,
    pub h: Mat,
    pub y: Mat,
    pub y_prime: Mat,
    pub(crate) caches: Caches,
}

// ---------------------------------------------------------------------------
// Stage (a): segment-masked encoding
// ---------------------------------------------------------------------------

fn enc_weights(p: &CapmParams) -> AttnWeights<'_> {
    AttnWeights {
        wq: &p.enc_wq,
        wk: &p.enc_wk,
        wv: &p.enc_wv,
        wo: &p.enc_wo,
    }
}

pub(crate) fn int_weights(p: &CapmParams) -> AttnWeights<'_> {
    AttnWeights {
        wq: &p.int_wq,
        wk: &p.int_wk,
        wv: &p.int_wv,
        wo: &p.int_wo,
    }
}

/// Row-major `(K+2) × L` mask: the instruction query sees only user tokens,
/// the response query only assistant tokens, probes see everything.
pub(crate) fn segment_mask(segments: &[Segment], k: usize) -> Vec<bool> {
    let l = segments.len();
    let mut mask = vec![true; (k + 2) * l];
    for (j, s) in segments.iter().enumerate() {
        mask[j] = *s == Segment::User;
        mask[l + j] = *s == Segment::Assistant;
    }
    mask
}

pub(crate) fn encode_cached(
    demo: usize,
    tokens: &Mat,
    segments: &[Segment],
    params: &CapmParams,
    hyper: &CapmHyper,
) -> Result<(DemoSlots, EncodeCache), CapmError> {
    if tokens.cols() != hyper.d_b {
        return Err(CapmError::Shape(format!(
            "demonstration {demo}: tokens have width {}, expected d_b = {}",
            tokens.cols(),
            hyper.d_b
        )));
    }
    if segments.len() != tokens.rows() {
        return Err(CapmError::Shape(format!(
            "demonstration {demo}: {} tokens but {} segment labels",
            tokens.rows(),
            segments.len()
        )));
    }
    for seg in [Segment::User, Segment::Assistant] {
        if !segments.contains(&seg) {
            return Err(CapmError::EmptySegment { demo, segment: seg });
        }
    }
    let mask = segment_mask(segments, hyper.k);
    let projected = tokens.matmul(&params.w_in);
    let (out, attn) = attention(
        &params.queries,
        &projected,
        enc_weights(params),
        hyper.heads,
        Some(&mask),
    );
    let slots = DemoSlots {
        c_in: out.row(0).to_vec(),
        c_out: out.row(1).to_vec(),
        context: out.slice_rows(2, hyper.k + 2),
    };
    Ok((
        slots,
        EncodeCache {
            tokens: tokens.clone(),
            attn,
        },
    ))
}

/// Cross-attends the learnable queries onto `tokens · W_in` under the segment
/// mask and splits the result into anchors and context slots.
pub fn encode_demo(
    tokens: &Mat,
    segments: &[Segment],
    params: &CapmParams,
    hyper: &CapmHyper,
) -> Result<DemoSlots, CapmError> {
    hyper.validate()?;
    params.check_shapes(hyper)?;
    Ok(encode_cached(0, tokens, segments, params, hyper)?.0)
}

// ---------------------------------------------------------------------------
// Stage (b): low-rank modulation and interaction
// ---------------------------------------------------------------------------

/// Splits the coefficient head output into `u` (r × d_p), `v` (r × d_p), `α` (r).
pub(crate) fn split_coef(coef: &[f64], hyper: &CapmHyper) -> (Mat, Mat, Vec<f64>) {
    let rd = hyper.r * hyper.d_p;
    (
        Mat::from_vec(hyper.r, hyper.d_p, coef[..rd].to_vec()),
        Mat::from_vec(hyper.r, hyper.d_p, coef[rd..2 * rd].to_vec()),
        coef[2 * rd..].to_vec(),
    )
}

pub(crate) fn modulate_cached(
    slots: &DemoSlots,
    params: &CapmParams,
    hyper: &CapmHyper,
) -> (Vec<f64>, ModulateCache) {
    let dp = hyper.d_p;
    let (normed, rms) = rms_norm(&slots.context, &params.rms_gain);
    let g = normed.mean_row();

    let mut cat = Mat::zeros(1, 4 * dp);
    for j in 0..dp {
        let (a, b) = (slots.c_in[j], slots.c_out[j]);
        cat[(0, j)] = a;
        cat[(0, dp + j)] = b;
        cat[(0, 2 * dp + j)] = b - a;
        cat[(0, 3 * dp + j)] = a * b;
    }
    let (phi, ln) = layer_norm(&cat, &params.phi_ln_gain, &params.phi_ln_bias);
    let coef_pre = affine(&phi, &params.coef_w1, &params.coef_b1);
    let coef_hidden = coef_pre.map(gelu);
    let coef = affine(&coef_hidden, &params.coef_w2, &params.coef_b2).into_vec();

    let (u, v, alpha) = split_coef(&coef, hyper);
    let mut z = g.clone();
    #[allow(clippy::needless_range_loop)]
    for k in 0..hyper.r {
        let basis: Vec<f64> = params.u_base.row(k).iter().zip(u.row(k)).map(|(a, b)| a * b).collect();
        let probe: Vec<f64> = params.v_base.row(k).iter().zip(v.row(k)).map(|(a, b)| a * b).collect();
        let c = hyper.eta * alpha[k] * dot(&probe, &g);
        for (zj, bj) in z.iter_mut().zip(&basis) {
            *zj += c * bj;
        }
    }
    (
        z,
        ModulateCache {
            rms,
            g,
            ln,
            phi,
            coef_pre,
            coef_hidden,
            coef,
        },
    )
}

/// `z = g + η Σ_k α_k (U_k ⊙ u_k) ⟨V_k ⊙ v_k, g⟩` with `g` the mean of the
/// RMS-normalized context slots and `(u, v, α)` predicted from the anchors.
pub fn modulate(slots: &DemoSlots, params: &CapmParams, hyper: &CapmHyper) -> Vec<f64> {
    modulate_cached(slots, params, hyper).0
}

pub(crate) fn interact_cached(z: &Mat, params: &CapmParams, hyper: &CapmHyper) -> (Mat, InteractCache) {
    let (normed, ln) = layer_norm(z, &params.int_ln_gain, &params.int_ln_bias);
    let (attn_out, attn) = attention(&normed, &normed, int_weights(params), hyper.heads, None);
    (z.add(&attn_out), InteractCache { ln, attn })
}

/// One pre-norm self-attention block with a residual connection and no
/// positional information, so permuting rows permutes the output.
pub fn interact(z: &Mat, params: &CapmParams, hyper: &CapmHyper) -> Mat {
    interact_cached(z, params, hyper).0
}

// ---------------------------------------------------------------------------
// Stage (c): calibrated bank and routing
// ---------------------------------------------------------------------------

pub(crate) fn bank_cached(
    z_hat: &Mat,
    slots: &[DemoSlots],
    params: &CapmParams,
    hyper: &CapmHyper,
) -> Result<(Mat, BankCache), CapmError> {
    if z_hat.rows() != slots.len() {
        return Err(CapmError::Shape(format!(
            "{} tokens but {} slot sets",
            z_hat.rows(),
            slots.len()
        )));
    }
    let per = hyper.slots_per_demo();
    let mut raw = Mat::zeros(slots.len() * per, hyper.d_p);
    let mut kinds = Vec::with_capacity(raw.rows());
    for (i, s) in slots.iter().enumerate() {
        if s.context.rows() != hyper.k {
            return Err(CapmError::Shape(format!(
                "demonstration {i} has {} context slots, expected {}",
                s.context.rows(),
                hyper.k
            )));
        }
        let base = i * per;
        raw.row_mut(base).copy_from_slice(z_hat.row(i));
        raw.row_mut(base + 1).copy_from_slice(&s.c_in);
        raw.row_mut(base + 2).copy_from_slice(&s.c_out);
        kinds.extend([SlotKind::Token, SlotKind::Instruction, SlotKind::Response].map(|k| k as usize));
        for c in 0..hyper.k {
            raw.row_mut(base + 3 + c).copy_from_slice(s.context.row(c));
            kinds.push(SlotKind::Context as usize);
        }
    }
    let mut calibrated = raw.clone();
    for (row, &kind) in kinds.iter().enumerate() {
        let scale = params.calib_scale.row(kind);
        let shift = params.calib_shift.row(kind);
        for (j, x) in calibrated.row_mut(row).iter_mut().enumerate() {
            *x = scale[j] * *x + shift[j];
        }
    }
    let (bank, norms) = l2_normalize_rows(&calibrated);
    if let Some(i) = norms.iter().position(|n| !(*n > 0.0 && n.is_finite())) {
        return Err(CapmError::ZeroNormRow(i));
    }
    Ok((bank, BankCache { raw, kinds, norms }))
}

/// Stacks `[ẑ_i, c_in_i, c_out_i, c_1..c_K]` for each demonstration in order,
/// applies the per-kind affine calibration and unit-normalizes every row.
pub fn assemble_bank(
    z_hat: &Mat,
    slots: &[DemoSlots],
    params: &CapmParams,
    hyper: &CapmHyper,
) -> Result<Mat, CapmError> {
    Ok(bank_cached(z_hat, slots, params, hyper)?.0)
}

/// Routed context with the routing weights and the inferred temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteOutput {
    pub context: Mat,
    pub weights: Mat,
    pub tau: Option<f64>,
}

pub(crate) fn route_cached(
    h: &Mat,
    bank: &Mat,
    z_hat: &Mat,
    params: &CapmParams,
    hyper: &CapmHyper,
) -> (RouteOutput, Option<RouteCache>) {
    let t = h.rows();
    if bank.rows() == 0 {
        return (
            RouteOutput {
                context: Mat::zeros(t, hyper.d_p),
                weights: Mat::zeros(t, 0),
                tau: None,
            },
            None,
        );
    }
    let z_pool = Mat::row_vector(&z_hat.mean_row());
    let tau_pre = affine(&z_pool, &params.tau_w1, &params.tau_b1);
    let tau_hidden = tau_pre.map(gelu);
    let logit = affine(&tau_hidden, &params.tau_w2, &params.tau_b2)[(0, 0)];
    let tau_clamped = logit.abs() > TAU_LOGIT_BOUND;
    let tau_sigmoid = sigmoid(logit.clamp(-TAU_LOGIT_BOUND, TAU_LOGIT_BOUND));
    let tau = hyper.tau_min + (hyper.tau_max - hyper.tau_min) * tau_sigmoid;

    let (queries, query_norms) = l2_normalize_rows(&h.matmul(&params.psi));
    let cosines = queries.matmul_t(bank);
    let weights = super::layers::softmax_rows(&cosines.scale(1.0 / tau), None);
    let context = weights.matmul(bank);
    (
        RouteOutput {
            context,
            weights,
            tau: Some(tau),
        },
        Some(RouteCache {
            z_pool,
            tau_pre,
            tau_hidden,
            tau_sigmoid,
            tau_clamped,
            query_norms,
            queries,
            cosines,
        }),
    )
}

/// Dense cosine routing of backbone states against the bank:
/// `C_t = Σ_s softmax_s(⟨ψ̂(h_t), B_s⟩ / τ) B_s`, with `τ` inferred from the
/// mean interaction token. An empty bank routes to the zero vector.
pub fn route(
    h: &Mat,
    bank: &Mat,
    z_hat: &Mat,
    params: &CapmParams,
    hyper: &CapmHyper,
) -> RouteOutput {
    route_cached(h, bank, z_hat, params, hyper).0
}

// ---------------------------------------------------------------------------
// Stage (d): gating
// ---------------------------------------------------------------------------

pub(crate) fn gate_cached(
    h_in: &Mat,
    context: &Mat,
    y: &Mat,
    params: &CapmParams,
) -> Result<(Mat, Mat, GateCache), CapmError> {
    if h_in.shape() != y.shape() || context.rows() != h_in.rows() {
        return Err(CapmError::Shape(format!(
            "gate inputs: h {:?}, context {:?}, y {:?}",
            h_in.shape(),
            context.shape(),
            y.shape()
        )));
    }
    let (normed, ln) = layer_norm(h_in, &params.gate_ln_gain, &params.gate_ln_bias);
    let db = h_in.cols();
    let mut x_gate = Mat::zeros(h_in.rows(), db + context.cols());
    x_gate.set_cols(0, &normed);
    x_gate.set_cols(db, context);
    let pre = affine(&x_gate, &params.w1, &params.b1);
    let hidden = pre.map(gelu);
    let m = affine(&hidden, &params.w2, &params.b2).map(sigmoid);
    let y_prime = y.hadamard(&m);
    Ok((
        y_prime,
        m,
        GateCache {
            ln,
            x_gate,
            pre,
            hidden,
        },
    ))
}

/// `Y' = Y ⊙ σ(W₂·GELU(W₁·[LN(h); C] + b₁) + b₂)`, row by row.
pub fn gate(h_in: &Mat, context: &Mat, y: &Mat, params: &CapmParams) -> Result<Mat, CapmError> {
    Ok(gate_cached(h_in, context, y, params)?.0)
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

/// Runs all four stages. `h` are the backbone states (`T × d_b`) and `y` the
/// attention output to be gated (same shape).
pub fn capm_forward(
    demos: &[DemoInput],
    h: &Mat,
    y: &Mat,
    params: &CapmParams,
    hyper: &CapmHyper,
) -> Result<CapmTrace, CapmError> {
    hyper.validate()?;
    params.check_shapes(hyper)?;
    if h.rows() == 0 || h.cols() != hyper.d_b || y.shape() != h.shape() {
        return Err(CapmError::Shape(format!(
            "h is {:?} and y is {:?}; both must be T x {} with T >= 1",
            h.shape(),
            y.shape(),
            hyper.d_b
        )));
    }

    let mut slots = Vec::with_capacity(demos.len());
    let mut encode = Vec::with_capacity(demos.len());
    for (i, d) in demos.iter().enumerate() {
        let (s, c) = encode_cached(i, &d.tokens, &d.segments, params, hyper)?;
        slots.push(s);
        encode.push(c);
    }

    let mut z = Mat::zeros(demos.len(), hyper.d_p);
    let mut modulate = Vec::with_capacity(demos.len());
    for (i, s) in slots.iter().enumerate() {
        let (zi, c) = modulate_cached(s, params, hyper);
        z.row_mut(i).copy_from_slice(&zi);
        modulate.push(c);
    }

    let (z_hat, interact, bank, bank_cache) = if demos.is_empty() {
        (z.clone(), None, Mat::zeros(0, hyper.d_p), None)
    } else {
        let (z_hat, ic) = interact_cached(&z, params, hyper);
        let (bank, bc) = bank_cached(&z_hat, &slots, params, hyper)?;
        (z_hat, Some(ic), bank, Some(bc))
    };

    let (routed, route_cache) = route_cached(h, &bank, &z_hat, params, hyper);
    let (y_prime, m, gate_cache) = gate_cached(h, &routed.context, y, params)?;

    Ok(CapmTrace {
        slots,
        z,
        z_hat,
        bank,
        tau: routed.tau,
        routing: routed.weights,
        context: routed.context,
        gate: m,
        h: h.clone(),
        y: y.clone(),
        y_prime,
        caches: Caches {
            encode,
            modulate,
            interact,
            bank: bank_cache,
            route: route_cache,
            gate: gate_cache,
        },
    })
}
