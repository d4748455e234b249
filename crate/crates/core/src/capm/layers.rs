//! Row-wise primitives with hand-written reverse passes.
//!
//! Everything uses the row-vector convention `y = x · W`; a batch is a matrix
//! with one sample per row.

use crate::linalg::{dot, Mat};

pub const LN_EPS: f64 = 1e-5;
pub const RMS_EPS: f64 = 1e-6;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `x · W + b` with `b` broadcast over rows.
pub fn affine(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut out = x.matmul(w);
    out.add_row_broadcast(b.as_slice());
    out
}

/// Gradients of [`affine`]: `(dx, dW, db)`.
pub fn affine_backward(x: &Mat, w: &Mat, dy: &Mat) -> (Mat, Mat, Mat) {
    let dx = dy.matmul_t(w);
    let dw = x.t_matmul(dy);
    let db = Mat::row_vector(&dy.column_sums());
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Mat,
    inv: Vec<f64>,
}

/// Per-row layer normalization with learned gain and bias.
pub fn layer_norm(x: &Mat, gain: &Mat, bias: &Mat) -> (Mat, NormCache) {
    let d = x.cols() as f64;
    let mut xhat = Mat::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    let mut y = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv.push(s);
        for j in 0..x.cols() {
            let h = (row[j] - mean) * s;
            xhat[(i, j)] = h;
            y[(i, j)] = h * gain.as_slice()[j] + bias.as_slice()[j];
        }
    }
    (y, NormCache { xhat, inv })
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(cache: &NormCache, gain: &Mat, dy: &Mat) -> (Mat, Mat, Mat) {
    let (rows, cols) = dy.shape();
    let d = cols as f64;
    let mut dx = Mat::zeros(rows, cols);
    let mut dgain = vec![0.0; cols];
    let mut dbias = vec![0.0; cols];
    let g = gain.as_slice();
    for i in 0..rows {
        let xh = cache.xhat.row(i);
        let dyr = dy.row(i);
        let dxhat: Vec<f64> = dyr.iter().zip(g).map(|(a, b)| a * b).collect();
        for j in 0..cols {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d;
        let mean_dx = dot(&dxhat, xh) / d;
        for j in 0..cols {
            dx[(i, j)] = cache.inv[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    (dx, Mat::row_vector(&dgain), Mat::row_vector(&dbias))
}

// ---------------------------------------------------------------------------
// RMSNorm
// ---------------------------------------------------------------------------

/// Per-row RMS normalization with learned gain.
pub fn rms_norm(x: &Mat, gain: &Mat) -> (Mat, NormCache) {
    let d = x.cols() as f64;
    let mut xhat = Mat::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    let mut y = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let s = 1.0 / (dot(row, row) / d + RMS_EPS).sqrt();
        inv.push(s);
        for j in 0..x.cols() {
            xhat[(i, j)] = row[j] * s;
            y[(i, j)] = row[j] * s * gain.as_slice()[j];
        }
    }
    (y, NormCache { xhat, inv })
}

/// Returns `(dx, dgain)`.
pub fn rms_norm_backward(cache: &NormCache, gain: &Mat, dy: &Mat) -> (Mat, Mat) {
    let (rows, cols) = dy.shape();
    let d = cols as f64;
    let mut dx = Mat::zeros(rows, cols);
    let mut dgain = vec![0.0; cols];
    let g = gain.as_slice();
    for i in 0..rows {
        let xh = cache.xhat.row(i);
        let dyr = dy.row(i);
        let dxhat: Vec<f64> = dyr.iter().zip(g).map(|(a, b)| a * b).collect();
        for j in 0..cols {
            dgain[j] += dyr[j] * xh[j];
        }
        let m = dot(&dxhat, xh) / d;
        for j in 0..cols {
            dx[(i, j)] = cache.inv[i] * (dxhat[j] - xh[j] * m);
        }
    }
    (dx, Mat::row_vector(&dgain))
}

// ---------------------------------------------------------------------------
// Row ℓ2 normalization
// ---------------------------------------------------------------------------

/// Unit-normalizes each row; returns the normalized rows and the original
/// norms. Zero rows stay zero.
pub fn l2_normalize_rows(x: &Mat) -> (Mat, Vec<f64>) {
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let n = dot(x.row(i), x.row(i)).sqrt();
        norms.push(n);
        if n > 0.0 {
            y.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
    }
    (y, norms)
}

pub fn l2_normalize_rows_backward(y: &Mat, norms: &[f64], dy: &Mat) -> Mat {
    let mut dx = Mat::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        if norms[i] == 0.0 {
            continue;
        }
        let yr = y.row(i);
        let p = dot(yr, dy.row(i));
        for j in 0..y.cols() {
            dx[(i, j)] = (dy[(i, j)] - yr[j] * p) / norms[i];
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Row softmax. Entries where `allowed` is false get probability zero; every
/// row must keep at least one allowed entry.
pub fn softmax_rows(scores: &Mat, allowed: Option<&[bool]>) -> Mat {
    let (rows, cols) = scores.shape();
    let mut p = Mat::zeros(rows, cols);
    for i in 0..rows {
        let ok = |j: usize| allowed.is_none_or(|a| a[i * cols + j]);
        let max = (0..cols)
            .filter(|&j| ok(j))
            .map(|j| scores[(i, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..cols {
            if ok(j) {
                let e = (scores[(i, j)] - max).exp();
                p[(i, j)] = e;
                sum += e;
            }
        }
        p.row_mut(i).iter_mut().for_each(|v| *v /= sum);
    }
    p
}

/// Gradient w.r.t. the scores given probabilities `p` and `dp`.
pub fn softmax_rows_backward(p: &Mat, dp: &Mat) -> Mat {
    let mut ds = Mat::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let pr = p.row(i);
        let s = dot(pr, dp.row(i));
        for j in 0..p.cols() {
            ds[(i, j)] = pr[j] * (dp[(i, j)] - s);
        }
    }
    ds
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention
// ---------------------------------------------------------------------------

/// Projection weights of one attention block (all `d × d`).
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights<'a> {
    pub wq: &'a Mat,
    pub wk: &'a Mat,
    pub wv: &'a Mat,
    pub wo: &'a Mat,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    q_in: Mat,
    kv_in: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// One `M × L` probability matrix per head.
    pub probs: Vec<Mat>,
    o: Mat,
    heads: usize,
}

pub struct AttnGrads {
    pub dq_in: Mat,
    pub dkv_in: Mat,
    pub dwq: Mat,
    pub dwk: Mat,
    pub dwv: Mat,
    pub dwo: Mat,
}

/// `softmax(Q_h K_hᵀ / √d_h) V_h` per head, concatenated and projected by `Wo`.
/// `allowed` is an optional row-major `M × L` mask shared by all heads.
pub fn attention(
    q_in: &Mat,
    kv_in: &Mat,
    w: AttnWeights<'_>,
    heads: usize,
    allowed: Option<&[bool]>,
) -> (Mat, AttnCache) {
    let q = q_in.matmul(w.wq);
    let k = kv_in.matmul(w.wk);
    let v = kv_in.matmul(w.wv);
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = Mat::zeros(q.rows(), d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(lo, hi);
        let kh = k.slice_cols(lo, hi);
        let vh = v.slice_cols(lo, hi);
        let scores = qh.matmul_t(&kh).scale(scale);
        let p = softmax_rows(&scores, allowed);
        o.set_cols(lo, &p.matmul(&vh));
        probs.push(p);
    }
    let out = o.matmul(w.wo);
    (
        out,
        AttnCache {
            q_in: q_in.clone(),
            kv_in: kv_in.clone(),
            q,
            k,
            v,
            probs,
            o,
            heads,
        },
    )
}

pub fn attention_backward(cache: &AttnCache, w: AttnWeights<'_>, dout: &Mat) -> AttnGrads {
    let d = cache.q.cols();
    let dh = d / cache.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dwo = cache.o.t_matmul(dout);
    let do_ = dout.matmul_t(w.wo);
    let mut dq = Mat::zeros(cache.q.rows(), d);
    let mut dk = Mat::zeros(cache.k.rows(), d);
    let mut dv = Mat::zeros(cache.v.rows(), d);
    for (h, p) in cache.probs.iter().enumerate() {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = cache.q.slice_cols(lo, hi);
        let kh = cache.k.slice_cols(lo, hi);
        let vh = cache.v.slice_cols(lo, hi);
        let doh = do_.slice_cols(lo, hi);
        let dp = doh.matmul_t(&vh);
        dv.set_cols(lo, &p.t_matmul(&doh));
        let ds = softmax_rows_backward(p, &dp).scale(scale);
        dq.set_cols(lo, &ds.matmul(&kh));
        dk.set_cols(lo, &ds.t_matmul(&qh));
    }
    let dwq = cache.q_in.t_matmul(&dq);
    let dwk = cache.kv_in.t_matmul(&dk);
    let dwv = cache.kv_in.t_matmul(&dv);
    let dq_in = dq.matmul_t(w.wq);
    let mut dkv_in = dk.matmul_t(w.wk);
    dkv_in.add_assign(&dv.matmul_t(w.wv));
    AttnGrads {
        dq_in,
        dkv_in,
        dwq,
        dwk,
        dwv,
        dwo,
    }
}
