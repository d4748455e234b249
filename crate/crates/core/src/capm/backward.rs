use super::forward::{int_weights, split_coef, CapmTrace};
use super::layers::{
    affine_backward, attention_backward, gelu_grad, l2_normalize_rows_backward,
    layer_norm_backward, rms_norm_backward, softmax_rows_backward, AttnWeights,
};
use super::{CapmError, CapmHyper, CapmParams};
use crate::linalg::{dot, Mat};

/// Gradients of `Σ upstream ⊙ Y'` with respect to every input of the forward
/// pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CapmGradients {
    pub params: CapmParams,
    pub h: Mat,
    pub y: Mat,
    /// One `L_i × d_b` matrix per demonstration.
    pub tokens: Vec<Mat>,
}

impl CapmGradients {
    /// Largest absolute entry over all gradients.
    pub fn max_abs(&self) -> f64 {
        self.params
            .tensors()
            .into_iter()
            .map(|(_, t)| t)
            .chain([&self.h, &self.y])
            .chain(&self.tokens)
            .flat_map(|m| m.as_slice().iter())
            .fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

fn gelu_backward(pre: &Mat, d: &Mat) -> Mat {
    let mut out = d.clone();
    for (o, p) in out.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        *o *= gelu_grad(*p);
    }
    out
}

/// Per-demo slot gradients collected on the way down.
struct SlotGrads {
    c_in: Vec<f64>,
    c_out: Vec<f64>,
    context: Mat,
}

/// Reverse pass over a trace produced by `capm_forward` with the same
/// `params` and `hyper`.
pub fn capm_backward(
    trace: &CapmTrace,
    params: &CapmParams,
    hyper: &CapmHyper,
    upstream: &Mat,
) -> Result<CapmGradients, CapmError> {
    if upstream.shape() != trace.y_prime.shape() {
        return Err(CapmError::Shape(format!(
            "upstream gradient is {:?}, output is {:?}",
            upstream.shape(),
            trace.y_prime.shape()
        )));
    }
    let caches = &trace.caches;
    let mut gp = params.zeros_like();
    let (t, db) = trace.h.shape();
    let dp = hyper.d_p;
    let n = trace.slots.len();

    // gate
    let m = &trace.gate;
    let dy = upstream.hadamard(m);
    let mut da2 = upstream.hadamard(&trace.y);
    for (d, mv) in da2.as_mut_slice().iter_mut().zip(m.as_slice()) {
        *d *= mv * (1.0 - mv);
    }
    let gc = &caches.gate;
    let (dhidden, dw2, db2) = affine_backward(&gc.hidden, &params.w2, &da2);
    gp.w2 = dw2;
    gp.b2 = db2;
    let dpre = gelu_backward(&gc.pre, &dhidden);
    let (dxg, dw1, db1) = affine_backward(&gc.x_gate, &params.w1, &dpre);
    gp.w1 = dw1;
    gp.b1 = db1;
    let (mut dh, dg, dbias) = layer_norm_backward(&gc.ln, &params.gate_ln_gain, &dxg.slice_cols(0, db));
    gp.gate_ln_gain = dg;
    gp.gate_ln_bias = dbias;
    let dctx = dxg.slice_cols(db, db + dp);

    let (Some(rc), Some(bc), Some(ic)) = (&caches.route, &caches.bank, &caches.interact) else {
        return Ok(CapmGradients {
            params: gp,
            h: dh,
            y: dy,
            tokens: Vec::new(),
        });
    };

    // route
    let tau = trace.tau.expect("non-empty bank has a temperature");
    let p = &trace.routing;
    let bank = &trace.bank;
    let dweights = dctx.matmul_t(bank);
    let mut dbank = p.t_matmul(&dctx);
    let dlogits = softmax_rows_backward(p, &dweights);
    let dcos = dlogits.scale(1.0 / tau);
    let dtau = -dot(dlogits.as_slice(), rc.cosines.as_slice()) / (tau * tau);
    let dq_norm = dcos.matmul(bank);
    dbank.add_assign(&dcos.t_matmul(&rc.queries));
    let dq = l2_normalize_rows_backward(&rc.queries, &rc.query_norms, &dq_norm);
    gp.psi = trace.h.t_matmul(&dq);
    dh.add_assign(&dq.matmul_t(&params.psi));

    let s = rc.tau_sigmoid;
    let slope = if rc.tau_clamped { 0.0 } else { s * (1.0 - s) };
    let dlogit = Mat::filled(1, 1, dtau * (hyper.tau_max - hyper.tau_min) * slope);
    let (dtau_hidden, dtw2, dtb2) = affine_backward(&rc.tau_hidden, &params.tau_w2, &dlogit);
    gp.tau_w2 = dtw2;
    gp.tau_b2 = dtb2;
    let dtau_pre = gelu_backward(&rc.tau_pre, &dtau_hidden);
    let (dz_pool, dtw1, dtb1) = affine_backward(&rc.z_pool, &params.tau_w1, &dtau_pre);
    gp.tau_w1 = dtw1;
    gp.tau_b1 = dtb1;

    // bank
    let mut dz_hat = Mat::zeros(n, dp);
    for i in 0..n {
        for (d, v) in dz_hat.row_mut(i).iter_mut().zip(dz_pool.as_slice()) {
            *d += v / n as f64;
        }
    }
    let dcal = l2_normalize_rows_backward(bank, &bc.norms, &dbank);
    let mut slot_grads: Vec<SlotGrads> = (0..n)
        .map(|_| SlotGrads {
            c_in: vec![0.0; dp],
            c_out: vec![0.0; dp],
            context: Mat::zeros(hyper.k, dp),
        })
        .collect();
    let per = hyper.slots_per_demo();
    for (row, &kind) in bc.kinds.iter().enumerate() {
        let d = dcal.row(row);
        let raw = bc.raw.row(row);
        let mut draw = vec![0.0; dp];
        for j in 0..dp {
            gp.calib_scale[(kind, j)] += d[j] * raw[j];
            gp.calib_shift[(kind, j)] += d[j];
            draw[j] = d[j] * params.calib_scale[(kind, j)];
        }
        let (demo, off) = (row / per, row % per);
        let target = match off {
            0 => dz_hat.row_mut(demo),
            1 => &mut slot_grads[demo].c_in[..],
            2 => &mut slot_grads[demo].c_out[..],
            c => slot_grads[demo].context.row_mut(c - 3),
        };
        for (a, b) in target.iter_mut().zip(&draw) {
            *a += b;
        }
    }

    // interact
    let iw = int_weights(params);
    let ag = attention_backward(&ic.attn, iw, &dz_hat);
    gp.int_wq = ag.dwq;
    gp.int_wk = ag.dwk;
    gp.int_wv = ag.dwv;
    gp.int_wo = ag.dwo;
    let dnormed = ag.dq_in.add(&ag.dkv_in);
    let (dz_ln, dgain, dbias) = layer_norm_backward(&ic.ln, &params.int_ln_gain, &dnormed);
    gp.int_ln_gain = dgain;
    gp.int_ln_bias = dbias;
    let dz = dz_hat.add(&dz_ln);

    // modulate
    for (i, mc) in caches.modulate.iter().enumerate() {
        let slots = &trace.slots[i];
        let sg = &mut slot_grads[i];
        let dzi = dz.row(i);
        let (u, v, alpha) = split_coef(&mc.coef, hyper);
        let mut dg = dzi.to_vec();
        let mut du = Mat::zeros(hyper.r, dp);
        let mut dv = Mat::zeros(hyper.r, dp);
        let mut dalpha = vec![0.0; hyper.r];
        for k in 0..hyper.r {
            let (ub, vb) = (params.u_base.row(k), params.v_base.row(k));
            let basis: Vec<f64> = ub.iter().zip(u.row(k)).map(|(a, b)| a * b).collect();
            let probe: Vec<f64> = vb.iter().zip(v.row(k)).map(|(a, b)| a * b).collect();
            let sk = dot(&probe, &mc.g);
            let ad = dot(&basis, dzi);
            let ck = hyper.eta * alpha[k] * sk;
            let dsk = hyper.eta * alpha[k] * ad;
            dalpha[k] = hyper.eta * sk * ad;
            for j in 0..dp {
                let da = ck * dzi[j];
                gp.u_base[(k, j)] += da * u[(k, j)];
                du[(k, j)] = da * ub[j];
                let dbk = dsk * mc.g[j];
                gp.v_base[(k, j)] += dbk * v[(k, j)];
                dv[(k, j)] = dbk * vb[j];
                dg[j] += dsk * probe[j];
            }
        }
        let mut dcoef = du.into_vec();
        dcoef.extend(dv.into_vec());
        dcoef.extend(dalpha);
        let dcoef = Mat::row_vector(&dcoef);
        let (dch, dw2, db2) = affine_backward(&mc.coef_hidden, &params.coef_w2, &dcoef);
        gp.coef_w2.add_assign(&dw2);
        gp.coef_b2.add_assign(&db2);
        let dcp = gelu_backward(&mc.coef_pre, &dch);
        let (dphi, dw1, db1) = affine_backward(&mc.phi, &params.coef_w1, &dcp);
        gp.coef_w1.add_assign(&dw1);
        gp.coef_b1.add_assign(&db1);
        let (dcat, dgain, dbias) = layer_norm_backward(&mc.ln, &params.phi_ln_gain, &dphi);
        gp.phi_ln_gain.add_assign(&dgain);
        gp.phi_ln_bias.add_assign(&dbias);
        let dcat = dcat.row(0);
        for j in 0..dp {
            let (d0, d1, d2, d3) = (dcat[j], dcat[dp + j], dcat[2 * dp + j], dcat[3 * dp + j]);
            sg.c_in[j] += d0 - d2 + d3 * slots.c_out[j];
            sg.c_out[j] += d1 + d2 + d3 * slots.c_in[j];
        }
        let kf = hyper.k as f64;
        let drows = Mat::from_vec(
            hyper.k,
            dp,
            (0..hyper.k).flat_map(|_| dg.iter().map(|v| v / kf)).collect(),
        );
        let (dctx_rows, drms) = rms_norm_backward(&mc.rms, &params.rms_gain, &drows);
        gp.rms_gain.add_assign(&drms);
        sg.context.add_assign(&dctx_rows);
    }

    // encode
    let ew = AttnWeights {
        wq: &params.enc_wq,
        wk: &params.enc_wk,
        wv: &params.enc_wv,
        wo: &params.enc_wo,
    };
    let mut dtokens = Vec::with_capacity(n);
    for (ec, sg) in caches.encode.iter().zip(&slot_grads) {
        let dout = Mat::vstack(&[
            &Mat::row_vector(&sg.c_in),
            &Mat::row_vector(&sg.c_out),
            &sg.context,
        ]);
        let ag = attention_backward(&ec.attn, ew, &dout);
        gp.enc_wq.add_assign(&ag.dwq);
        gp.enc_wk.add_assign(&ag.dwk);
        gp.enc_wv.add_assign(&ag.dwv);
        gp.enc_wo.add_assign(&ag.dwo);
        gp.queries.add_assign(&ag.dq_in);
        gp.w_in.add_assign(&ec.tokens.t_matmul(&ag.dkv_in));
        dtokens.push(ag.dkv_in.matmul_t(&params.w_in));
    }
    debug_assert_eq!(dh.rows(), t);

    Ok(CapmGradients {
        params: gp,
        h: dh,
        y: dy,
        tokens: dtokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capm::{capm_forward, DemoInput, Segment};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn demos(n: usize, hyper: &CapmHyper, rng: &mut ChaCha8Rng) -> Vec<DemoInput> {
        (0..n)
            .map(|i| {
                let l = 3 + i % 2;
                let mut segments = vec![Segment::User; l];
                segments[l - 1] = Segment::Assistant;
                DemoInput {
                    tokens: Mat::random_normal(l, hyper.d_b, 1.0, rng),
                    segments,
                }
            })
            .collect()
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let hyper = CapmHyper::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = CapmParams::trained_like(&hyper, 0.3, &mut rng).unwrap();
        let d = demos(2, &hyper, &mut rng);
        let h = Mat::random_normal(3, hyper.d_b, 1.0, &mut rng);
        let y = Mat::random_normal(3, hyper.d_b, 1.0, &mut rng);
        let trace = capm_forward(&d, &h, &y, &params, &hyper).unwrap();
        let g = capm_backward(&trace, &params, &hyper, &Mat::zeros(3, hyper.d_b)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(g.tokens.len(), 2);
    }

    #[test]
    fn upstream_shape_is_checked() {
        let hyper = CapmHyper::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = CapmParams::init(&hyper, &mut rng).unwrap();
        let h = Mat::random_normal(2, hyper.d_b, 1.0, &mut rng);
        let trace = capm_forward(&[], &h, &h, &params, &hyper).unwrap();
        assert!(capm_backward(&trace, &params, &hyper, &Mat::zeros(3, hyper.d_b)).is_err());
    }
}
