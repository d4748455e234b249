use std::io::{BufRead, Write};

use rand::Rng;

use super::{CapmError, CapmHyper};
use crate::episode::{read_embeddings_binary, write_embeddings_binary};
use crate::linalg::Mat;

/// Which part of a demonstration a bank row came from; each kind has its own
/// affine calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Token = 0,
    Instruction = 1,
    Response = 2,
    Context = 3,
}

pub const SLOT_KINDS: usize = 4;

macro_rules! capm_params {
    ($($(#[$doc:meta])* $name:ident),* $(,)?) => {
        /// Every learnable tensor of the module. Vectors are stored as `1 × n`
        /// matrices; all maps use the row convention `y = x · W`.
        #[derive(Debug, Clone, PartialEq)]
        pub struct CapmParams {
            $($(#[$doc])* pub $name: Mat,)*
        }

        impl CapmParams {
            /// Tensor names in serialization order.
            pub const NAMES: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn tensors(&self) -> Vec<(&'static str, &Mat)> {
                vec![$((stringify!($name), &self.$name)),*]
            }

            pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
                vec![$((stringify!($name), &mut self.$name)),*]
            }

            /// Same shapes, every entry zero.
            pub fn zeros_like(&self) -> Self {
                Self { $($name: Mat::zeros(self.$name.rows(), self.$name.cols()),)* }
            }
        }
    };
}

capm_params! {
    /// `d_b × d_p` token projection.
    w_in,
    /// `(K+2) × d_p` queries: instruction anchor, response anchor, then `K` probes.
    queries,
    enc_wq,
    enc_wk,
    enc_wv,
    enc_wo,
    /// RMSNorm gain applied to the context slots before pooling.
    rms_gain,
    /// LayerNorm over the `4·d_p` relation descriptor.
    phi_ln_gain,
    phi_ln_bias,
    /// Coefficient head, `4·d_p → 2·d_p → 2·r·d_p + r`.
    coef_w1,
    coef_b1,
    coef_w2,
    coef_b2,
    /// `r × d_p` shared bases.
    u_base,
    v_base,
    /// Pre-norm of the interaction block.
    int_ln_gain,
    int_ln_bias,
    int_wq,
    int_wk,
    int_wv,
    int_wo,
    /// `4 × d_p`, one row per [`SlotKind`].
    calib_scale,
    calib_shift,
    /// `d_b × d_p` routing query map.
    psi,
    /// Temperature MLP, `d_p → d_p → 1`.
    tau_w1,
    tau_b1,
    tau_w2,
    tau_b2,
    /// LayerNorm on the backbone state entering the gate.
    gate_ln_gain,
    gate_ln_bias,
    /// Gating bottleneck, `(d_b + d_p) → gate_hidden → d_b`.
    w1,
    b1,
    w2,
    b2,
}

fn expected_shape(name: &str, h: &CapmHyper) -> (usize, usize) {
    let (db, dp) = (h.d_b, h.d_p);
    match name {
        "w_in" | "psi" => (db, dp),
        "queries" => (h.k + 2, dp),
        "enc_wq" | "enc_wk" | "enc_wv" | "enc_wo" | "int_wq" | "int_wk" | "int_wv" | "int_wo" => {
            (dp, dp)
        }
        "rms_gain" | "int_ln_gain" | "int_ln_bias" => (1, dp),
        "phi_ln_gain" | "phi_ln_bias" => (1, 4 * dp),
        "coef_w1" => (4 * dp, h.coef_hidden()),
        "coef_b1" => (1, h.coef_hidden()),
        "coef_w2" => (h.coef_hidden(), h.coef_out()),
        "coef_b2" => (1, h.coef_out()),
        "u_base" | "v_base" => (h.r, dp),
        "calib_scale" | "calib_shift" => (SLOT_KINDS, dp),
        "tau_w1" => (dp, h.tau_hidden()),
        "tau_b1" => (1, h.tau_hidden()),
        "tau_w2" => (h.tau_hidden(), 1),
        "tau_b2" => (1, 1),
        "gate_ln_gain" | "gate_ln_bias" | "b2" => (1, db),
        "w1" => (db + dp, h.gate_hidden),
        "b1" => (1, h.gate_hidden),
        "w2" => (h.gate_hidden, db),
        other => unreachable!("unknown tensor {other}"),
    }
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::random_normal(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

impl CapmParams {
    /// Fresh parameters: random projections, unit gains, zero biases,
    /// identity calibration, `W₂ = 0` and `b₂ = b2_init`.
    pub fn init<R: Rng + ?Sized>(hyper: &CapmHyper, rng: &mut R) -> Result<Self, CapmError> {
        hyper.validate()?;
        let (db, dp) = (hyper.d_b, hyper.d_p);
        let ones = |n| Mat::filled(1, n, 1.0);
        let zeros = |n| Mat::zeros(1, n);
        Ok(Self {
            w_in: glorot(db, dp, rng),
            queries: Mat::random_normal(hyper.k + 2, dp, 1.0, rng),
            enc_wq: glorot(dp, dp, rng),
            enc_wk: glorot(dp, dp, rng),
            enc_wv: glorot(dp, dp, rng),
            enc_wo: glorot(dp, dp, rng),
            rms_gain: ones(dp),
            phi_ln_gain: ones(4 * dp),
            phi_ln_bias: zeros(4 * dp),
            coef_w1: glorot(4 * dp, hyper.coef_hidden(), rng),
            coef_b1: zeros(hyper.coef_hidden()),
            coef_w2: glorot(hyper.coef_hidden(), hyper.coef_out(), rng),
            coef_b2: zeros(hyper.coef_out()),
            u_base: Mat::random_normal(hyper.r, dp, 1.0, rng),
            v_base: Mat::random_normal(hyper.r, dp, 1.0, rng),
            int_ln_gain: ones(dp),
            int_ln_bias: zeros(dp),
            int_wq: glorot(dp, dp, rng),
            int_wk: glorot(dp, dp, rng),
            int_wv: glorot(dp, dp, rng),
            int_wo: glorot(dp, dp, rng),
            calib_scale: Mat::filled(SLOT_KINDS, dp, 1.0),
            calib_shift: Mat::zeros(SLOT_KINDS, dp),
            psi: glorot(db, dp, rng),
            tau_w1: glorot(dp, hyper.tau_hidden(), rng),
            tau_b1: zeros(hyper.tau_hidden()),
            tau_w2: glorot(hyper.tau_hidden(), 1, rng),
            tau_b2: zeros(1),
            gate_ln_gain: ones(db),
            gate_ln_bias: zeros(db),
            w1: glorot(db + dp, hyper.gate_hidden, rng),
            b1: zeros(hyper.gate_hidden),
            w2: Mat::zeros(hyper.gate_hidden, db),
            b2: Mat::filled(1, db, hyper.b2_init),
        })
    }

    /// Parameters as they might look after training: the initialization with
    /// every tensor (including `W₂`, gains and calibration) perturbed by
    /// Gaussian noise of standard deviation `noise`.
    pub fn trained_like<R: Rng + ?Sized>(
        hyper: &CapmHyper,
        noise: f64,
        rng: &mut R,
    ) -> Result<Self, CapmError> {
        let mut p = Self::init(hyper, rng)?;
        for (_, t) in p.tensors_mut() {
            let n = Mat::random_normal(t.rows(), t.cols(), noise, rng);
            t.add_assign(&n);
        }
        Ok(p)
    }

    /// Checks every tensor's shape against `hyper`.
    pub fn check_shapes(&self, hyper: &CapmHyper) -> Result<(), CapmError> {
        for (name, t) in self.tensors() {
            let want = expected_shape(name, hyper);
            if t.shape() != want {
                return Err(CapmError::Shape(format!(
                    "{name} is {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.as_slice().len()).sum()
    }

    /// Serializes as a manifest line followed by one section per tensor.
    ///
    /// ```text
    /// CAPM 1 {"d_b":12,...}\n
    /// tensor <name> <rows> <cols>\n<UIEB container: rows records of cols f32>
    /// ...
    /// ```
    ///
    /// Container record ids are `<name>:<row>`. Values are stored as `f32`.
    pub fn save<W: Write>(&self, hyper: &CapmHyper, mut w: W) -> Result<(), CapmError> {
        let io = |e: std::io::Error| CapmError::Format(e.to_string());
        let manifest = serde_json::to_string(hyper).map_err(|e| CapmError::Format(e.to_string()))?;
        writeln!(w, "CAPM 1 {manifest}").map_err(io)?;
        for (name, t) in self.tensors() {
            writeln!(w, "tensor {name} {} {}", t.rows(), t.cols()).map_err(io)?;
            let ids: Vec<String> = (0..t.rows()).map(|i| format!("{name}:{i}")).collect();
            let rows: Vec<(&str, &[f64])> = ids.iter().map(String::as_str).zip(t.iter_rows()).collect();
            write_embeddings_binary(&mut w, t.cols(), &rows)
                .map_err(|e| CapmError::Format(e.to_string()))?;
        }
        w.flush().map_err(io)
    }

    pub fn load<R: BufRead>(mut r: R) -> Result<(CapmHyper, Self), CapmError> {
        let fmt = |m: String| CapmError::Format(m);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| fmt(e.to_string()))?;
        let manifest = line
            .strip_prefix("CAPM 1 ")
            .ok_or_else(|| fmt("missing 'CAPM 1' manifest line".into()))?;
        let hyper: CapmHyper =
            serde_json::from_str(manifest.trim_end()).map_err(|e| fmt(format!("manifest: {e}")))?;
        hyper.validate()?;

        let mut tensors: Vec<(String, Mat)> = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line).map_err(|e| fmt(e.to_string()))? == 0 {
                break;
            }
            let parts: Vec<&str> = line.trim_end().split(' ').collect();
            let [tag, name, rows, cols] = parts[..] else {
                return Err(fmt(format!("malformed section header {line:?}")));
            };
            if tag != "tensor" {
                return Err(fmt(format!("malformed section header {line:?}")));
            }
            let rows: usize = rows.parse().map_err(|_| fmt(format!("bad row count in {line:?}")))?;
            let cols: usize = cols.parse().map_err(|_| fmt(format!("bad column count in {line:?}")))?;
            let records = read_embeddings_binary(&mut r).map_err(|e| fmt(format!("{name}: {e}")))?;
            if records.len() != rows || records.iter().any(|(_, v)| v.len() != cols) {
                return Err(fmt(format!("{name}: container does not match {rows}x{cols}")));
            }
            let data = records.into_iter().flat_map(|(_, v)| v).collect();
            tensors.push((name.to_string(), Mat::from_vec(rows, cols, data)));
        }

        // Build from the declared shapes, then overwrite by name.
        let mut params = Self::init(&hyper, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let mut seen = std::collections::HashSet::new();
        for (name, value) in tensors {
            let slot = params
                .tensors_mut()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| fmt(format!("unknown tensor {name:?}")))?;
            *slot = value;
            seen.insert(name);
        }
        if let Some(missing) = Self::NAMES.iter().find(|n| !seen.contains(**n)) {
            return Err(fmt(format!("missing tensor {missing:?}")));
        }
        params.check_shapes(&hyper)?;
        Ok((hyper, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_contract() {
        let h = CapmHyper::default();
        let p = CapmParams::init(&h, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.check_shapes(&h).unwrap();
        assert!(p.w2.as_slice().iter().all(|&v| v == 0.0));
        assert!(p.b2.as_slice().iter().all(|&v| v == 4.0));
        assert_eq!(CapmParams::NAMES.len(), p.tensors().len());
    }

    #[test]
    fn save_load_round_trip_at_f32() {
        let h = CapmHyper { d_b: 6, d_p: 4, ..CapmHyper::default() };
        let p = CapmParams::trained_like(&h, 0.3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut buf = Vec::new();
        p.save(&h, &mut buf).unwrap();
        let (h2, p2) = CapmParams::load(&buf[..]).unwrap();
        assert_eq!(h, h2);
        for ((n, a), (_, b)) in p.tensors().into_iter().zip(p2.tensors()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!(*x as f32 as f64, *y, "{n}");
            }
        }
    }

    #[test]
    fn load_rejects_garbage() {
        assert!(CapmParams::load(&b"nope\n"[..]).is_err());
        let h = CapmHyper::default();
        let p = CapmParams::init(&h, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut buf = Vec::new();
        p.save(&h, &mut buf).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(CapmParams::load(&buf[..]).is_err());
    }
}
