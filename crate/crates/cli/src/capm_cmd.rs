use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Subcommand};
use forge_core::capm::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use forge_core::capm::{
    capm_forward, forward_diagnostics, CapmHyper, CapmParams, CapmTrace, DemoInput,
    LayerDiagnostics, Segment,
};
use forge_core::linalg::{norm, Mat};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{CapmOverrides, ForgeConfig};
use crate::error::{numeric, Result};
use crate::eval::Format;
use crate::io::sink;
use crate::table::Table;

pub const GRADCHECK_TOL: f64 = 1e-4;

/// Independent stream for demonstrations, so `h` and `y` do not depend on
/// how many demonstrations are drawn.
const DEMO_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Args, Clone)]
pub struct HyperFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "d-b")]
    pub d_b: Option<usize>,
    #[arg(long = "d-p")]
    pub d_p: Option<usize>,
    /// Modulation rank.
    #[arg(long = "r")]
    pub r: Option<usize>,
    /// Context probes per demonstration.
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long = "tau-min")]
    pub tau_min: Option<f64>,
    #[arg(long = "tau-max")]
    pub tau_max: Option<f64>,
    /// Query tokens T.
    #[arg(long, default_value_t = 5)]
    pub tokens: usize,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl HyperFlags {
    pub fn overrides(&self) -> CapmOverrides {
        CapmOverrides {
            d_b: self.d_b,
            d_p: self.d_p,
            k: self.k,
            r: self.r,
            tau_min: self.tau_min,
            tau_max: self.tau_max,
            ..Default::default()
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum CapmCommand {
    /// Forward pass at one or more shot counts; prints trace statistics.
    Demo {
        #[command(flatten)]
        flags: HyperFlags,
        /// Shot counts, comma separated. Defaults to the configured grid.
        #[arg(long, value_delimiter = ',')]
        shots: Vec<usize>,
        /// Std of the noise added to the initialization (0 = fresh init).
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        flags: HyperFlags,
        #[arg(long, default_value_t = 2)]
        shots: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
    },
    /// Per-layer hidden-state statistics at 0 and N shots.
    Diagnose {
        #[command(flatten)]
        flags: HyperFlags,
        #[arg(long, default_value_t = 8)]
        shots: usize,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
    },
}

impl CapmCommand {
    pub fn flags(&self) -> &HyperFlags {
        match self {
            CapmCommand::Demo { flags, .. }
            | CapmCommand::Gradcheck { flags, .. }
            | CapmCommand::Diagnose { flags, .. } => flags,
        }
    }
}

pub fn random_demos(rng: &mut ChaCha8Rng, n: usize, d_b: usize) -> Vec<DemoInput> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(2..8);
            let mut segments: Vec<Segment> = (0..len)
                .map(|i| match i {
                    0 => Segment::User,
                    1 => Segment::Assistant,
                    _ if rng.random_bool(0.5) => Segment::User,
                    _ => Segment::Assistant,
                })
                .collect();
            segments.shuffle(rng);
            DemoInput {
                tokens: Mat::random_normal(len, d_b, 1.0, rng),
                segments,
            }
        })
        .collect()
}

fn params(hyper: &CapmHyper, noise: f64, rng: &mut ChaCha8Rng) -> Result<CapmParams> {
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(crate::error::usage("--noise must be a non-negative number"));
    }
    Ok(if noise == 0.0 {
        CapmParams::init(hyper, rng)?
    } else {
        CapmParams::trained_like(hyper, noise, rng)?
    })
}

pub fn hash_mat(m: &Mat) -> String {
    let mut h = Sha256::new();
    for v in m.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn mean_row_norm(m: &Mat) -> f64 {
    m.iter_rows().map(norm).sum::<f64>() / m.rows().max(1) as f64
}

#[derive(Debug, Serialize)]
pub struct DemoRow {
    pub shots: usize,
    pub tau: Option<f64>,
    pub gate_mean: f64,
    pub routing_entropy: Option<f64>,
    pub y_norm: f64,
    pub y_prime_norm: f64,
    pub y_prime_sha256: String,
}

fn demo_row(shots: usize, t: &CapmTrace) -> DemoRow {
    let g = t.gate.as_slice();
    let entropy = (t.routing.cols() > 0).then(|| {
        t.routing
            .iter_rows()
            .map(|r| -r.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / t.routing.rows() as f64
    });
    DemoRow {
        shots,
        tau: t.tau,
        gate_mean: g.iter().sum::<f64>() / g.len() as f64,
        routing_entropy: entropy,
        y_norm: mean_row_norm(&t.y),
        y_prime_norm: mean_row_norm(&t.y_prime),
        y_prime_sha256: hash_mat(&t.y_prime),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.6}"))
}

fn write_rows<T: Serialize>(
    rows: &[T],
    table: &Table,
    format: Format,
    out: Option<&std::path::Path>,
    trailer: Option<&str>,
) -> Result<()> {
    let mut w = sink(out)?;
    match format {
        Format::Jsonl => {
            for r in rows {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
        }
        Format::Table => {
            w.write_all(table.render().as_bytes())?;
            if let Some(t) = trailer {
                writeln!(w, "{t}")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn demo(cfg: &ForgeConfig, flags: &HyperFlags, shots: &[usize], noise: f64) -> Result<()> {
    let hyper = cfg.capm;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = params(&hyper, noise, &mut rng)?;
    let h = Mat::random_normal(flags.tokens, hyper.d_b, 1.0, &mut rng);
    let y = Mat::random_normal(flags.tokens, hyper.d_b, 1.0, &mut rng);
    let grid = if shots.is_empty() { &cfg.shots_grid[..] } else { shots };
    let max = grid.iter().copied().max().unwrap_or(0);
    let mut drng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DEMO_STREAM);
    let pool = random_demos(&mut drng, max, hyper.d_b);

    let mut rows = Vec::new();
    let mut table = Table::new(["Shots", "Tau", "Gate", "Entropy", "|Y'|", "SHA-256(Y')"]);
    for &n in grid {
        let t = capm_forward(&pool[..n], &h, &y, &p, &hyper)?;
        let r = demo_row(n, &t);
        table.push([
            n.to_string(),
            opt(r.tau),
            format!("{:.6}", r.gate_mean),
            opt(r.routing_entropy),
            format!("{:.6}", r.y_prime_norm),
            r.y_prime_sha256.clone(),
        ]);
        rows.push(r);
    }
    write_rows(
        &rows,
        &table,
        flags.format.unwrap_or(Format::Jsonl),
        flags.out.as_deref(),
        None,
    )
}

pub fn run_gradcheck(
    hyper: &CapmHyper,
    seed: u64,
    shots: usize,
    tokens: usize,
    noise: f64,
) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = params(hyper, noise, &mut rng)?;
    let h = Mat::random_normal(tokens, hyper.d_b, 1.0, &mut rng);
    let y = Mat::random_normal(tokens, hyper.d_b, 1.0, &mut rng);
    let up = Mat::random_normal(tokens, hyper.d_b, 1.0, &mut rng);
    let demos = random_demos(&mut rng, shots, hyper.d_b);
    Ok(gradcheck(&demos, &h, &y, &p, hyper, &up, GradcheckOptions::default())?)
}

#[derive(Debug, Serialize)]
struct GradcheckLine<'a> {
    seed: u64,
    verdict: &'a str,
    #[serde(flatten)]
    report: &'a GradcheckReport,
}

fn grad(cfg: &ForgeConfig, flags: &HyperFlags, shots: usize, noise: f64) -> Result<()> {
    let report = run_gradcheck(&cfg.capm, cfg.seed, shots, flags.tokens, noise)?;
    let pass = report.passes(GRADCHECK_TOL);
    let verdict = if pass {
        "PASS max_rel_err < 1e-4"
    } else {
        "FAIL max_rel_err >= 1e-4"
    };
    let mut table = Table::new(["Tensor", "MaxRelErr", "Max|grad|"]);
    for t in &report.tensors {
        table.push([
            t.name.clone(),
            format!("{:.3e}", t.max_rel_err),
            format!("{:.3e}", t.max_abs_grad),
        ]);
    }
    let trailer = format!(
        "{verdict} (max_rel_err = {:.3e} at {}, {} entries)",
        report.max_rel_err, report.worst, report.checked
    );
    let line = GradcheckLine {
        seed: cfg.seed,
        verdict,
        report: &report,
    };
    write_rows(
        &[line],
        &table,
        flags.format.unwrap_or(Format::Table),
        flags.out.as_deref(),
        Some(&trailer),
    )?;
    if pass {
        Ok(())
    } else {
        Err(numeric(trailer))
    }
}

/// Stacks `layers` call sites. Each layer's attention output is a fixed
/// random projection of its incoming hidden state, so context injected at
/// one layer propagates to the next.
pub fn run_diagnose(
    hyper: &CapmHyper,
    seed: u64,
    shots: usize,
    tokens: usize,
    layers: usize,
    noise: f64,
) -> Result<Vec<LayerDiagnostics>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stack = Vec::with_capacity(layers);
    for _ in 0..layers {
        let p = params(hyper, noise, &mut rng)?;
        let w = Mat::random_normal(hyper.d_b, hyper.d_b, 1.0 / (hyper.d_b as f64).sqrt(), &mut rng);
        stack.push((p, w));
    }
    let h0 = Mat::random_normal(tokens, hyper.d_b, 1.0, &mut rng);
    let mut drng = ChaCha8Rng::seed_from_u64(seed ^ DEMO_STREAM);
    let demos = random_demos(&mut drng, shots, hyper.d_b);

    let run = |demos: &[DemoInput]| -> Result<Vec<CapmTrace>> {
        let mut h = h0.clone();
        let mut traces = Vec::with_capacity(layers);
        for (p, w) in &stack {
            let y = h.matmul(w);
            let t = capm_forward(demos, &h, &y, p, hyper)?;
            h = t.h.add(&t.y_prime);
            traces.push(t);
        }
        Ok(traces)
    };
    let zero = run(&[])?;
    let k = run(&demos)?;
    Ok(forward_diagnostics(&zero, &k)?)
}

fn diagnose(
    cfg: &ForgeConfig,
    flags: &HyperFlags,
    shots: usize,
    layers: usize,
    noise: f64,
) -> Result<()> {
    let diags = run_diagnose(&cfg.capm, cfg.seed, shots, flags.tokens, layers, noise)?;
    let mut table = Table::new([
        "Layer", "Hidden0", "HiddenK", "Resid0", "ResidK", "Attn0", "AttnK", "Shift",
    ]);
    for d in &diags {
        table.push(
            [
                d.layer as f64,
                d.zero_shot.hidden_norm,
                d.k_shot.hidden_norm,
                d.zero_shot.residual_norm,
                d.k_shot.residual_norm,
                d.zero_shot.attention_out_norm,
                d.k_shot.attention_out_norm,
                d.representation_shift,
            ]
            .iter()
            .enumerate()
            .map(|(i, v)| if i == 0 { format!("{v}") } else { format!("{v:.6}") }),
        );
    }
    write_rows(
        &diags,
        &table,
        flags.format.unwrap_or(Format::Jsonl),
        flags.out.as_deref(),
        None,
    )
}

pub fn run(cmd: &CapmCommand, cfg: &ForgeConfig) -> Result<()> {
    match cmd {
        CapmCommand::Demo { flags, shots, noise } => demo(cfg, flags, shots, *noise),
        CapmCommand::Gradcheck { flags, shots, noise } => grad(cfg, flags, *shots, *noise),
        CapmCommand::Diagnose {
            flags,
            shots,
            layers,
            noise,
        } => diagnose(cfg, flags, *shots, *layers, *noise),
    }
}
