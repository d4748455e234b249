use forge_core::capm::gradcheck::{gradcheck, GradcheckOptions};
use forge_core::capm::{capm_backward, capm_forward, CapmHyper, CapmParams, DemoInput, Segment};
use forge_core::linalg::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn demos(n: usize, hyper: &CapmHyper, rng: &mut ChaCha8Rng) -> Vec<DemoInput> {
    (0..n)
        .map(|_| {
            let l = rng.random_range(2..6);
            let split = rng.random_range(1..l);
            let segments = (0..l)
                .map(|j| if j < split { Segment::User } else { Segment::Assistant })
                .collect();
            DemoInput {
                tokens: Mat::random_normal(l, hyper.d_b, 1.0, rng),
                segments,
            }
        })
        .collect()
}

fn run(seed: u64, hyper: CapmHyper, n: usize, t: usize) -> forge_core::capm::gradcheck::GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = CapmParams::trained_like(&hyper, 0.3, &mut rng).unwrap();
    let d = demos(n, &hyper, &mut rng);
    let h = Mat::random_normal(t, hyper.d_b, 1.0, &mut rng);
    let y = Mat::random_normal(t, hyper.d_b, 1.0, &mut rng);
    let up = Mat::random_normal(t, hyper.d_b, 1.0, &mut rng);
    gradcheck(&d, &h, &y, &params, &hyper, &up, GradcheckOptions::default()).unwrap()
}

#[test]
fn full_size_gradients_match_finite_differences() {
    let r = run(11, CapmHyper::default(), 3, 5);
    for tc in &r.tensors {
        eprintln!("{:<14} {:.3e} (max |g| {:.3e})", tc.name, tc.max_rel_err, tc.max_abs_grad);
    }
    eprintln!("worst {} {:.3e} over {}", r.worst, r.max_rel_err, r.checked);
    assert!(r.passes(1e-4), "{} {}", r.worst, r.max_rel_err);
}

#[test]
fn gradients_match_across_seeds_and_sizes() {
    let base = CapmHyper::default();
    let configs = [
        (base, 3, 5),
        (CapmHyper { d_b: 6, d_p: 4, k: 1, r: 1, heads: 1, gate_hidden: 3, ..base }, 2, 2),
        (CapmHyper { d_b: 5, d_p: 6, k: 2, r: 2, heads: 3, gate_hidden: 4, ..base }, 4, 3),
        (CapmHyper { d_b: 8, d_p: 8, k: 2, r: 2, ..base }, 1, 1),
    ];
    for (seed, (hyper, n, t)) in configs.into_iter().enumerate() {
        for s in 0..3 {
            let r = run(100 + 10 * seed as u64 + s, hyper, n, t);
            assert!(r.passes(1e-4), "config {seed} seed {s}: {} {}", r.worst, r.max_rel_err);
        }
    }
}

#[test]
fn saturated_temperature_has_zero_gradient() {
    let hyper = CapmHyper::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut params = CapmParams::trained_like(&hyper, 0.3, &mut rng).unwrap();
    params.tau_b2[(0, 0)] = -500.0;
    let d = demos(3, &hyper, &mut rng);
    let h = Mat::random_normal(4, hyper.d_b, 1.0, &mut rng);
    let y = Mat::random_normal(4, hyper.d_b, 1.0, &mut rng);
    let up = Mat::random_normal(4, hyper.d_b, 1.0, &mut rng);
    let trace = capm_forward(&d, &h, &y, &params, &hyper).unwrap();
    assert!(trace.tau.unwrap() > hyper.tau_min);
    let g = capm_backward(&trace, &params, &hyper, &up).unwrap();
    for t in [&g.params.tau_w1, &g.params.tau_b1, &g.params.tau_w2, &g.params.tau_b2] {
        assert!(t.as_slice().iter().all(|v| *v == 0.0));
    }
    let r = gradcheck(&d, &h, &y, &params, &hyper, &up, GradcheckOptions::default()).unwrap();
    assert!(r.passes(1e-4), "{} {}", r.worst, r.max_rel_err);
}
