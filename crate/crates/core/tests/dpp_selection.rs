#![allow(clippy::needless_range_loop)]

use forge_core::fusion::{
    brute_force_map, build_dpp_factor, cosine, fused_score, greedy_dpp_select, CandidatePool,
    DppFactor, FusionConfig, FusionError,
};
use forge_core::linalg::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Determinant by partial-pivot LU, written out here so the check does not
/// lean on the library's own elimination.
fn lu_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        if a[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            a.swap(p, c);
            det = -det;
        }
        det *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    det
}

fn sub_det(b: &Mat, subset: &[usize]) -> f64 {
    let dotp = |i: usize, j: usize| b.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum::<f64>();
    lu_det(subset.iter().map(|&i| subset.iter().map(|&j| dotp(i, j)).collect()).collect())
}

fn random_pool(rng: &mut ChaCha8Rng, n: usize, d: usize, beta: f64) -> CandidatePool {
    let mut phi = Mat::random_normal(n, d, 1.0, rng);
    for i in 0..n {
        let norm = phi.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        phi.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    let scores = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ids = (0..n).map(|i| format!("c{i}")).collect();
    CandidatePool::new(ids, phi, scores, beta).unwrap()
}

#[test]
fn greedy_steps_follow_determinant_ratio_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..500 {
        let n = rng.random_range(2..=12);
        let k = rng.random_range(1..=4.min(n));
        let pool = random_pool(&mut rng, n, 8, 8.0);
        let factor = build_dpp_factor(&pool).unwrap();
        let sel = greedy_dpp_select(&factor, k).unwrap();
        assert_eq!(sel.indices.len(), k, "trial {trial}");

        let mut chosen: Vec<usize> = Vec::new();
        for &pick in &sel.indices {
            let base = if chosen.is_empty() { 1.0 } else { sub_det(factor.b(), &chosen) };
            let oracle = (0..n)
                .filter(|j| !chosen.contains(j))
                .map(|j| {
                    let mut s = chosen.clone();
                    s.push(j);
                    (j, sub_det(factor.b(), &s) / base)
                })
                .fold(None::<(usize, f64)>, |best, (j, r)| match best {
                    Some((_, br)) if br >= r => best,
                    _ => Some((j, r)),
                })
                .unwrap()
                .0;
            assert_eq!(pick, oracle, "trial {trial}");
            chosen.push(pick);
        }
        let direct = sub_det(factor.b(), &sel.indices);
        assert!((sel.det() - direct).abs() <= 1e-9 * direct.abs(), "trial {trial}");
    }
}

#[test]
fn greedy_matches_brute_force_on_tiny_orthogonal_pools() {
    // with orthogonal features every subset determinant is a product of
    // qualities, so the greedy choice is optimal
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.random_range(2..=6);
        let k = rng.random_range(1..=n);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let pool = CandidatePool::new(
            (0..n).map(|i| i.to_string()).collect(),
            Mat::identity(n),
            scores,
            8.0,
        )
        .unwrap();
        let f = build_dpp_factor(&pool).unwrap();
        let g = greedy_dpp_select(&f, k).unwrap();
        let (set, det) = brute_force_map(&f, k).unwrap();
        let mut gi = g.indices.clone();
        gi.sort();
        assert_eq!(gi, set);
        assert!((g.det() - det).abs() <= 1e-9 * det);
    }
}

#[test]
fn worked_example_greedy_and_exhaustive() {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let b = Mat::from_rows(&[[1.0, 0.0], [0.0, 0.9], [1.2 * s, 1.2 * s]]);
    let f = DppFactor::from_rows(b);
    let g = greedy_dpp_select(&f, 2).unwrap();
    assert_eq!(g.indices, vec![2, 0]);
    assert!((g.det() - 0.72).abs() < 1e-9);
    let (set, det) = brute_force_map(&f, 2).unwrap();
    assert_eq!(set, vec![0, 1]);
    assert!((det - 0.81).abs() < 1e-9);

    // the same kernel reached through relevance scores
    let beta = 8.0;
    let pool = CandidatePool::new(
        vec!["a".into(), "b".into(), "c".into()],
        Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0], [s, s]]),
        [1.0f64, 0.9, 1.2].iter().map(|q| q.ln() / beta).collect(),
        beta,
    )
    .unwrap();
    let f2 = build_dpp_factor(&pool).unwrap();
    assert!(f2.b().max_abs_diff(f.b()) < 1e-12);
}

#[test]
fn uniform_score_shift_keeps_selection_and_scales_det() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let n = rng.random_range(3..=10);
        let k = rng.random_range(1..=3);
        let pool = random_pool(&mut rng, n, 6, 8.0);
        let c = rng.random_range(-0.5..0.5);
        let mut shifted = pool.clone();
        shifted.scores.iter_mut().for_each(|s| *s += c);
        let a = greedy_dpp_select(&build_dpp_factor(&pool).unwrap(), k).unwrap();
        let b = greedy_dpp_select(&build_dpp_factor(&shifted).unwrap(), k).unwrap();
        assert_eq!(a.indices, b.indices);
        let expect = a.det() * (2.0 * 8.0 * c * a.indices.len() as f64).exp();
        assert!((b.det() - expect).abs() <= 1e-9 * expect);
    }
}

#[test]
fn kernel_is_positive_semidefinite() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let pool = random_pool(&mut rng, 8, 5, 8.0);
        let l = build_dpp_factor(&pool).unwrap().kernel();
        for _ in 0..20 {
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut q = 0.0;
            for i in 0..8 {
                for j in 0..8 {
                    q += x[i] * l[(i, j)] * x[j];
                }
            }
            let scale: f64 = l.as_slice().iter().map(|v| v.abs()).sum();
            assert!(q >= -1e-12 * scale);
        }
        // every principal minor of a Gram matrix is non-negative
        let f = build_dpp_factor(&pool).unwrap();
        assert!(f.subset_det(&[0, 1, 2]) >= -1e-9);
    }
}

#[test]
fn quality_overflow_is_rejected() {
    let pool = CandidatePool::new(vec!["x".into()], Mat::identity(1), vec![100.0], 8.0).unwrap();
    let err = build_dpp_factor(&pool).unwrap_err();
    assert!(matches!(err, FusionError::QualityOverflow(..)));
    assert!(err.to_string().contains("quality overflow; rescale scores"));
}

#[test]
fn rank_deficient_pool_stops_early() {
    let b = Mat::from_rows(&[[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]);
    let g = greedy_dpp_select(&DppFactor::from_rows(b), 3).unwrap();
    assert_eq!(g.indices, vec![2]);
}

#[test]
fn fused_score_properties() {
    let cfg = FusionConfig::default();
    assert_eq!(cfg.lambda, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let d = rng.random_range(2..16);
        let mut v = || (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (qv, qt, cv, ct) = (v(), v(), v(), v());
        let ab = fused_score(&qv, &qt, &cv, &ct, &cfg).unwrap();
        let ba = fused_score(&cv, &ct, &qv, &qt, &cfg).unwrap();
        assert_eq!(ab, ba);
        assert!((fused_score(&qv, &qt, &qv, &qt, &cfg).unwrap() - 1.0).abs() < 1e-12);
        // the mix is the λ-weighted mean of the two cosines
        let expect = 0.5 * cosine(&qv, &cv).unwrap() + 0.5 * cosine(&qt, &ct).unwrap();
        assert!((ab - expect).abs() < 1e-15);
    }
    assert!(FusionConfig::new(1.5, 10).is_err());
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(FusionError::ZeroNorm));
}
