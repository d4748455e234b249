//! Fused cross-modal similarity and DPP-based diverse demonstration selection.
//!
//! Candidates are first ranked by a λ-weighted mix of visual and text cosine
//! similarity. The top of that ranking forms a pool whose rows
//! `B_i = exp(β·s_i)·φ_i` define the L-ensemble `L = B Bᵀ`; a greedy Cholesky
//! pass then picks a high-determinant subset.

use std::cmp::Ordering;

use thiserror::Error;

use crate::episode::{EmbeddingStore, Modality};
use crate::linalg::{dot, norm, Mat};

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 8.0;
pub const DEFAULT_TOP_N: usize = 50;

/// Largest `β·s` accepted before `exp` would overflow an `f64`.
pub const MAX_QUALITY_EXPONENT: f64 = 700.0;
/// Greedy selection stops once the best residual norm² drops below this.
pub const RESIDUAL_EPS: f64 = 1e-12;
/// Exhaustive search guards.
pub const BRUTE_FORCE_MAX_N: usize = 20;
pub const BRUTE_FORCE_MAX_SUBSETS: u64 = 200_000;

const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm input vector")]
    ZeroNorm,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid candidate pool: {0}")]
    InvalidPool(String),
    #[error("missing {modality} embedding for id {id:?}")]
    MissingEmbedding { id: String, modality: Modality },
    #[error("quality overflow; rescale scores (beta * s = {0} at candidate {1})")]
    QualityOverflow(f64, usize),
    #[error("empty candidate pool")]
    EmptyPool,
    #[error("k = {k} out of range for a pool of {n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("instance too large for exhaustive search (N = {n}, k = {k})")]
    TooLarge { n: usize, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub lambda: f64,
    pub top_n: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            top_n: DEFAULT_TOP_N,
        }
    }
}

impl FusionConfig {
    pub fn new(lambda: f64, top_n: usize) -> Result<Self, FusionError> {
        let cfg = Self { lambda, top_n };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(FusionError::InvalidConfig(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, FusionError> {
    if a.len() != b.len() {
        return Err(FusionError::DimensionMismatch(a.len(), b.len()));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(FusionError::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `λ·cos(visual pair) + (1−λ)·cos(text pair)`.
pub fn fused_score(
    query_visual: &[f64],
    query_text: &[f64],
    cand_visual: &[f64],
    cand_text: &[f64],
    cfg: &FusionConfig,
) -> Result<f64, FusionError> {
    cfg.validate()?;
    let v = cosine(query_visual, cand_visual)?;
    let t = cosine(query_text, cand_text)?;
    Ok(cfg.lambda * v + (1.0 - cfg.lambda) * t)
}

fn embedding<'a>(store: &'a EmbeddingStore, m: Modality, id: &str) -> Result<&'a [f64], FusionError> {
    store
        .get(m, id)
        .map(|r| r.values.as_slice())
        .ok_or_else(|| FusionError::MissingEmbedding {
            id: id.to_string(),
            modality: m,
        })
}

/// Descending by score, ties by ascending id.
pub fn ranking_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Scores every candidate against the query and keeps the best `cfg.top_n`.
///
/// The query's own id is skipped. Every remaining candidate must have both
/// a visual and a text embedding in `store`.
pub fn rank_top_n<'a, I>(
    query_id: &str,
    candidates: I,
    store: &EmbeddingStore,
    cfg: &FusionConfig,
) -> Result<Vec<(String, f64)>, FusionError>
where
    I: IntoIterator<Item = &'a str>,
{
    cfg.validate()?;
    let qv = embedding(store, Modality::Visual, query_id)?;
    let qt = embedding(store, Modality::Text, query_id)?;
    let mut scored = Vec::new();
    for id in candidates {
        if id == query_id {
            continue;
        }
        let cv = embedding(store, Modality::Visual, id)?;
        let ct = embedding(store, Modality::Text, id)?;
        scored.push((id.to_string(), fused_score(qv, qt, cv, ct, cfg)?));
    }
    scored.sort_by(ranking_order);
    scored.truncate(cfg.top_n);
    Ok(scored)
}

/// Unit-norm visual features with relevance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub ids: Vec<String>,
    pub phi: Mat,
    pub scores: Vec<f64>,
    pub beta: f64,
}

impl CandidatePool {
    pub fn new(ids: Vec<String>, phi: Mat, scores: Vec<f64>, beta: f64) -> Result<Self, FusionError> {
        let pool = Self {
            ids,
            phi,
            scores,
            beta,
        };
        pool.validate()?;
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let n = self.ids.len();
        if self.phi.rows() != n || self.scores.len() != n {
            return Err(FusionError::InvalidPool(format!(
                "{n} ids, {} feature rows, {} scores",
                self.phi.rows(),
                self.scores.len()
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(FusionError::InvalidPool(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if let Some(i) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(FusionError::InvalidPool(format!("score {i} is not finite")));
        }
        for (i, row) in self.phi.iter_rows().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(FusionError::InvalidPool(format!(
                    "feature row {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// `q_i = exp(β·s_i)`, derived on demand.
    pub fn quality(&self, i: usize) -> f64 {
        (self.beta * self.scores[i]).exp()
    }
}

/// Row factor `B` of the L-ensemble kernel `L = B Bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DppFactor {
    b: Mat,
}

impl DppFactor {
    /// Wraps an explicit factor matrix, one row per candidate.
    pub fn from_rows(b: Mat) -> Self {
        Self { b }
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn len(&self) -> usize {
        self.b.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.b.rows() == 0
    }

    pub fn kernel_entry(&self, i: usize, j: usize) -> f64 {
        dot(self.b.row(i), self.b.row(j))
    }

    pub fn kernel(&self) -> Mat {
        self.b.matmul_t(&self.b)
    }

    /// Principal submatrix `L_Y`.
    pub fn kernel_submatrix(&self, subset: &[usize]) -> Mat {
        let k = subset.len();
        let mut m = Mat::zeros(k, k);
        for (a, &i) in subset.iter().enumerate() {
            for (c, &j) in subset.iter().enumerate() {
                m[(a, c)] = self.kernel_entry(i, j);
            }
        }
        m
    }

    /// `det(L_Y)` by pivoted elimination.
    pub fn subset_det(&self, subset: &[usize]) -> f64 {
        if subset.is_empty() {
            return 1.0;
        }
        self.kernel_submatrix(subset).det()
    }
}

pub fn build_dpp_factor(pool: &CandidatePool) -> Result<DppFactor, FusionError> {
    pool.validate()?;
    let mut b = pool.phi.clone();
    for i in 0..pool.len() {
        let e = pool.beta * pool.scores[i];
        if e > MAX_QUALITY_EXPONENT {
            return Err(FusionError::QualityOverflow(e, i));
        }
        let q = e.exp();
        b.row_mut(i).iter_mut().for_each(|x| *x *= q);
    }
    Ok(DppFactor { b })
}

/// Result of a greedy MAP pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedySelection {
    /// Candidate indices in selection order.
    pub indices: Vec<usize>,
    /// Squared residual norm of each pick, i.e. its marginal determinant gain.
    pub gains: Vec<f64>,
}

impl GreedySelection {
    /// `det(L_Y)` as the product of the recorded gains.
    pub fn det(&self) -> f64 {
        self.gains.iter().product()
    }
}

/// Greedy Cholesky MAP selection of up to `k` rows.
///
/// At every step the unselected row with the largest residual norm² is
/// picked (lowest index on ties) and its unit direction is projected out of
/// all remaining residuals. Stops early once no residual exceeds
/// [`RESIDUAL_EPS`].
pub fn greedy_dpp_select(factor: &DppFactor, k: usize) -> Result<GreedySelection, FusionError> {
    let n = factor.len();
    if n == 0 {
        return Err(FusionError::EmptyPool);
    }
    if k == 0 || k > n {
        return Err(FusionError::KOutOfRange { k, n });
    }
    let mut residual = factor.b.clone();
    let mut sq: Vec<f64> = residual.iter_rows().map(|r| dot(r, r)).collect();
    let mut selected = vec![false; n];
    let mut out = GreedySelection {
        indices: Vec::with_capacity(k),
        gains: Vec::with_capacity(k),
    };
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for j in 0..n {
            if selected[j] {
                continue;
            }
            // strict `>` keeps the lowest index on ties
            if best.is_none_or(|b| sq[j] > sq[b]) {
                best = Some(j);
            }
        }
        let Some(j_star) = best else { break };
        let gain = sq[j_star];
        if gain < RESIDUAL_EPS {
            break;
        }
        selected[j_star] = true;
        out.indices.push(j_star);
        out.gains.push(gain);

        let scale = gain.sqrt();
        let direction: Vec<f64> = residual.row(j_star).iter().map(|x| x / scale).collect();
        for j in 0..n {
            if selected[j] {
                continue;
            }
            let row = residual.row_mut(j);
            let proj = dot(row, &direction);
            for (x, c) in row.iter_mut().zip(&direction) {
                *x -= proj * c;
            }
            sq[j] = dot(row, row);
        }
    }
    Ok(out)
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u64 / (i + 1) as u64;
    }
    acc
}

/// Exhaustive `argmax_{|Y| = k} det(L_Y)`; ties go to the lexicographically
/// smallest subset. Only for small instances.
pub fn brute_force_map(factor: &DppFactor, k: usize) -> Result<(Vec<usize>, f64), FusionError> {
    let n = factor.len();
    if n == 0 {
        return Err(FusionError::EmptyPool);
    }
    if k == 0 || k > n {
        return Err(FusionError::KOutOfRange { k, n });
    }
    if n > BRUTE_FORCE_MAX_N || binomial(n, k) > BRUTE_FORCE_MAX_SUBSETS {
        return Err(FusionError::TooLarge { n, k });
    }
    let kernel = factor.kernel();
    let mut subset: Vec<usize> = (0..k).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let mut sub = Mat::zeros(k, k);
        for (a, &i) in subset.iter().enumerate() {
            for (c, &j) in subset.iter().enumerate() {
                sub[(a, c)] = kernel[(i, j)];
            }
        }
        let d = sub.det();
        // lexicographic enumeration + strict `>` keeps the smallest set on ties
        if best.as_ref().is_none_or(|(_, bd)| d > *bd) {
            best = Some((subset.clone(), d));
        }
        // next combination
        let mut i = k;
        while i > 0 && subset[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        subset[i - 1] += 1;
        for j in i..k {
            subset[j] = subset[j - 1] + 1;
        }
    }
    Ok(best.expect("at least one subset"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::EmbeddingRecord;

    /// Three candidates with qualities (1.0, 0.9, 1.2) along (1,0), (0,1) and the diagonal.
    fn worked_example() -> DppFactor {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let qual = [1.0, 0.9, 1.2];
        let phi = [[1.0, 0.0], [0.0, 1.0], [h, h]];
        let rows: Vec<Vec<f64>> = phi
            .iter()
            .zip(qual)
            .map(|(r, q)| r.iter().map(|x| x * q).collect())
            .collect();
        DppFactor::from_rows(Mat::from_rows(&rows))
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(
            cosine(&[1.0], &[1.0, 2.0]).unwrap_err(),
            FusionError::DimensionMismatch(1, 2)
        );
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap_err(), FusionError::ZeroNorm);
    }

    #[test]
    fn cosine_against_direct_formula() {
        let expected = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        assert!((cosine(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn fused_score_cases() {
        let cfg = FusionConfig::default();
        assert_eq!(cfg.lambda, 0.5);
        let v = [0.3, 0.4];
        let t = [1.0, -2.0, 0.5];
        assert!((fused_score(&v, &t, &v, &t, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let t_neg = [-1.0, 2.0, -0.5];
        assert!(fused_score(&v, &t, &v, &t_neg, &cfg).unwrap().abs() < 1e-12);
        assert!(FusionConfig::new(1.5, 3).is_err());
    }

    #[test]
    fn rank_top_n_excludes_query_and_orders() {
        let mut store = EmbeddingStore::new();
        for (id, v, t) in [
            ("q", [1.0, 0.0], [0.0, 1.0]),
            ("dup", [1.0, 0.0], [0.0, 1.0]),
            ("orth", [0.0, 1.0], [1.0, 0.0]),
        ] {
            store.insert(EmbeddingRecord::new(id, Modality::Visual, v.to_vec()), true).unwrap();
            store.insert(EmbeddingRecord::new(id, Modality::Text, t.to_vec()), true).unwrap();
        }
        let cfg = FusionConfig::new(0.5, 2).unwrap();
        let ranked = rank_top_n("q", ["q", "orth", "dup"], &store, &cfg).unwrap();
        assert_eq!(ranked.len(), 2);
        assert_eq!(ranked[0].0, "dup");
        assert!((ranked[0].1 - 1.0).abs() < 1e-12);

        let none = rank_top_n("q", ["orth", "dup"], &store, &FusionConfig::new(0.5, 0).unwrap()).unwrap();
        assert!(none.is_empty());

        let missing = rank_top_n("q", ["ghost"], &store, &cfg).unwrap_err();
        assert!(matches!(missing, FusionError::MissingEmbedding { .. }));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let mut store = EmbeddingStore::new();
        for id in ["q", "b", "a", "c"] {
            store.insert(EmbeddingRecord::new(id, Modality::Visual, vec![1.0, 1.0]), true).unwrap();
            store.insert(EmbeddingRecord::new(id, Modality::Text, vec![1.0]), true).unwrap();
        }
        let ranked = rank_top_n("q", ["c", "b", "a"], &store, &FusionConfig::default()).unwrap();
        let ids: Vec<_> = ranked.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn zero_scores_leave_phi_unchanged() {
        let phi = Mat::from_rows(&[[1.0, 0.0], [0.6, 0.8]]);
        let pool = CandidatePool::new(vec!["a".into(), "b".into()], phi.clone(), vec![0.0, 0.0], 8.0).unwrap();
        assert_eq!(build_dpp_factor(&pool).unwrap().b(), &phi);
    }

    #[test]
    fn ln2_score_doubles_row() {
        let s = std::f64::consts::LN_2 / 8.0;
        let pool = CandidatePool::new(vec!["a".into()], Mat::from_rows(&[[0.6, 0.8]]), vec![s], 8.0).unwrap();
        let b = build_dpp_factor(&pool).unwrap();
        assert!((b.b()[(0, 0)] - 1.2).abs() < 1e-12);
        assert!((b.b()[(0, 1)] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn overflow_guard() {
        let pool = CandidatePool::new(vec!["a".into()], Mat::from_rows(&[[1.0]]), vec![90.0], 8.0).unwrap();
        let err = build_dpp_factor(&pool).unwrap_err();
        assert!(err.to_string().starts_with("quality overflow; rescale scores"));
    }

    #[test]
    fn pool_rejects_non_unit_rows_and_bad_beta() {
        let phi = Mat::from_rows(&[[2.0, 0.0]]);
        assert!(CandidatePool::new(vec!["a".into()], phi, vec![0.0], 8.0).is_err());
        let phi = Mat::from_rows(&[[1.0, 0.0]]);
        assert!(CandidatePool::new(vec!["a".into()], phi, vec![0.0], 0.0).is_err());
    }

    #[test]
    fn worked_example_greedy_and_exhaustive() {
        let f = worked_example();
        let g = greedy_dpp_select(&f, 2).unwrap();
        assert_eq!(g.indices, vec![2, 0]);
        assert!((g.det() - 0.72).abs() < 1e-9);
        let (set, det) = brute_force_map(&f, 2).unwrap();
        assert_eq!(set, vec![0, 1]);
        assert!((det - 0.81).abs() < 1e-9);
    }

    #[test]
    fn k1_picks_highest_score() {
        let phi = Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        let pool = CandidatePool::new(vec!["a".into(), "b".into(), "c".into()], phi, vec![0.1, 0.3, 0.2], 8.0).unwrap();
        let g = greedy_dpp_select(&build_dpp_factor(&pool).unwrap(), 1).unwrap();
        assert_eq!(g.indices, vec![1]);
    }

    #[test]
    fn duplicate_rows_trigger_early_stop() {
        let f = DppFactor::from_rows(Mat::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 0.5]]));
        let g = greedy_dpp_select(&f, 3).unwrap();
        assert_eq!(g.indices, vec![0, 2]);
        let (_, det) = brute_force_map(&DppFactor::from_rows(Mat::from_rows(&[[1.0, 0.0], [1.0, 0.0]])), 2).unwrap();
        assert!(det.abs() < 1e-15);
    }

    #[test]
    fn k_equal_n_gives_full_determinant() {
        let f = worked_example();
        let (set, det) = brute_force_map(&f, 3).unwrap();
        assert_eq!(set, vec![0, 1, 2]);
        assert!((det - f.kernel().det()).abs() < 1e-12);
    }

    #[test]
    fn selection_errors() {
        let f = worked_example();
        assert_eq!(greedy_dpp_select(&f, 4).unwrap_err(), FusionError::KOutOfRange { k: 4, n: 3 });
        assert_eq!(greedy_dpp_select(&f, 0).unwrap_err(), FusionError::KOutOfRange { k: 0, n: 3 });
        let empty = DppFactor::from_rows(Mat::zeros(0, 2));
        assert_eq!(greedy_dpp_select(&empty, 1).unwrap_err(), FusionError::EmptyPool);
        let big = DppFactor::from_rows(Mat::identity(21));
        assert!(matches!(brute_force_map(&big, 2), Err(FusionError::TooLarge { .. })));
        assert_eq!(binomial(20, 10), 184_756);
        assert!(brute_force_map(&DppFactor::from_rows(Mat::identity(20)), 1).is_ok());
    }
}
