//! Shot-curve summaries, stability, correlation and tallying.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::ShotCurve;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("curve has no zero-shot point")]
    MissingZeroShot,
    #[error("single-point curve")]
    SinglePoint,
    #[error("shot grids differ: {0:?} vs {1:?}")]
    GridMismatch(Vec<u32>, Vec<u32>),
    #[error("clean curve area is not positive ({0})")]
    NonPositiveArea(f64),
    #[error("clean curve value at shot {0} is not positive")]
    NonPositiveClean(u32),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("constant input has undefined correlation")]
    ConstantInput,
    #[error("zero base value at shot {0}")]
    ZeroBase(u32),
    #[error("empty input")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub zero_shot: f64,
    pub peak: f64,
    pub efficiency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    RandomReplace,
    ReverseOrder,
    Interference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub perturbation: Perturbation,
    pub deviation_percent: f64,
}

/// Trapezoid rule over `(x, y)` samples with strictly increasing `x`.
fn trapezoid(xs: &[u32], ys: impl Fn(usize) -> f64) -> f64 {
    xs.windows(2)
        .enumerate()
        .map(|(i, w)| 0.5 * (ys(i) + ys(i + 1)) * f64::from(w[1] - w[0]))
        .sum()
}

/// ICL efficiency: trapezoid area of `P_k − P_0` over the shot grid divided
/// by the largest shot.
pub fn icl_efficiency(curve: &ShotCurve) -> Result<f64, MetricError> {
    let p0 = curve.value_at(0).ok_or(MetricError::MissingZeroShot)?;
    if curve.len() < 2 {
        return Err(MetricError::SinglePoint);
    }
    let k_max = f64::from(curve.max_shot().expect("non-empty"));
    let v = curve.values();
    Ok(trapezoid(curve.shots(), |i| v[i] - p0) / k_max)
}

/// Zero-shot value, peak over the provided shots, and efficiency.
pub fn summarize(curve: &ShotCurve) -> Result<CurveSummary, MetricError> {
    let zero_shot = curve.value_at(0).ok_or(MetricError::MissingZeroShot)?;
    let efficiency = icl_efficiency(curve)?;
    let peak = curve.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(CurveSummary {
        zero_shot,
        peak,
        efficiency,
    })
}

fn same_grid(a: &ShotCurve, b: &ShotCurve) -> Result<(), MetricError> {
    if a.shots() != b.shots() {
        return Err(MetricError::GridMismatch(a.shots().to_vec(), b.shots().to_vec()));
    }
    Ok(())
}

/// Deviation area between a clean and a perturbed curve as a percentage of
/// the clean curve's area, both by the trapezoid rule on the shared grid.
pub fn stability_score(clean: &ShotCurve, perturbed: &ShotCurve) -> Result<f64, MetricError> {
    same_grid(clean, perturbed)?;
    if let Some(i) = clean.values().iter().position(|&v| v <= 0.0) {
        return Err(MetricError::NonPositiveClean(clean.shots()[i]));
    }
    let c = clean.values();
    let p = perturbed.values();
    let area = trapezoid(clean.shots(), |i| c[i]);
    if area <= 0.0 {
        return Err(MetricError::NonPositiveArea(area));
    }
    let deviation = trapezoid(clean.shots(), |i| (c[i] - p[i]).abs());
    Ok(100.0 * deviation / area)
}

pub fn stability_report(
    perturbation: Perturbation,
    clean: &ShotCurve,
    perturbed: &ShotCurve,
) -> Result<StabilityReport, MetricError> {
    Ok(StabilityReport {
        perturbation,
        deviation_percent: stability_score(clean, perturbed)?,
    })
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<(), MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(MetricError::TooFewPoints(xs.len()));
    }
    Ok(())
}

/// Product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ConstantInput);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation: Pearson on average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Mean of `100·(variant − base)/base` over every paired curve and shot.
pub fn relative_change(base: &[ShotCurve], variant: &[ShotCurve]) -> Result<f64, MetricError> {
    if base.len() != variant.len() {
        return Err(MetricError::LengthMismatch(base.len(), variant.len()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, v) in base.iter().zip(variant) {
        same_grid(b, v)?;
        for ((&shot, &bv), &vv) in b.shots().iter().zip(b.values()).zip(v.values()) {
            if bv == 0.0 {
                return Err(MetricError::ZeroBase(shot));
            }
            total += 100.0 * (vv - bv) / bv;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::Empty);
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Tie,
    Lose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinTieLose {
    pub win: f64,
    pub tie: f64,
    pub lose: f64,
}

/// Outcome shares in percent.
pub fn win_tie_lose(outcomes: &[Outcome]) -> Result<WinTieLose, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut counts = [0usize; 3];
    for o in outcomes {
        counts[*o as usize] += 1;
    }
    let n = outcomes.len() as f64;
    let pct = |c: usize| 100.0 * c as f64 / n;
    Ok(WinTieLose {
        win: pct(counts[0]),
        tie: pct(counts[1]),
        lose: pct(counts[2]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(values: &[f64]) -> ShotCurve {
        ShotCurve::new(vec![0, 1, 2, 4, 8], values.to_vec()).unwrap()
    }

    #[test]
    fn efficiency_fixtures() {
        assert_eq!(icl_efficiency(&grid(&[10.0; 5])).unwrap(), 0.0);
        assert_eq!(icl_efficiency(&grid(&[10.0, 20.0, 20.0, 20.0, 20.0])).unwrap(), 9.375);
        assert_eq!(icl_efficiency(&grid(&[5.0, 6.0, 7.0, 9.0, 13.0])).unwrap(), 4.0);
    }

    #[test]
    fn efficiency_errors() {
        let no_zero = ShotCurve::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(icl_efficiency(&no_zero).unwrap_err(), MetricError::MissingZeroShot);
        let single = ShotCurve::new(vec![0], vec![10.0]).unwrap();
        assert_eq!(summarize(&single).unwrap_err(), MetricError::SinglePoint);
        assert_eq!(MetricError::SinglePoint.to_string(), "single-point curve");
    }

    #[test]
    fn summary_fixtures() {
        let s = summarize(&grid(&[10.0, 20.0, 20.0, 20.0, 20.0])).unwrap();
        assert_eq!(s, CurveSummary { zero_shot: 10.0, peak: 20.0, efficiency: 9.375 });
        let down = summarize(&grid(&[50.0, 40.0, 30.0, 20.0, 10.0])).unwrap();
        assert_eq!(down.peak, 50.0);
        assert!(down.efficiency < 0.0);
    }

    #[test]
    fn stability_fixtures() {
        let clean = grid(&[40.0, 50.0, 55.0, 60.0, 62.0]);
        assert_eq!(stability_score(&clean, &clean).unwrap(), 0.0);
        let scaled = clean.map_values(|v| 0.9 * v).unwrap();
        assert!((stability_score(&clean, &scaled).unwrap() - 10.0).abs() < 1e-9);
        let other = ShotCurve::new(vec![1, 2, 4, 8], vec![1.0; 4]).unwrap();
        assert!(matches!(stability_score(&clean, &other), Err(MetricError::GridMismatch(..))));
        let zero = grid(&[0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(stability_score(&zero, &zero).unwrap_err(), MetricError::NonPositiveClean(0));
        let single = ShotCurve::new(vec![1], vec![3.0]).unwrap();
        assert!(matches!(stability_score(&single, &single), Err(MetricError::NonPositiveArea(_))));
    }

    #[test]
    fn correlation_fixtures() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [1.0, 3.0, 2.0, 4.0];
        assert!((spearman(&xs, &ys).unwrap() - 0.8).abs() < 1e-12);
        let lin: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson(&xs, &lin).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &lin).unwrap() - 1.0).abs() < 1e-12);
        let dec: Vec<f64> = xs.iter().map(|x| (-x).exp()).collect();
        assert!((spearman(&xs, &dec).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap_err(), MetricError::ConstantInput);
        assert_eq!(pearson(&[1.0, 2.0], &[1.0, 2.0]).unwrap_err(), MetricError::TooFewPoints(2));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0]).unwrap_err(), MetricError::LengthMismatch(3, 2));
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn relative_change_fixtures() {
        let base = vec![grid(&[10.0, 20.0, 30.0, 40.0, 50.0]), grid(&[1.0, 2.0, 3.0, 4.0, 5.0])];
        assert_eq!(relative_change(&base, &base).unwrap(), 0.0);
        let up: Vec<ShotCurve> = base.iter().map(|c| c.map_values(|v| 1.1 * v).unwrap()).collect();
        assert!((relative_change(&base, &up).unwrap() - 10.0).abs() < 1e-9);
        let zero = vec![grid(&[0.0, 1.0, 1.0, 1.0, 1.0])];
        assert_eq!(relative_change(&zero, &zero).unwrap_err(), MetricError::ZeroBase(0));
    }

    #[test]
    fn win_tie_lose_fixtures() {
        use Outcome::*;
        assert_eq!(win_tie_lose(&[Win, Win]).unwrap(), WinTieLose { win: 100.0, tie: 0.0, lose: 0.0 });
        assert_eq!(
            win_tie_lose(&[Win, Tie, Lose, Win]).unwrap(),
            WinTieLose { win: 50.0, tie: 25.0, lose: 25.0 }
        );
        assert_eq!(win_tie_lose(&[]).unwrap_err(), MetricError::Empty);
    }
}
