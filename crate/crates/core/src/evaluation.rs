//! Posterior summaries, equal-tailed intervals, coverage, RMSE, and 1-D
//! 2-Wasserstein distances between posterior samples.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};

/// Quantile grids never exceed this many points.
pub const MAX_QUANTILE_GRID: usize = 1000;

/// Draws required before an equal-tailed interval is reported.
pub const MIN_INTERVAL_DRAWS: usize = 100;

fn sorted_finite(values: &[f64], what: &str) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Linear interpolation between order statistics (`h = (m − 1) q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let m = sorted.len();
    let h = (m - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(m - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 2-Wasserstein distance between two empirical distributions on the line,
/// by quantile coupling on the midpoint grid `(k − ½)/K`, `K = min(Tₐ, T_b, 1000)`.
pub fn wasserstein2(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::TooFewDraws("wasserstein distance needs nonempty samples".into()));
    }
    let sa = sorted_finite(a, "first sample")?;
    let sb = sorted_finite(b, "second sample")?;
    Ok(wasserstein2_sorted(&sa, &sb))
}

pub(crate) fn wasserstein2_sorted(sa: &[f64], sb: &[f64]) -> f64 {
    let k = sa.len().min(sb.len()).min(MAX_QUANTILE_GRID);
    let sum: f64 = (1..=k)
        .map(|i| {
            let q = (i as f64 - 0.5) / k as f64;
            (quantile_sorted(sa, q) - quantile_sorted(sb, q)).powi(2)
        })
        .sum();
    (sum / k as f64).sqrt()
}

/// Central interval holding `level` of the draws, from empirical quantiles.
pub fn equal_tailed_interval(draws: &[f64], level: f64) -> Result<(f64, f64)> {
    if draws.len() < MIN_INTERVAL_DRAWS {
        return Err(Error::TooFewDraws(format!(
            "an interval needs at least {MIN_INTERVAL_DRAWS} draws, got {}",
            draws.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("interval level must lie in (0, 1), got {level}")));
    }
    let s = sorted_finite(draws, "interval draws")?;
    let tail = 0.5 * (1.0 - level);
    Ok((quantile_sorted(&s, tail), quantile_sorted(&s, 1.0 - tail)))
}

/// Posterior summary of one scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
    pub contains_truth: Option<bool>,
}

/// Mean, standard deviation and equal-tailed 95% interval of `draws`.
pub fn summarize(draws: &[f64], truth: Option<f64>) -> Result<ParamSummary> {
    let (lower, upper) = equal_tailed_interval(draws, 0.95)?;
    let m = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / m;
    let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    Ok(ParamSummary {
        mean,
        sd,
        lower,
        upper,
        width: upper - lower,
        contains_truth: truth.map(|t| lower <= t && t <= upper),
    })
}

/// Coverage rate and mean width across replications.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub coverage: f64,
    pub mean_width: f64,
    pub replications: usize,
}

pub fn coverage_and_width(summaries: &[ParamSummary]) -> Result<Coverage> {
    if summaries.is_empty() {
        return Err(Error::TooFewDraws("no replication summaries".into()));
    }
    let mut hits = 0;
    for s in summaries {
        match s.contains_truth {
            Some(true) => hits += 1,
            Some(false) => {}
            None => return Err(Error::Config("coverage requires the true parameter value".into())),
        }
    }
    let k = summaries.len() as f64;
    Ok(Coverage {
        coverage: hits as f64 / k,
        mean_width: summaries.iter().map(|s| s.width).sum::<f64>() / k,
        replications: summaries.len(),
    })
}

pub fn rmse(predicted: &[f64], observed: &[f64]) -> Result<f64> {
    if predicted.len() != observed.len() {
        return Err(dim_mismatch("rmse inputs", observed.len(), predicted.len()));
    }
    if predicted.is_empty() {
        return Err(Error::TooFewDraws("rmse of empty vectors".into()));
    }
    let ss: f64 = predicted.iter().zip(observed).map(|(p, o)| (p - o).powi(2)).sum();
    Ok((ss / predicted.len() as f64).sqrt())
}

/// Out-of-sample prediction quality of one fitted chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    /// Fraction of test outcomes inside their 95% prediction interval.
    pub coverage: f64,
    pub mean_width: f64,
    /// RMSE of predictive means against the test outcomes.
    pub rmse: f64,
}

/// Summaries of `T × n_test` predictive draws against observed test outcomes.
pub fn prediction_summary(predictive: &DMatrix<f64>, observed: &DVector<f64>) -> Result<PredictionSummary> {
    let n = observed.len();
    if predictive.ncols() != n {
        return Err(dim_mismatch("predictive draw columns", n, predictive.ncols()));
    }
    let mut hits = 0;
    let mut width = 0.0;
    let mut means = Vec::with_capacity(n);
    for (i, col) in predictive.column_iter().enumerate() {
        let (lo, hi) = equal_tailed_interval(col.as_slice(), 0.95)?;
        if lo <= observed[i] && observed[i] <= hi {
            hits += 1;
        }
        width += hi - lo;
        means.push(col.mean());
    }
    Ok(PredictionSummary {
        coverage: hits as f64 / n as f64,
        mean_width: width / n as f64,
        rmse: rmse(&means, observed.as_slice())?,
    })
}

/// Mean and median of a nonempty set of values.
pub fn mean_and_median(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    Some((mean, quantile_sorted(&s, 0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededStream;

    #[test]
    fn wasserstein_examples() {
        let a: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(wasserstein2(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x + 1.5).collect();
        assert!((wasserstein2(&a, &b).unwrap() - 1.5).abs() < 1e-12);
        assert!(wasserstein2(&[], &a).is_err());
    }

    #[test]
    fn wasserstein_between_gaussians() {
        let mut rng = SeededStream::new(12, 0);
        let a: Vec<f64> = (0..100_000).map(|_| rng.standard_normal()).collect();
        let b: Vec<f64> = (0..100_000).map(|_| 1.0 + 2.0 * rng.standard_normal()).collect();
        let w = wasserstein2(&a, &b).unwrap();
        assert!((w - 2f64.sqrt()).abs() < 0.05, "{w}");
    }

    #[test]
    fn interval_examples() {
        let u: Vec<f64> = (1..=1000).map(|i| i as f64 / 1000.0).collect();
        let (lo, hi) = equal_tailed_interval(&u, 0.95).unwrap();
        assert!((lo - 0.025).abs() <= 1e-3 && (hi - 0.975).abs() <= 1e-3);
        assert_eq!(equal_tailed_interval(&[3.0; 200], 0.95).unwrap(), (3.0, 3.0));
        assert!(equal_tailed_interval(&[1.0; 99], 0.95).is_err());

        let mut rng = SeededStream::new(13, 0);
        let z: Vec<f64> = (0..100_000).map(|_| rng.standard_normal()).collect();
        let (lo, hi) = equal_tailed_interval(&z, 0.95).unwrap();
        assert!((lo + 1.96).abs() < 0.02 && (hi - 1.96).abs() < 0.02, "{lo} {hi}");
    }

    #[test]
    fn coverage_examples() {
        let hit = ParamSummary { mean: 4.0, sd: 0.1, lower: 3.8, upper: 4.2, width: 0.4, contains_truth: Some(true) };
        let miss = ParamSummary { mean: 2.0, sd: 0.1, lower: 1.5, upper: 2.5, width: 1.0, contains_truth: Some(false) };
        let c = coverage_and_width(&[hit; 5]).unwrap();
        assert_eq!(c.coverage, 1.0);
        let c = coverage_and_width(&[miss; 4]).unwrap();
        assert_eq!(c.coverage, 0.0);
        assert_eq!(c.mean_width, 1.0);
        let unknown = ParamSummary { contains_truth: None, ..hit };
        assert!(coverage_and_width(&[hit, unknown]).is_err());
    }

    #[test]
    fn summary_against_truth() {
        let draws: Vec<f64> = (0..1000).map(|i| 2.0 + (i as f64 / 999.0 - 0.5)).collect();
        let s = summarize(&draws, Some(4.0)).unwrap();
        assert_eq!(s.contains_truth, Some(false));
        assert!((s.mean - 2.0).abs() < 1e-12);
        assert!(s.width < 2.0);
        assert_eq!(summarize(&draws, Some(2.0)).unwrap().contains_truth, Some(true));
    }

    #[test]
    fn rmse_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x - 0.7).collect();
        assert!((rmse(&b, &a).unwrap() - 0.7).abs() < 1e-12);
        assert!(matches!(rmse(&a, &b[..2]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn prediction_summary_counts() {
        // Two test units with identical predictive draws 1..200.
        let col: Vec<f64> = (1..=200).map(|i| i as f64).collect();
        let mut data = col.clone();
        data.extend(&col);
        let pred = DMatrix::from_column_slice(200, 2, &data);
        let obs = DVector::from_vec(vec![100.5, 1000.0]);
        let s = prediction_summary(&pred, &obs).unwrap();
        assert_eq!(s.coverage, 0.5);
        assert!((s.rmse - ((1000.0f64 - 100.5).powi(2) / 2.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn mean_and_median_of_skewed_values() {
        assert_eq!(mean_and_median(&[1.0, 2.0, 9.0]), Some((4.0, 2.0)));
        assert_eq!(mean_and_median(&[]), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sample() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-50.0f64..50.0, 1..300)
        }

        proptest! {
            #[test]
            fn wasserstein_is_a_metric(a in sample(), b in sample(), c in sample()) {
                let ab = wasserstein2(&a, &b).unwrap();
                let ba = wasserstein2(&b, &a).unwrap();
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert!(ab >= 0.0);
                prop_assert_eq!(wasserstein2(&a, &a).unwrap(), 0.0);
                // The triangle inequality holds on a common grid size.
                let k = a.len().min(b.len()).min(c.len());
                let (a, b, c) = (&a[..k], &b[..k], &c[..k]);
                let ab = wasserstein2(a, b).unwrap();
                let bc = wasserstein2(b, c).unwrap();
                let ac = wasserstein2(a, c).unwrap();
                prop_assert!(ac <= ab + bc + 1e-9);
            }

            #[test]
            fn interval_ignores_draw_order(mut v in prop::collection::vec(-10.0f64..10.0, 100..400), seed in 0u64..1000) {
                let before = equal_tailed_interval(&v, 0.95).unwrap();
                let mut rng = SeededStream::new(seed, 0);
                for i in (1..v.len()).rev() {
                    let j = rng.index(i + 1);
                    v.swap(i, j);
                }
                prop_assert_eq!(before, equal_tailed_interval(&v, 0.95).unwrap());
                prop_assert!(before.0 <= before.1);
            }
        }
    }
}
