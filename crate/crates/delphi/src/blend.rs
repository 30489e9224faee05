//! Convex blending of system forecasts with market prices.
//!
//! Fits `o ~ w * forecast + (1 - w) * market` by least squares with `w`
//! constrained to `[0, 1]` (a one-parameter simplex). The constrained optimum
//! has a closed form: the unconstrained slope of the recentered regression,
//! clipped to the box. Uncertainty comes from a percentile bootstrap over
//! question triples; generalization is measured leave-one-out.

use crate::domain::{Outcome, Probability};
use crate::stats::{percentile_sorted, seeded_rng};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BlendError {
    #[error("empty input: no (forecast, market, outcome) triples")]
    Empty,
    #[error("forecast and market coincide on every question: weight unidentifiable")]
    Unidentifiable,
    #[error("leave-one-out needs at least 3 triples, got {0}")]
    TooFewForLoo(usize),
    #[error("bootstrap replicate count must be positive")]
    ZeroReplicates,
}

/// One scored question: the system forecast, the market price at the same
/// cutoff, and the realized outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendPoint {
    pub forecast: Probability,
    pub market: Probability,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplexFit {
    pub weight_forecast: f64,
    pub weight_market: f64,
    pub n: usize,
}

fn raw_weight(points: &[BlendPoint]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for pt in points {
        let dx = pt.forecast.value() - pt.market.value();
        num += dx * (pt.outcome.as_f64() - pt.market.value());
        den += dx * dx;
    }
    if den == 0.0 {
        None
    } else {
        Some((num / den).clamp(0.0, 1.0))
    }
}

/// Closed-form simplex-constrained fit of the blending weight.
pub fn fit_simplex(points: &[BlendPoint]) -> Result<SimplexFit, BlendError> {
    if points.is_empty() {
        return Err(BlendError::Empty);
    }
    let w = raw_weight(points).ok_or(BlendError::Unidentifiable)?;
    Ok(SimplexFit {
        weight_forecast: w,
        weight_market: 1.0 - w,
        n: points.len(),
    })
}

/// Mean Brier of the blend `w * forecast + (1 - w) * market` over the points.
pub fn blend_brier(points: &[BlendPoint], weight_forecast: f64) -> f64 {
    let w = weight_forecast.clamp(0.0, 1.0);
    points
        .iter()
        .map(|pt| {
            let q = w * pt.forecast.value() + (1.0 - w) * pt.market.value();
            let d = q - pt.outcome.as_f64();
            d * d
        })
        .sum::<f64>()
        / points.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LooBlend {
    pub mean_brier: f64,
    /// Folds whose training data left the weight unidentifiable; they fall
    /// back to an even 0.5/0.5 blend.
    pub fallback_folds: usize,
}

/// Leave-one-out Brier of the blend: refit the weight on n-1 questions and
/// score the held-out one.
pub fn loo_ensemble_brier(points: &[BlendPoint]) -> Result<LooBlend, BlendError> {
    if points.len() < 3 {
        return Err(BlendError::TooFewForLoo(points.len()));
    }
    let mut total = 0.0;
    let mut fallback = 0usize;
    let mut fold = Vec::with_capacity(points.len() - 1);
    for i in 0..points.len() {
        fold.clear();
        fold.extend(points.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| *p));
        let w = match raw_weight(&fold) {
            Some(w) => w,
            None => {
                fallback += 1;
                0.5
            }
        };
        let pt = points[i];
        let q = w * pt.forecast.value() + (1.0 - w) * pt.market.value();
        let d = q - pt.outcome.as_f64();
        total += d * d;
    }
    Ok(LooBlend {
        mean_brier: total / points.len() as f64,
        fallback_folds: fallback,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsCi {
    pub fit: SimplexFit,
    pub ci_forecaster: (f64, f64),
    pub ci_market: (f64, f64),
    /// Resamples abandoned after repeated unidentifiable redraws.
    pub skipped_resamples: u32,
    pub n_replicates: u32,
    pub seed: u64,
}

/// Percentile bootstrap (2.5/97.5) over question triples for the blending
/// weight. Unidentifiable resamples are redrawn up to 10 times, then skipped
/// and counted.
pub fn bootstrap_weights_ci(
    points: &[BlendPoint],
    n_replicates: u32,
    seed: u64,
) -> Result<WeightsCi, BlendError> {
    if n_replicates == 0 {
        return Err(BlendError::ZeroReplicates);
    }
    let fit = fit_simplex(points)?;
    let n = points.len();
    let mut rng = seeded_rng(seed);
    let mut weights = Vec::with_capacity(n_replicates as usize);
    let mut skipped = 0u32;
    let mut resample = Vec::with_capacity(n);
    for _ in 0..n_replicates {
        let mut found = None;
        for _ in 0..10 {
            resample.clear();
            for _ in 0..n {
                resample.push(points[rng.gen_range(0..n)]);
            }
            if let Some(w) = raw_weight(&resample) {
                found = Some(w);
                break;
            }
        }
        match found {
            Some(w) => weights.push(w),
            None => skipped += 1,
        }
    }
    if weights.is_empty() {
        return Err(BlendError::Unidentifiable);
    }
    weights.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = percentile_sorted(&weights, 0.025);
    let hi = percentile_sorted(&weights, 0.975);
    Ok(WeightsCi {
        fit,
        ci_forecaster: (lo, hi),
        ci_market: (1.0 - hi, 1.0 - lo),
        skipped_resamples: skipped,
        n_replicates,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(v: f64) -> Probability {
        Probability::new(v).unwrap()
    }

    fn pt(f: f64, m: f64, o: u8) -> BlendPoint {
        BlendPoint {
            forecast: p(f),
            market: p(m),
            outcome: if o == 1 { Outcome::Yes } else { Outcome::No },
        }
    }

    #[test]
    fn perfect_forecaster_gets_full_weight() {
        let points = vec![pt(1.0, 0.5, 1), pt(0.0, 0.5, 0), pt(1.0, 0.3, 1)];
        let fit = fit_simplex(&points).unwrap();
        assert_eq!(fit.weight_forecast, 1.0);
        assert_eq!(fit.weight_market, 0.0);
    }

    #[test]
    fn two_point_closed_form() {
        // num = (1.0-0.6)(1-0.6) + (0.2-0.0)(0-0.0) = 0.16
        // den = 0.4^2 + 0.2^2 = 0.20, so w = 0.8.
        let points = vec![pt(1.0, 0.6, 1), pt(0.2, 0.0, 0)];
        let fit = fit_simplex(&points).unwrap();
        assert!((fit.weight_forecast - 0.8).abs() < 1e-12);
        assert!((fit.weight_market - 0.2).abs() < 1e-12);
    }

    #[test]
    fn identical_covariates_are_unidentifiable() {
        let points = vec![pt(0.4, 0.4, 1), pt(0.7, 0.7, 0)];
        assert!(matches!(fit_simplex(&points), Err(BlendError::Unidentifiable)));
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(fit_simplex(&[]), Err(BlendError::Empty)));
    }

    #[test]
    fn weight_is_clamped_to_the_simplex() {
        // Anti-correlated forecast pushes the raw slope negative; the fit
        // clips at 0 (all weight on the market).
        let points = vec![pt(0.9, 0.1, 0), pt(0.1, 0.9, 1)];
        let fit = fit_simplex(&points).unwrap();
        assert_eq!(fit.weight_forecast, 0.0);
    }

    #[test]
    fn in_sample_blend_never_loses_to_both_endpoints() {
        let points = vec![
            pt(0.8, 0.6, 1),
            pt(0.3, 0.5, 0),
            pt(0.7, 0.9, 1),
            pt(0.2, 0.1, 0),
            pt(0.6, 0.4, 1),
        ];
        let fit = fit_simplex(&points).unwrap();
        let blended = blend_brier(&points, fit.weight_forecast);
        let forecast_only = blend_brier(&points, 1.0);
        let market_only = blend_brier(&points, 0.0);
        assert!(blended <= forecast_only + 1e-12);
        assert!(blended <= market_only + 1e-12);
    }

    #[test]
    fn loo_equal_covariates_fall_back_to_even_blend() {
        let points = vec![pt(0.4, 0.4, 0), pt(0.6, 0.6, 1), pt(0.5, 0.5, 1)];
        let loo = loo_ensemble_brier(&points).unwrap();
        assert_eq!(loo.fallback_folds, 3);
        // With x_f == x_m the blend weight is irrelevant: score is the
        // covariate Brier itself.
        let direct = blend_brier(&points, 1.0);
        assert!((loo.mean_brier - direct).abs() < 1e-12);
    }

    #[test]
    fn loo_needs_three_points() {
        assert!(matches!(
            loo_ensemble_brier(&[pt(0.5, 0.4, 1), pt(0.2, 0.3, 0)]),
            Err(BlendError::TooFewForLoo(2))
        ));
    }

    fn synthetic_blend(seed: u64, n: usize) -> Vec<BlendPoint> {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| {
                let f: f64 = rng.gen_range(0.0..1.0);
                let m: f64 = rng.gen_range(0.0..1.0);
                let noise: f64 = rng.gen_range(-0.05..0.05);
                let o = if 0.5 * f + 0.5 * m + noise >= 0.5 { 1 } else { 0 };
                pt(f, m, o)
            })
            .collect()
    }

    #[test]
    fn loo_blend_beats_both_covariates_on_mixed_signal() {
        let points = synthetic_blend(31, 500);
        let loo = loo_ensemble_brier(&points).unwrap();
        let forecast_only = blend_brier(&points, 1.0);
        let market_only = blend_brier(&points, 0.0);
        assert!(
            loo.mean_brier <= forecast_only.min(market_only),
            "loo {} vs endpoints {} / {}",
            loo.mean_brier,
            forecast_only,
            market_only
        );
        assert_eq!(loo.fallback_folds, 0);
    }

    #[test]
    fn degenerate_bootstrap_has_zero_width() {
        // Forecast equals the outcome everywhere; every resample fits w = 1.
        let points = vec![
            pt(1.0, 0.5, 1),
            pt(0.0, 0.5, 0),
            pt(1.0, 0.5, 1),
            pt(0.0, 0.5, 0),
        ];
        let ci = bootstrap_weights_ci(&points, 500, 21).unwrap();
        assert_eq!(ci.ci_forecaster, (1.0, 1.0));
        assert_eq!(ci.ci_market, (0.0, 0.0));
        assert_eq!(ci.skipped_resamples, 0);
    }

    #[test]
    fn bootstrap_is_deterministic_per_seed() {
        let points = synthetic_blend(5, 60);
        let a = bootstrap_weights_ci(&points, 300, 8).unwrap();
        let b = bootstrap_weights_ci(&points, 300, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bootstrap_interval_brackets_the_point_fit() {
        let points = synthetic_blend(11, 200);
        let ci = bootstrap_weights_ci(&points, 1000, 4).unwrap();
        assert!(ci.ci_forecaster.0 <= ci.fit.weight_forecast + 1e-9);
        assert!(ci.ci_forecaster.1 >= ci.fit.weight_forecast - 1e-9);
        assert!(ci.ci_forecaster.0 >= 0.0 && ci.ci_forecaster.1 <= 1.0);
    }

    // One-off check of interval coverage; heavy, run explicitly:
    // cargo test -p delphi coverage_nested_simulation -- --ignored
    #[test]
    #[ignore]
    fn coverage_nested_simulation_run_once() {
        use rand::Rng;
        let w_true = 0.3;
        let mut covered = 0;
        for rep in 0..100u64 {
            let mut rng = seeded_rng(1000 + rep);
            let points: Vec<BlendPoint> = (0..1000)
                .map(|_| {
                    let f: f64 = rng.gen_range(0.0..1.0);
                    let m: f64 = rng.gen_range(0.0..1.0);
                    let q = (w_true * f + (1.0 - w_true) * m).clamp(0.0, 1.0);
                    let o = if rng.gen_bool(q) { 1 } else { 0 };
                    pt(f, m, o)
                })
                .collect();
            let ci = bootstrap_weights_ci(&points, 500, 2000 + rep).unwrap();
            if ci.ci_forecaster.0 <= w_true && w_true <= ci.ci_forecaster.1 {
                covered += 1;
            }
        }
        assert!(covered >= 90, "coverage {covered}/100");
    }

    proptest! {
        #[test]
        fn swapping_covariates_complements_the_weight(
            raw in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0u8..=1), 2..30),
        ) {
            let points: Vec<BlendPoint> = raw.iter().map(|(f, m, o)| pt(*f, *m, *o)).collect();
            prop_assume!(points.iter().any(|p| p.forecast.value() != p.market.value()));
            let swapped: Vec<BlendPoint> = points
                .iter()
                .map(|p| BlendPoint { forecast: p.market, market: p.forecast, outcome: p.outcome })
                .collect();
            let w = fit_simplex(&points).unwrap().weight_forecast;
            let w_swapped = fit_simplex(&swapped).unwrap().weight_forecast;
            // The swapped fit optimizes the same blend parameterized from the
            // other end; with clipping both land at complementary points.
            prop_assert!(
                (w_swapped - (1.0 - w)).abs() < 1e-9,
                "w {} swapped {}", w, w_swapped
            );
        }

        #[test]
        fn fitted_weight_always_lies_in_the_simplex(
            raw in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0u8..=1), 1..40),
        ) {
            let points: Vec<BlendPoint> = raw.iter().map(|(f, m, o)| pt(*f, *m, *o)).collect();
            if let Ok(fit) = fit_simplex(&points) {
                prop_assert!((0.0..=1.0).contains(&fit.weight_forecast));
                prop_assert!((fit.weight_forecast + fit.weight_market - 1.0).abs() < 1e-12);
            }
        }
    }
}
