//! Panel aggregation, supervisor gating, and synthesis diagnostics.
//!
//! A panel of independent forecasts is collapsed with a simple statistic
//! (mean, trimmed mean, or median). A supervisor may propose a revision; only
//! high-confidence revisions displace the aggregate. Best-of-k supervisors are
//! constrained to the candidate set they were shown, with out-of-set choices
//! snapped to the nearest candidate and flagged.

use crate::domain::{Outcome, Probability};
use crate::scoring::brier;
use crate::stats::{mean, percentile_sorted, seeded_rng};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("empty forecast list")]
    Empty,
    #[error("trimmed mean needs at least 3 forecasts, got {0}")]
    TooFewForTrim(usize),
    #[error("empty candidate set")]
    NoCandidates,
    #[error("synthesis metrics need at least 3 individual forecasts per question, got {0}")]
    TooFewIndividuals(usize),
    #[error("subsample size {size} exceeds the smallest pool ({pool})")]
    SizeExceedsPool { size: usize, pool: usize },
    #[error("subsample size must be positive")]
    ZeroSize,
    #[error("bootstrap replicate count must be positive")]
    ZeroReplicates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    #[default]
    Mean,
    TrimmedMean,
    Median,
}

/// Collapse a panel of forecasts into one probability.
///
/// The trimmed mean drops exactly one minimum and one maximum regardless of
/// panel size; the median of an even panel is the midpoint of the two central
/// values.
pub fn aggregate(
    forecasts: &[Probability],
    method: AggregationMethod,
) -> Result<Probability, AggregationError> {
    if forecasts.is_empty() {
        return Err(AggregationError::Empty);
    }
    let mut values: Vec<f64> = forecasts.iter().map(|p| p.value()).collect();
    let out = match method {
        AggregationMethod::Mean => mean(&values),
        AggregationMethod::TrimmedMean => {
            if values.len() < 3 {
                return Err(AggregationError::TooFewForTrim(values.len()));
            }
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            mean(&values[1..values.len() - 1])
        }
        AggregationMethod::Median => {
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = values.len();
            if n % 2 == 1 {
                values[n / 2]
            } else {
                (values[n / 2 - 1] + values[n / 2]) / 2.0
            }
        }
    };
    Ok(Probability::new(out).expect("aggregate of probabilities stays in range"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    High,
    Medium,
    Low,
}

/// What a supervisor produced after reviewing the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisorOutput {
    pub disagreement_summary: String,
    pub clarifying_queries: Vec<String>,
    pub revised_probability: Probability,
    pub confidence: Confidence,
}

/// Confidence gate: only a high-confidence revision displaces the aggregate.
pub fn merge_supervisor(aggregate: Probability, supervisor: &SupervisorOutput) -> Probability {
    match supervisor.confidence {
        Confidence::High => supervisor.revised_probability,
        Confidence::Medium | Confidence::Low => aggregate,
    }
}

/// Outcome of constraining a best-of-k choice to its candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnforcedChoice {
    pub value: Probability,
    /// True when the raw choice was not a member and had to be snapped.
    pub violation: bool,
}

/// Snap a best-of-k supervisor's choice back into the candidate set. Choices
/// within `tolerance` of a candidate count as that candidate; anything else is
/// a violation snapped to the nearest candidate, ties resolving to the lower
/// value.
pub fn best_of_k_enforce(
    candidates: &[Probability],
    chosen: Probability,
    tolerance: f64,
) -> Result<EnforcedChoice, AggregationError> {
    if candidates.is_empty() {
        return Err(AggregationError::NoCandidates);
    }
    let mut best = candidates[0];
    let mut best_dist = (chosen.value() - best.value()).abs();
    for c in &candidates[1..] {
        let d = (chosen.value() - c.value()).abs();
        if d < best_dist || (d == best_dist && c.value() < best.value()) {
            best = *c;
            best_dist = d;
        }
    }
    Ok(EnforcedChoice {
        value: best,
        violation: best_dist > tolerance,
    })
}

/// Default tolerance for treating a choice as an exact candidate match.
pub const BEST_OF_K_TOLERANCE: f64 = 1e-6;

/// How the "top" cut of the synthesis metrics is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisVariant {
    /// Aggregate at or below the 3rd-smallest individual Brier counts as top.
    #[default]
    RankThreshold,
    /// Stricter: aggregate must be at or below the single best individual.
    BeatsAll,
}

/// Per-question inputs for synthesis diagnostics: the aggregate's Brier and
/// every individual panel member's Brier on the same question.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionSynthesis {
    pub aggregate_brier: f64,
    pub individual_briers: Vec<f64>,
}

/// How often the synthesized forecast lands among the best or worst of its
/// own panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisMetrics {
    pub n_questions: usize,
    pub mean_brier: f64,
    /// Fraction of questions where the aggregate scored at or below the
    /// 3rd-smallest individual Brier (or the best, under `BeatsAll`).
    pub top_at_3: f64,
    /// Fraction where the aggregate scored at or above the 3rd-largest
    /// individual Brier.
    pub worst_at_3: f64,
    /// Fraction where the aggregate strictly beat every individual.
    pub outperform_rate: f64,
}

pub fn synthesis_metrics(
    questions: &[QuestionSynthesis],
    variant: SynthesisVariant,
) -> Result<SynthesisMetrics, AggregationError> {
    if questions.is_empty() {
        return Err(AggregationError::Empty);
    }
    let mut top = 0usize;
    let mut worst = 0usize;
    let mut outperform = 0usize;
    for q in questions {
        if q.individual_briers.len() < 3 {
            return Err(AggregationError::TooFewIndividuals(q.individual_briers.len()));
        }
        let mut sorted = q.individual_briers.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let top_threshold = match variant {
            SynthesisVariant::RankThreshold => sorted[2],
            SynthesisVariant::BeatsAll => sorted[0],
        };
        let worst_threshold = sorted[sorted.len() - 3];
        if q.aggregate_brier <= top_threshold {
            top += 1;
        }
        if q.aggregate_brier >= worst_threshold {
            worst += 1;
        }
        if q.aggregate_brier < sorted[0] {
            outperform += 1;
        }
    }
    let n = questions.len() as f64;
    Ok(SynthesisMetrics {
        n_questions: questions.len(),
        mean_brier: mean(&questions.iter().map(|q| q.aggregate_brier).collect::<Vec<_>>()),
        top_at_3: top as f64 / n,
        worst_at_3: worst as f64 / n,
        outperform_rate: outperform as f64 / n,
    })
}

/// One question's pool of candidate forecasts for ensemble-size analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionPool {
    pub outcome: Outcome,
    pub forecasts: Vec<Probability>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePoint {
    pub size: usize,
    pub mean_brier: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Bootstrap the accuracy of mean-aggregated sub-panels of each size.
///
/// For every size and replicate, each question contributes the Brier score of
/// the mean over a without-replacement subsample of its pool; the replicate's
/// value is the mean over questions. Intervals are 2.5/97.5 percentiles over
/// replicates. A size equal to the pool size always draws the whole pool, so
/// its interval has zero width.
pub fn ensemble_size_curve(
    pools: &[QuestionPool],
    sizes: &[usize],
    n_replicates: u32,
    seed: u64,
) -> Result<Vec<EnsemblePoint>, AggregationError> {
    if pools.is_empty() || pools.iter().any(|p| p.forecasts.is_empty()) {
        return Err(AggregationError::Empty);
    }
    if n_replicates == 0 {
        return Err(AggregationError::ZeroReplicates);
    }
    let min_pool = pools.iter().map(|p| p.forecasts.len()).min().unwrap();
    for size in sizes {
        if *size == 0 {
            return Err(AggregationError::ZeroSize);
        }
        if *size > min_pool {
            return Err(AggregationError::SizeExceedsPool {
                size: *size,
                pool: min_pool,
            });
        }
    }

    let mut rng = seeded_rng(seed);
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut replicate_means = Vec::with_capacity(n_replicates as usize);
        for _ in 0..n_replicates {
            let mut total = 0.0;
            for pool in pools {
                let picked = sample_without_replacement(&mut rng, pool.forecasts.len(), size);
                let sub_mean = picked
                    .iter()
                    .map(|i| pool.forecasts[*i].value())
                    .sum::<f64>()
                    / size as f64;
                total += brier(
                    Probability::new(sub_mean).expect("mean of probabilities in range"),
                    pool.outcome,
                );
            }
            replicate_means.push(total / pools.len() as f64);
        }
        let mut sorted = replicate_means.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        points.push(EnsemblePoint {
            size,
            mean_brier: mean(&replicate_means),
            ci_lo: percentile_sorted(&sorted, 0.025),
            ci_hi: percentile_sorted(&sorted, 0.975),
        });
    }
    Ok(points)
}

fn sample_without_replacement(
    rng: &mut impl Rng,
    pool_size: usize,
    take: usize,
) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..pool_size).collect();
    for i in 0..take {
        let j = rng.gen_range(i..pool_size);
        indices.swap(i, j);
    }
    indices.truncate(take);
    indices
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(v: f64) -> Probability {
        Probability::new(v).unwrap()
    }

    fn ps(vs: &[f64]) -> Vec<Probability> {
        vs.iter().map(|v| p(*v)).collect()
    }

    #[test]
    fn trimmed_mean_drops_one_extreme_each_side() {
        let got = aggregate(&ps(&[0.1, 0.2, 0.3, 0.9]), AggregationMethod::TrimmedMean)
            .unwrap()
            .value();
        assert!((got - 0.25).abs() < 1e-12);
    }

    #[test]
    fn singleton_mean_is_identity() {
        let got = aggregate(&ps(&[0.42]), AggregationMethod::Mean).unwrap().value();
        assert_eq!(got, 0.42);
    }

    #[test]
    fn median_odd_panel() {
        let got = aggregate(&ps(&[0.9, 0.1, 0.4]), AggregationMethod::Median)
            .unwrap()
            .value();
        assert_eq!(got, 0.4);
    }

    #[test]
    fn median_even_panel_takes_midpoint() {
        let got = aggregate(&ps(&[0.2, 0.6]), AggregationMethod::Median)
            .unwrap()
            .value();
        assert!((got - 0.4).abs() < 1e-12);
    }

    #[test]
    fn trimmed_mean_needs_three() {
        assert!(matches!(
            aggregate(&ps(&[0.2, 0.6]), AggregationMethod::TrimmedMean),
            Err(AggregationError::TooFewForTrim(2))
        ));
    }

    #[test]
    fn empty_panel_rejected() {
        assert!(matches!(
            aggregate(&[], AggregationMethod::Mean),
            Err(AggregationError::Empty)
        ));
    }

    fn sup(conf: Confidence, revised: f64) -> SupervisorOutput {
        SupervisorOutput {
            disagreement_summary: "panel split on base rates".into(),
            clarifying_queries: vec![],
            revised_probability: p(revised),
            confidence: conf,
        }
    }

    #[test]
    fn only_high_confidence_displaces_the_aggregate() {
        let agg = p(0.55);
        assert_eq!(merge_supervisor(agg, &sup(Confidence::High, 0.3)).value(), 0.3);
        assert_eq!(merge_supervisor(agg, &sup(Confidence::Medium, 0.3)).value(), 0.55);
        assert_eq!(merge_supervisor(agg, &sup(Confidence::Low, 0.3)).value(), 0.55);
    }

    #[test]
    fn exact_candidate_passes_without_violation() {
        let c = best_of_k_enforce(&ps(&[0.2, 0.7]), p(0.7), BEST_OF_K_TOLERANCE).unwrap();
        assert_eq!(c.value.value(), 0.7);
        assert!(!c.violation);
    }

    #[test]
    fn off_menu_choice_snaps_to_nearest() {
        let c = best_of_k_enforce(&ps(&[0.2, 0.7]), p(0.5), BEST_OF_K_TOLERANCE).unwrap();
        assert_eq!(c.value.value(), 0.7);
        assert!(c.violation);
    }

    #[test]
    fn equidistant_choice_snaps_to_lower_candidate() {
        let c = best_of_k_enforce(&ps(&[0.4, 0.6]), p(0.5), BEST_OF_K_TOLERANCE).unwrap();
        assert_eq!(c.value.value(), 0.4);
        assert!(c.violation);
    }

    #[test]
    fn empty_candidates_rejected() {
        assert!(matches!(
            best_of_k_enforce(&[], p(0.5), BEST_OF_K_TOLERANCE),
            Err(AggregationError::NoCandidates)
        ));
    }

    #[test]
    fn synthesis_counts_rank_thresholds() {
        // Individuals [0.01, 0.04, 0.09, 0.16], aggregate 0.04: within the top
        // three (0.04 <= 0.09) but not an outright outperform (0.01 is better).
        let q = QuestionSynthesis {
            aggregate_brier: 0.04,
            individual_briers: vec![0.01, 0.04, 0.09, 0.16],
        };
        let m = synthesis_metrics(&[q], SynthesisVariant::RankThreshold).unwrap();
        assert_eq!(m.top_at_3, 1.0);
        assert_eq!(m.outperform_rate, 0.0);
    }

    #[test]
    fn synthesis_dominant_aggregate_counts_everywhere_good() {
        let q = QuestionSynthesis {
            aggregate_brier: 0.001,
            individual_briers: vec![0.01, 0.04, 0.09, 0.16, 0.2],
        };
        let m = synthesis_metrics(&[q.clone()], SynthesisVariant::RankThreshold).unwrap();
        assert_eq!(m.top_at_3, 1.0);
        assert_eq!(m.outperform_rate, 1.0);
        assert_eq!(m.worst_at_3, 0.0);
        let strict = synthesis_metrics(&[q], SynthesisVariant::BeatsAll).unwrap();
        assert_eq!(strict.top_at_3, 1.0);
    }

    #[test]
    fn synthesis_worst_boundary_is_inclusive() {
        let q = QuestionSynthesis {
            aggregate_brier: 0.09,
            individual_briers: vec![0.01, 0.04, 0.09, 0.16, 0.2],
        };
        let m = synthesis_metrics(&[q], SynthesisVariant::RankThreshold).unwrap();
        assert_eq!(m.worst_at_3, 1.0);
    }

    #[test]
    fn synthesis_needs_three_individuals() {
        let q = QuestionSynthesis {
            aggregate_brier: 0.1,
            individual_briers: vec![0.1, 0.2],
        };
        assert!(matches!(
            synthesis_metrics(&[q], SynthesisVariant::RankThreshold),
            Err(AggregationError::TooFewIndividuals(2))
        ));
    }

    #[test]
    fn full_pool_size_gives_zero_width_interval() {
        let pools = vec![
            QuestionPool {
                outcome: Outcome::Yes,
                forecasts: ps(&[0.9, 0.7, 0.8]),
            },
            QuestionPool {
                outcome: Outcome::No,
                forecasts: ps(&[0.2, 0.1, 0.3]),
            },
        ];
        let pts = ensemble_size_curve(&pools, &[3], 50, 13).unwrap();
        assert_eq!(pts[0].ci_lo, pts[0].ci_hi);
        assert_eq!(pts[0].ci_lo, pts[0].mean_brier);
    }

    #[test]
    fn curve_rejects_oversized_subsamples() {
        let pools = vec![QuestionPool {
            outcome: Outcome::Yes,
            forecasts: ps(&[0.9, 0.7]),
        }];
        assert!(matches!(
            ensemble_size_curve(&pools, &[3], 10, 0),
            Err(AggregationError::SizeExceedsPool { size: 3, pool: 2 })
        ));
        assert!(matches!(
            ensemble_size_curve(&pools, &[0], 10, 0),
            Err(AggregationError::ZeroSize)
        ));
    }

    fn noisy_pools(seed: u64) -> Vec<QuestionPool> {
        // Pool forecasts cluster at 0.7 for yes-questions and 0.0 for
        // no-questions, with wide noise; averaging more of them helps.
        use rand::Rng;
        let mut rng = crate::stats::seeded_rng(seed);
        (0..60)
            .map(|i| {
                let o = if i % 2 == 0 { Outcome::Yes } else { Outcome::No };
                let forecasts = (0..50)
                    .map(|_| {
                        let noise: f64 = rng.gen_range(-0.25..0.25);
                        p((0.7 * o.as_f64() + noise).clamp(0.0, 1.0))
                    })
                    .collect();
                QuestionPool { outcome: o, forecasts }
            })
            .collect()
    }

    #[test]
    fn bigger_panels_score_better_on_noisy_pools() {
        for seed in [1u64, 2, 3, 4, 5] {
            let pools = noisy_pools(seed);
            let pts = ensemble_size_curve(&pools, &[1, 5], 80, seed).unwrap();
            assert!(
                pts[1].mean_brier <= pts[0].mean_brier,
                "seed {seed}: size5 {} vs size1 {}",
                pts[1].mean_brier,
                pts[0].mean_brier
            );
        }
    }

    #[test]
    fn returns_drop_sharply_then_flatten() {
        let pools = noisy_pools(42);
        let pts = ensemble_size_curve(&pools, &[1, 5, 15], 80, 42).unwrap();
        let drop_early = pts[0].mean_brier - pts[1].mean_brier;
        let drop_late = pts[1].mean_brier - pts[2].mean_brier;
        assert!(drop_early > 0.0);
        assert!(drop_late >= -1e-4);
        assert!(drop_early > drop_late, "early {drop_early} late {drop_late}");
    }

    #[test]
    fn curve_is_deterministic_per_seed() {
        let pools = noisy_pools(9);
        let a = ensemble_size_curve(&pools, &[1, 5], 40, 77).unwrap();
        let b = ensemble_size_curve(&pools, &[1, 5], 40, 77).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn aggregation_is_permutation_invariant(
            values in prop::collection::vec(0.0f64..=1.0, 3..12),
            rotate in 0usize..12,
        ) {
            let panel = ps(&values);
            let mut rotated = panel.clone();
            rotated.rotate_left(rotate % panel.len());
            for method in [
                AggregationMethod::Mean,
                AggregationMethod::TrimmedMean,
                AggregationMethod::Median,
            ] {
                let a = aggregate(&panel, method).unwrap().value();
                let b = aggregate(&rotated, method).unwrap().value();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn aggregate_stays_within_the_panel_hull(
            values in prop::collection::vec(0.0f64..=1.0, 3..12),
        ) {
            let panel = ps(&values);
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for method in [
                AggregationMethod::Mean,
                AggregationMethod::TrimmedMean,
                AggregationMethod::Median,
            ] {
                let a = aggregate(&panel, method).unwrap().value();
                prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
            }
        }

        #[test]
        fn enforced_choice_is_always_a_candidate(
            cands in prop::collection::vec(0.0f64..=1.0, 1..10),
            chosen in 0.0f64..=1.0,
        ) {
            let candidates = ps(&cands);
            let c = best_of_k_enforce(&candidates, p(chosen), BEST_OF_K_TOLERANCE).unwrap();
            prop_assert!(candidates.iter().any(|x| x.value() == c.value.value()));
        }

        #[test]
        fn synthesis_counters_partition_when_cuts_are_disjoint(
            aggs in prop::collection::vec(0.0f64..=1.0, 1..20),
        ) {
            // Ten distinct individuals put the top cut (3rd smallest, 0.15)
            // strictly below the worst cut (3rd largest, 0.40), so every
            // question lands in exactly one of top / between / worst.
            let individuals: Vec<f64> = (1..=10).map(|i| i as f64 * 0.05).collect();
            let questions: Vec<QuestionSynthesis> = aggs
                .iter()
                .map(|a| QuestionSynthesis {
                    aggregate_brier: *a,
                    individual_briers: individuals.clone(),
                })
                .collect();
            let m = synthesis_metrics(&questions, SynthesisVariant::RankThreshold).unwrap();
            let n = aggs.len() as f64;
            let between = aggs.iter().filter(|a| **a > 0.15 && **a < 0.40).count() as f64;
            prop_assert!(
                (m.top_at_3 + m.worst_at_3 + between / n - 1.0).abs() < 1e-12,
                "top {} worst {} between {}",
                m.top_at_3, m.worst_at_3, between / n
            );
        }
    }
}
