//! Probability calibration: logit-scale maps, log-odds extremization,
//! isotonic and linear fits, and coefficient sweeps.
//!
//! The workhorse transform rescales forecasts on the log-odds scale:
//! `apply(p) = sigmoid(alpha * logit(p) + gamma)`. `alpha > 1` extremizes
//! (pushes away from 0.5), `alpha < 1` hedges toward 0.5, and `gamma` shifts
//! the base rate. Averaging a panel's logits and rescaling by `d` is the same
//! map applied to the geometric-mean pool, so one implementation serves both
//! single-forecast calibration and panel extremization.
//!
//! Probabilities are clamped into `[1e-4, 1 - 1e-4]` before any logit; raw
//! values are never clamped for scoring.

use crate::domain::{clamp_probability, Outcome, Probability, DEFAULT_CLAMP_EPSILON};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("empty input: nothing to fit or transform")]
    Empty,
    #[error("scale parameter must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("shift parameter must be finite")]
    BadShift,
    #[error("log-loss fit needs both outcome classes present")]
    SingleClass,
    #[error("all forecasts identical: linear fit is degenerate")]
    DegenerateLinear,
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("leave-one-out needs at least 2 pairs, got {0}")]
    TooFewForLoo(usize),
    #[error("calibration map invalid: {0}")]
    InvalidMap(String),
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn clamped_logit(p: Probability) -> f64 {
    logit(clamp_probability(p.value(), DEFAULT_CLAMP_EPSILON).expect("valid epsilon").value())
}

/// Rescale one probability on the log-odds scale.
///
/// `alpha = 1, gamma = 0` is the identity and returns the input unchanged
/// (exactly, with no clamp applied).
pub fn platt_apply(p: Probability, alpha: f64, gamma: f64) -> Result<Probability, CalibrationError> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(CalibrationError::BadScale(alpha));
    }
    if !gamma.is_finite() {
        return Err(CalibrationError::BadShift);
    }
    if alpha == 1.0 && gamma == 0.0 {
        return Ok(p);
    }
    let z = clamped_logit(p);
    Ok(Probability::new(sigmoid(alpha * z + gamma)).expect("sigmoid output in (0,1)"))
}

/// Pool a panel of probabilities by averaging their log-odds and rescaling
/// the average by `d` (`d > 1` extremizes the pooled forecast).
pub fn extremize_logodds(ps: &[Probability], d: f64) -> Result<Probability, CalibrationError> {
    if ps.is_empty() {
        return Err(CalibrationError::Empty);
    }
    if !d.is_finite() || d <= 0.0 {
        return Err(CalibrationError::BadScale(d));
    }
    let mean_logit = ps.iter().map(|p| clamped_logit(*p)).sum::<f64>() / ps.len() as f64;
    Ok(Probability::new(sigmoid(d * mean_logit)).expect("sigmoid output in (0,1)"))
}

/// Default extremization coefficient for pooled panels.
pub const DEFAULT_EXTREMIZATION: f64 = 1.732_050_807_568_877_2; // sqrt(3)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    Platt,
    Isotonic,
    Linear,
    #[default]
    Identity,
}

/// One step of a fitted isotonic map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub x: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearCoeffs {
    pub slope: f64,
    pub intercept: f64,
}

/// A fitted calibration transform, serializable into run configs and report
/// bundles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub method: CalibrationMethod,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub knots: Vec<Knot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<LinearCoeffs>,
}

fn default_alpha() -> f64 {
    1.0
}

impl Default for CalibrationMap {
    fn default() -> Self {
        CalibrationMap::identity()
    }
}

impl CalibrationMap {
    pub fn identity() -> Self {
        CalibrationMap {
            method: CalibrationMethod::Identity,
            alpha: 1.0,
            gamma: 0.0,
            knots: Vec::new(),
            linear: None,
        }
    }

    pub fn platt(alpha: f64, gamma: f64) -> Result<Self, CalibrationError> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(CalibrationError::BadScale(alpha));
        }
        if !gamma.is_finite() {
            return Err(CalibrationError::BadShift);
        }
        Ok(CalibrationMap {
            method: CalibrationMethod::Platt,
            alpha,
            gamma,
            knots: Vec::new(),
            linear: None,
        })
    }

    pub fn isotonic(knots: Vec<Knot>) -> Result<Self, CalibrationError> {
        let map = CalibrationMap {
            method: CalibrationMethod::Isotonic,
            alpha: 1.0,
            gamma: 0.0,
            knots,
            linear: None,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn linear(slope: f64, intercept: f64) -> Result<Self, CalibrationError> {
        let map = CalibrationMap {
            method: CalibrationMethod::Linear,
            alpha: 1.0,
            gamma: 0.0,
            knots: Vec::new(),
            linear: Some(LinearCoeffs { slope, intercept }),
        };
        map.validate()?;
        Ok(map)
    }

    /// Check structural invariants (used after deserializing a map from a
    /// config or report file).
    pub fn validate(&self) -> Result<(), CalibrationError> {
        match self.method {
            CalibrationMethod::Identity => Ok(()),
            CalibrationMethod::Platt => {
                if !self.alpha.is_finite() || self.alpha <= 0.0 {
                    return Err(CalibrationError::BadScale(self.alpha));
                }
                if !self.gamma.is_finite() {
                    return Err(CalibrationError::BadShift);
                }
                Ok(())
            }
            CalibrationMethod::Isotonic => {
                if self.knots.is_empty() {
                    return Err(CalibrationError::InvalidMap("isotonic map has no knots".into()));
                }
                for w in self.knots.windows(2) {
                    if w[1].x <= w[0].x {
                        return Err(CalibrationError::InvalidMap(
                            "isotonic knot positions must be strictly increasing".into(),
                        ));
                    }
                    if w[1].value < w[0].value {
                        return Err(CalibrationError::InvalidMap(
                            "isotonic knot values must be non-decreasing".into(),
                        ));
                    }
                }
                if self.knots.iter().any(|k| !(0.0..=1.0).contains(&k.value)) {
                    return Err(CalibrationError::InvalidMap(
                        "isotonic knot values must lie in [0, 1]".into(),
                    ));
                }
                Ok(())
            }
            CalibrationMethod::Linear => {
                let c = self
                    .linear
                    .ok_or_else(|| CalibrationError::InvalidMap("linear map missing coefficients".into()))?;
                if !c.slope.is_finite() || !c.intercept.is_finite() {
                    return Err(CalibrationError::InvalidMap("linear coefficients must be finite".into()));
                }
                Ok(())
            }
        }
    }

    /// Apply the fitted transform to one probability. Output is always a
    /// valid probability; identity maps are exact no-ops.
    pub fn apply(&self, p: Probability) -> Probability {
        match self.method {
            CalibrationMethod::Identity => p,
            CalibrationMethod::Platt => {
                platt_apply(p, self.alpha, self.gamma).expect("validated platt map")
            }
            CalibrationMethod::Isotonic => isotonic_apply(&self.knots, p),
            CalibrationMethod::Linear => {
                let c = self.linear.expect("validated linear map");
                Probability::new((c.intercept + c.slope * p.value()).clamp(0.0, 1.0))
                    .expect("clamped output")
            }
        }
    }
}

/// Loss minimized when fitting the logit-scale map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitLoss {
    LogLoss,
    Brier,
}

/// Bounds for the fitted scale parameter.
pub const ALPHA_MIN: f64 = 0.05;
pub const ALPHA_MAX: f64 = 20.0;
const GAMMA_MIN: f64 = -10.0;
const GAMMA_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PlattFit {
    pub map: CalibrationMap,
    pub loss: f64,
    /// True when the optimizer ran into the alpha box bound (e.g. separated
    /// data pushes alpha to the upper limit).
    pub at_alpha_bound: bool,
}

struct LogitData {
    z: Vec<f64>,
    o: Vec<f64>,
}

impl LogitData {
    fn new(pairs: &[(Probability, Outcome)]) -> Self {
        LogitData {
            z: pairs.iter().map(|(p, _)| clamped_logit(*p)).collect(),
            o: pairs.iter().map(|(_, o)| o.as_f64()).collect(),
        }
    }

    fn eval(&self, alpha: f64, gamma: f64, loss: FitLoss) -> f64 {
        let mut total = 0.0;
        for (z, o) in self.z.iter().zip(&self.o) {
            let q = sigmoid(alpha * z + gamma);
            total += match loss {
                FitLoss::Brier => (q - o) * (q - o),
                FitLoss::LogLoss => {
                    let qc = q.clamp(1e-12, 1.0 - 1e-12);
                    -(o * qc.ln() + (1.0 - o) * (1.0 - qc).ln())
                }
            };
        }
        total / self.z.len() as f64
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

fn golden_min(f: &mut dyn FnMut(f64) -> f64, mut a: f64, mut b: f64, iters: u32) -> (f64, f64) {
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    let mid = 0.5 * (a + b);
    (mid, f(mid))
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (ll, lh) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (ll + (lh - ll) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

fn grid_then_golden(
    f: &mut dyn FnMut(f64) -> f64,
    grid: &[f64],
    lo: f64,
    hi: f64,
    iters: u32,
) -> (f64, f64) {
    let mut best_i = 0;
    let mut best_v = f64::INFINITY;
    for (i, x) in grid.iter().enumerate() {
        let v = f(*x);
        if v < best_v {
            best_v = v;
            best_i = i;
        }
    }
    let a = if best_i == 0 { lo } else { grid[best_i - 1] };
    let b = if best_i + 1 == grid.len() { hi } else { grid[best_i + 1] };
    let (x, v) = golden_min(f, a, b, iters);
    if v <= best_v {
        (x, v)
    } else {
        (grid[best_i], best_v)
    }
}

/// Fit the logit-scale map by deterministic grid search plus golden-section
/// refinement. `alpha` is boxed into `[0.05, 20]`; `gamma` is fitted only when
/// `fit_gamma` is set (otherwise pinned at 0).
pub fn platt_fit(
    pairs: &[(Probability, Outcome)],
    loss: FitLoss,
    fit_gamma: bool,
) -> Result<PlattFit, CalibrationError> {
    if pairs.is_empty() {
        return Err(CalibrationError::Empty);
    }
    if loss == FitLoss::LogLoss {
        let ones = pairs.iter().filter(|(_, o)| *o == Outcome::Yes).count();
        if ones == 0 || ones == pairs.len() {
            return Err(CalibrationError::SingleClass);
        }
    }
    let data = LogitData::new(pairs);

    let gamma_grid: Vec<f64> = (0..17)
        .map(|i| GAMMA_MIN + (GAMMA_MAX - GAMMA_MIN) * i as f64 / 16.0)
        .collect();
    let best_gamma_for = |alpha: f64, data: &LogitData| -> (f64, f64) {
        if !fit_gamma {
            return (0.0, data.eval(alpha, 0.0, loss));
        }
        let mut obj = |g: f64| data.eval(alpha, g, loss);
        grid_then_golden(&mut obj, &gamma_grid, GAMMA_MIN, GAMMA_MAX, 48)
    };

    let alpha_grid = log_spaced(ALPHA_MIN, ALPHA_MAX, 25);
    let mut outer = |a: f64| best_gamma_for(a, &data).1;
    let (mut alpha, _) = grid_then_golden(&mut outer, &alpha_grid, ALPHA_MIN, ALPHA_MAX, 48);

    // Snap to the box bound when the optimum sits against it.
    let mut at_bound = false;
    if (alpha - ALPHA_MIN).abs() < 1e-6 {
        alpha = ALPHA_MIN;
        at_bound = true;
    } else if (ALPHA_MAX - alpha).abs() < 1e-6 {
        alpha = ALPHA_MAX;
        at_bound = true;
    }
    let (gamma, loss_value) = best_gamma_for(alpha, &data);

    Ok(PlattFit {
        map: CalibrationMap::platt(alpha, gamma)?,
        loss: loss_value,
        at_alpha_bound: at_bound,
    })
}

/// Weighted pool-adjacent-violators over outcomes sorted by forecast.
/// Duplicate forecast values are pooled (weighted) before the isotonic pass,
/// so knot positions are strictly increasing.
pub fn isotonic_fit(pairs: &[(Probability, Outcome)]) -> Result<Vec<Knot>, CalibrationError> {
    if pairs.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let mut sorted: Vec<(f64, f64)> = pairs
        .iter()
        .map(|(p, o)| (p.value(), o.as_f64()))
        .collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // Pool exact duplicates: (x, weight, mean outcome).
    let mut pooled: Vec<(f64, f64, f64)> = Vec::new();
    for (x, y) in sorted {
        match pooled.last_mut() {
            Some((px, w, m)) if *px == x => {
                *m = (*m * *w + y) / (*w + 1.0);
                *w += 1.0;
            }
            _ => pooled.push((x, 1.0, y)),
        }
    }

    // PAVA: merge adjacent blocks while the fitted means decrease.
    struct Block {
        weight: f64,
        sum: f64,
        len: usize,
    }
    let mut blocks: Vec<Block> = Vec::new();
    for (_, w, m) in &pooled {
        blocks.push(Block {
            weight: *w,
            sum: *w * *m,
            len: 1,
        });
        while blocks.len() >= 2 {
            let last = blocks.len() - 1;
            let mean_prev = blocks[last - 1].sum / blocks[last - 1].weight;
            let mean_last = blocks[last].sum / blocks[last].weight;
            if mean_prev > mean_last {
                let b = blocks.pop().unwrap();
                let a = blocks.last_mut().unwrap();
                a.weight += b.weight;
                a.sum += b.sum;
                a.len += b.len;
            } else {
                break;
            }
        }
    }

    let mut knots = Vec::with_capacity(pooled.len());
    let mut idx = 0;
    for b in &blocks {
        let value = b.sum / b.weight;
        for _ in 0..b.len {
            knots.push(Knot {
                x: pooled[idx].0,
                value,
            });
            idx += 1;
        }
    }
    Ok(knots)
}

/// Evaluate an isotonic map: exact knot hits return the knot value, queries
/// beyond the fitted range extrapolate flat, and queries strictly between two
/// knots return the midpoint of the neighboring fitted values.
pub fn isotonic_apply(knots: &[Knot], p: Probability) -> Probability {
    assert!(!knots.is_empty(), "isotonic map has no knots");
    let x = p.value();
    if x <= knots[0].x {
        return Probability::new(knots[0].value).expect("knot value in range");
    }
    let last = knots.len() - 1;
    if x >= knots[last].x {
        return Probability::new(knots[last].value).expect("knot value in range");
    }
    // Binary search for the bracketing pair.
    let mut lo = 0;
    let mut hi = last;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if knots[mid].x <= x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if knots[lo].x == x {
        return Probability::new(knots[lo].value).expect("knot value in range");
    }
    Probability::new(0.5 * (knots[lo].value + knots[hi].value)).expect("midpoint in range")
}

/// Ordinary least squares of outcome on forecast. Rejects datasets where
/// every forecast value is identical.
pub fn linear_fit(pairs: &[(Probability, Outcome)]) -> Result<LinearCoeffs, CalibrationError> {
    if pairs.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let n = pairs.len() as f64;
    let mean_x = pairs.iter().map(|(p, _)| p.value()).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|(_, o)| o.as_f64()).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (p, o) in pairs {
        let dx = p.value() - mean_x;
        sxx += dx * dx;
        sxy += dx * (o.as_f64() - mean_y);
    }
    if sxx == 0.0 {
        return Err(CalibrationError::DegenerateLinear);
    }
    let slope = sxy / sxx;
    Ok(LinearCoeffs {
        slope,
        intercept: mean_y - slope * mean_x,
    })
}

/// Mean Brier along a grid of extremization coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub grid: Vec<f64>,
    pub mean_brier: Vec<f64>,
    pub argmin_alpha: f64,
}

/// Evaluate `platt_apply(p, alpha, 0)` over an alpha grid and report the mean
/// Brier at each point. Ties on the minimum resolve to the earliest grid
/// entry.
pub fn coefficient_sweep(
    pairs: &[(Probability, Outcome)],
    grid: &[f64],
) -> Result<SweepCurve, CalibrationError> {
    if grid.is_empty() {
        return Err(CalibrationError::EmptyGrid);
    }
    if pairs.is_empty() {
        return Err(CalibrationError::Empty);
    }
    for a in grid {
        if !a.is_finite() || *a <= 0.0 {
            return Err(CalibrationError::BadScale(*a));
        }
    }
    let mut mean_brier = Vec::with_capacity(grid.len());
    for alpha in grid {
        let mut total = 0.0;
        for (p, o) in pairs {
            let q = platt_apply(*p, *alpha, 0.0)?;
            let d = q.value() - o.as_f64();
            total += d * d;
        }
        mean_brier.push(total / pairs.len() as f64);
    }
    let mut argmin = 0;
    for (i, v) in mean_brier.iter().enumerate() {
        if *v < mean_brier[argmin] {
            argmin = i;
        }
    }
    Ok(SweepCurve {
        grid: grid.to_vec(),
        mean_brier,
        argmin_alpha: grid[argmin],
    })
}

/// Which calibration family to fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum FitSpec {
    Platt { loss: FitLoss, fit_gamma: bool },
    Isotonic,
    Linear,
}

pub fn fit_calibration(
    pairs: &[(Probability, Outcome)],
    spec: FitSpec,
) -> Result<CalibrationMap, CalibrationError> {
    match spec {
        FitSpec::Platt { loss, fit_gamma } => Ok(platt_fit(pairs, loss, fit_gamma)?.map),
        FitSpec::Isotonic => CalibrationMap::isotonic(isotonic_fit(pairs)?),
        FitSpec::Linear => {
            let c = linear_fit(pairs)?;
            CalibrationMap::linear(c.slope, c.intercept)
        }
    }
}

/// Leave-one-out evaluation of a calibration family: refit on n-1 pairs,
/// apply to the held-out forecast, and average the Brier score.
pub fn loo_mean_brier(
    pairs: &[(Probability, Outcome)],
    spec: FitSpec,
) -> Result<f64, CalibrationError> {
    if pairs.len() < 2 {
        return Err(CalibrationError::TooFewForLoo(pairs.len()));
    }
    let mut total = 0.0;
    let mut fold = Vec::with_capacity(pairs.len() - 1);
    for i in 0..pairs.len() {
        fold.clear();
        fold.extend(pairs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| *p));
        let map = fit_calibration(&fold, spec)?;
        let (p, o) = pairs[i];
        let q = map.apply(p);
        let d = q.value() - o.as_f64();
        total += d * d;
    }
    Ok(total / pairs.len() as f64)
}
