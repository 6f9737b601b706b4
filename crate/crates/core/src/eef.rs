//! Error estimation functions: per-predictor regressions from a DTW distance
//! (between a target series and the predictor's training profile) to the
//! prediction error expected on that target.
//!
//! Calibration adds Gaussian noise of increasing variance to the training
//! data, measures how far the noisy windows sit from the clean training
//! profile and how much the predictor's error grows, and fits
//! `error = F(dist)` with a degree-1 or degree-2 polynomial chosen by
//! leave-one-out CV.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::CellSeries;
use crate::linalg::least_squares;
use crate::predictors::PredictorMeta;

pub const DEFAULT_NOISE_LEVELS: usize = 10;
/// Default per-level variance increment as a fraction of the training variance.
pub const DEFAULT_NOISE_FRACTION: f64 = 0.05;

/// Dynamic time warping distance with absolute local cost.
///
/// `band` restricts alignments to `|i - j| <= band` (widened to the length
/// difference so a path always exists).
pub fn dtw(a: &[f64], b: &[f64], band: Option<usize>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::shape("dtw of an empty sequence"));
    }
    Ok(dtw_within(a, b, band, f64::INFINITY))
}

/// DTW that gives up with `INFINITY` once every partial path costs more than
/// `cutoff`. Inputs must be nonempty.
fn dtw_within(a: &[f64], b: &[f64], band: Option<usize>, cutoff: f64) -> f64 {
    let (n, m) = (a.len(), b.len());
    let radius = band.map(|r| r.max(n.abs_diff(m))).unwrap_or(usize::MAX);
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur.fill(f64::INFINITY);
        let lo = if radius == usize::MAX { 1 } else { i.saturating_sub(radius).max(1) };
        let hi = if radius == usize::MAX { m } else { (i + radius).min(m) };
        let mut row_min = f64::INFINITY;
        for j in lo..=hi {
            let cost = (a[i - 1] - b[j - 1]).abs();
            cur[j] = cost + prev[j - 1].min(prev[j]).min(cur[j - 1]);
            row_min = row_min.min(cur[j]);
        }
        // path costs never decrease, so the row minimum bounds the result
        if row_min > cutoff {
            return f64::INFINITY;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub levels: usize,
    /// Variance added per level, in squared data units.
    pub base_sigma: f64,
}

impl NoiseSchedule {
    pub fn new(levels: usize, base_sigma: f64) -> Result<Self> {
        if levels < 2 || !(base_sigma > 0.0) {
            return Err(Error::config(format!(
                "noise schedule needs levels >= 2 and base_sigma > 0, got {levels} and {base_sigma}"
            )));
        }
        Ok(Self { levels, base_sigma })
    }

    /// Schedule whose per-level variance is `fraction` of the dataset's global variance.
    pub fn scaled_to(dataset: &[CellSeries], levels: usize, fraction: f64) -> Result<Self> {
        let n: usize = dataset.iter().map(|s| s.len()).sum();
        if n == 0 {
            return Err(Error::shape("cannot scale a noise schedule to an empty dataset"));
        }
        let mean = dataset.iter().flat_map(|s| &s.values).sum::<f64>() / n as f64;
        let var = dataset
            .iter()
            .flat_map(|s| &s.values)
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        Self::new(levels, (fraction * var).max(f64::MIN_POSITIVE))
    }

    pub fn variance(&self, level: usize) -> f64 {
        level as f64 * self.base_sigma
    }
}

/// `(distance, error)` pair observed at one noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceErrorPair {
    pub dist: f64,
    pub err: f64,
}

/// Adds i.i.d. `N(0, level * base_sigma)` noise to every value.
pub fn inject_noise(dataset: &[CellSeries], level: usize, schedule: &NoiseSchedule, seed: u64) -> Result<Vec<CellSeries>> {
    if level >= schedule.levels {
        return Err(Error::config(format!(
            "noise level {level} outside schedule of {} levels",
            schedule.levels
        )));
    }
    if level == 0 {
        return Ok(dataset.to_vec());
    }
    let normal = Normal::new(0.0, schedule.variance(level).sqrt()).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(level as u64);
    Ok(dataset
        .iter()
        .map(|s| {
            CellSeries::new(
                s.row,
                s.col,
                s.values.iter().map(|v| v + normal.sample(&mut rng)).collect(),
            )
        })
        .collect())
}

/// Pointwise mean of equal-length series.
pub fn centroid_series(dataset: &[CellSeries]) -> Result<CellSeries> {
    let first = dataset.first().ok_or_else(|| Error::shape("centroid of an empty dataset"))?;
    let len = first.len();
    if dataset.iter().any(|s| s.len() != len) {
        return Err(Error::shape("centroid members must share one length"));
    }
    let mut acc = vec![0.0; len];
    for s in dataset {
        for (a, v) in acc.iter_mut().zip(&s.values) {
            *a += v;
        }
    }
    let n = dataset.len() as f64;
    Ok(CellSeries::new(first.row, first.col, acc.into_iter().map(|v| v / n).collect()))
}

/// Subtracts the series mean.
pub fn center(values: &[f64]) -> Vec<f64> {
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    values.iter().map(|v| v - mean).collect()
}

/// Mean-centered, non-overlapping segments of `len` values, starting at each
/// series' first value; a trailing partial segment is dropped.
pub fn centered_segments(dataset: &[CellSeries], len: usize) -> Result<Vec<Vec<f64>>> {
    if len == 0 {
        return Err(Error::shape("segment length must be positive"));
    }
    let segments: Vec<Vec<f64>> = dataset
        .iter()
        .flat_map(|s| s.values.chunks_exact(len).map(center))
        .collect();
    if segments.is_empty() {
        return Err(Error::shape(format!("no training series holds a full window of {len}")));
    }
    Ok(segments)
}

/// Evenly strided indices picking at most `cap` of `n` items.
fn strided(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|i| i * n / cap).collect()
}

/// Smallest DTW distance from `target` to any reference.
pub fn nearest_distance(references: &[Vec<f64>], target: &[f64]) -> Result<f64> {
    if target.is_empty() || references.iter().any(Vec::is_empty) {
        return Err(Error::shape("dtw of an empty sequence"));
    }
    let mut best = f64::INFINITY;
    for r in references {
        best = best.min(dtw_within(r, target, None, best));
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::shape("no reference windows"))
    }
}

/// Pooled RMSE of recursive `horizon`-step forecasts over every
/// `(window_len inputs -> next horizon values)` pair in the dataset.
pub fn model_error_on(dataset: &[CellSeries], predictor: &PredictorMeta, window_len: usize, horizon: usize) -> Result<f64> {
    if window_len != predictor.input_len {
        return Err(Error::shape(format!(
            "window length {window_len} does not match predictor `{}` input length {}",
            predictor.id, predictor.input_len
        )));
    }
    if horizon == 0 {
        return Err(Error::config("horizon must be at least 1"));
    }
    let fc = predictor.forecaster();
    let mut sq = 0.0;
    let mut count = 0usize;
    for s in dataset {
        if s.len() < window_len + horizon {
            continue;
        }
        for start in 0..=(s.len() - window_len - horizon) {
            let input = &s.values[start..start + window_len];
            let pred = fc.forecast(input, horizon)?;
            for (p, truth) in pred.iter().zip(&s.values[start + window_len..]) {
                sq += (p - truth).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::shape(format!(
            "no series is long enough for {window_len} inputs and {horizon} targets"
        )));
    }
    Ok((sq / count as f64).sqrt())
}

/// Regression `error = F(dist)` anchored on a predictor's training profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimationFunction {
    pub degree: usize,
    /// Ascending powers: `c0 + c1 d (+ c2 d^2)`.
    pub coefficients: Vec<f64>,
    pub cv_rmse: f64,
    /// Pointwise mean of the reference windows.
    pub centroid: Vec<f64>,
    /// Mean-centered clean training windows. When empty, distances are
    /// measured to `centroid` instead.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<Vec<f64>>,
    /// Largest calibration distance; estimates beyond it are extrapolations.
    pub max_distance: f64,
}

impl ErrorEstimationFunction {
    /// `F(dist)` clamped at zero.
    pub fn evaluate(&self, dist: f64) -> f64 {
        let raw: f64 = self
            .coefficients
            .iter()
            .rev()
            .fold(0.0, |acc, c| acc * dist + c);
        raw.max(0.0)
    }

    /// DTW distance from the mean-centered target to the nearest reference window.
    pub fn distance_to(&self, target: &[f64]) -> Result<f64> {
        let target = center(target);
        if self.references.is_empty() {
            dtw(&self.centroid, &target, None)
        } else {
            nearest_distance(&self.references, &target)
        }
    }

    pub fn is_extrapolating(&self, dist: f64) -> bool {
        dist > self.max_distance
    }
}

pub fn estimate_error(eef: &ErrorEstimationFunction, target: &CellSeries) -> Result<f64> {
    Ok(eef.evaluate(eef.distance_to(&target.values)?))
}

/// Upper bound on the reference windows kept per predictor.
pub const MAX_REFERENCES: usize = 48;

/// Reference windows and noise-level `(distance, error)` pairs, level 0 first.
///
/// References are strided clean training windows. At each level the same
/// windows are taken from the noisy dataset and the distance is the mean, over
/// them, of the DTW distance to the nearest reference; level 0 sits at 0.
pub fn calibration_pairs(
    predictor: &PredictorMeta,
    training: &[CellSeries],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<DistanceErrorPair>)> {
    let len = predictor.input_len;
    let clean = centered_segments(training, len)?;
    let picks = strided(clean.len(), MAX_REFERENCES);
    let references: Vec<Vec<f64>> = picks.iter().map(|&i| clean[i].clone()).collect();
    let mut pairs = Vec::with_capacity(schedule.levels);
    for level in 0..schedule.levels {
        let noisy = inject_noise(training, level, schedule, seed)?;
        let segments = centered_segments(&noisy, len)?;
        let mut total = 0.0;
        for &i in &picks {
            total += nearest_distance(&references, &segments[i])?;
        }
        let dist = total / picks.len() as f64;
        let err = model_error_on(&noisy, predictor, len, 1)?;
        pairs.push(DistanceErrorPair { dist, err });
    }
    Ok((references, pairs))
}

fn poly_design(xs: &[f64], degree: usize) -> Vec<f64> {
    xs.iter()
        .flat_map(|&x| (0..=degree).map(move |p| x.powi(p as i32)))
        .collect()
}

fn poly_fit(xs: &[f64], ys: &[f64], degree: usize) -> Result<Vec<f64>> {
    least_squares(&poly_design(xs, degree), degree + 1, ys)
}

fn poly_eval(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Leave-one-out RMSE of a polynomial fit, or `None` if any fold is singular.
fn loo_rmse(xs: &[f64], ys: &[f64], degree: usize) -> Option<f64> {
    let n = xs.len();
    if n < degree + 2 {
        return None;
    }
    let mut sq = 0.0;
    for i in 0..n {
        let tx: Vec<f64> = xs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).collect();
        let ty: Vec<f64> = ys.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).collect();
        let coef = poly_fit(&tx, &ty, degree).ok()?;
        sq += (poly_eval(&coef, xs[i]) - ys[i]).powi(2);
    }
    Some((sq / n as f64).sqrt())
}

/// Fits `F` to calibration pairs, choosing degree 1 or 2 by leave-one-out CV.
pub fn fit_eef_from_pairs(pairs: &[DistanceErrorPair], centroid: Vec<f64>) -> Result<ErrorEstimationFunction> {
    if pairs.len() < 3 {
        return Err(Error::config("an error estimation function needs at least 3 calibration pairs"));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.dist).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.err).collect();
    let spread = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xs.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(spread > 0.0) {
        return Err(Error::fit("all calibration distances are equal", 0.0));
    }
    let mut best: Option<(usize, f64)> = None;
    for degree in 1..=2 {
        if let Some(cv) = loo_rmse(&xs, &ys, degree) {
            if best.is_none_or(|(_, b)| cv < b) {
                best = Some((degree, cv));
            }
        }
    }
    let (degree, cv_rmse) = best.ok_or_else(|| Error::fit("singular normal equations in every fold", f64::NAN))?;
    let coefficients = poly_fit(&xs, &ys, degree)?;
    Ok(ErrorEstimationFunction {
        degree,
        coefficients,
        cv_rmse,
        centroid,
        references: Vec::new(),
        max_distance: xs.iter().cloned().fold(0.0, f64::max),
    })
}

pub fn fit_eef(
    predictor: &PredictorMeta,
    training: &[CellSeries],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<ErrorEstimationFunction> {
    if schedule.levels < 3 {
        return Err(Error::config("fitting an error estimation function needs at least 3 noise levels"));
    }
    let (references, pairs) = calibration_pairs(predictor, training, schedule, seed)?;
    let rows: Vec<CellSeries> = references.iter().map(|r| CellSeries::new(0, 0, r.clone())).collect();
    let centroid = centroid_series(&rows)?.values;
    Ok(ErrorEstimationFunction {
        references,
        ..fit_eef_from_pairs(&pairs, centroid)?
    })
}
