//! Low-dimensional representations of per-cell window series.
//!
//! Two reductions are available: random sketches (dot products of the
//! z-normalized series with `b` seeded Rademacher vectors) and four-parameter
//! generalized lambda distribution fits obtained with the percentile method.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{znormalize, CellSeries};

/// `b` random `{-1, +1}` vectors of length `w`.
///
/// Vectors are drawn in order from one seeded stream, so the basis for `b`
/// is a prefix of the basis for any larger `b` with the same seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchBasis {
    seed: u64,
    len: usize,
    vectors: Vec<Vec<f64>>,
}

impl SketchBasis {
    pub fn new(b: usize, w: usize, seed: u64) -> Result<Self> {
        if b == 0 || w == 0 {
            return Err(Error::config(format!("sketch basis needs b >= 1 and w >= 1, got b={b} w={w}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = (0..b)
            .map(|_| {
                (0..w)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        Ok(Self {
            seed,
            len: w,
            vectors,
        })
    }

    pub fn b(&self) -> usize {
        self.vectors.len()
    }

    pub fn w(&self) -> usize {
        self.len
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }
}

pub fn make_sketch_basis(b: usize, w: usize, seed: u64) -> Result<SketchBasis> {
    SketchBasis::new(b, w, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchVector {
    pub components: Vec<f64>,
}

impl SketchVector {
    pub fn distance(&self, other: &SketchVector) -> f64 {
        crate::grid::euclidean(&self.components, &other.components)
    }
}

/// Sketch of the z-normalized series, scaled by `1/sqrt(b)`.
pub fn parcorr_sketch(series: &CellSeries, basis: &SketchBasis) -> Result<SketchVector> {
    if series.len() != basis.w() {
        return Err(Error::shape(format!(
            "series of length {} against a basis of width {}",
            series.len(),
            basis.w()
        )));
    }
    let z = znormalize(&series.values)?;
    let scale = 1.0 / (basis.b() as f64).sqrt();
    let components = basis
        .vectors
        .iter()
        .map(|v| v.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    Ok(SketchVector { components })
}

/// Ramberg–Schmeiser parameters; quantile `Q(p) = l1 + (p^l3 - (1-p)^l4) / l2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GldParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl GldParams {
    pub fn quantile(&self, p: f64) -> f64 {
        self.lambda1 + (p.powf(self.lambda3) - (1.0 - p).powf(self.lambda4)) / self.lambda2
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.lambda1, self.lambda2, self.lambda3, self.lambda4]
    }
}

/// Tail probability of the percentile statistics.
const GLD_U: f64 = 0.1;
pub const GLD_TOLERANCE: f64 = 1e-6;
const GLD_MAX_ITER: usize = 200;

/// Result of the shape solver, including the residual at the returned point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GldFit {
    pub params: GldParams,
    pub residual: f64,
}

/// Sample quantile at position `(n + 1) p`, linearly interpolated and clamped to the sample.
fn sample_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = (n as f64 + 1.0) * p;
    if pos <= 1.0 {
        return sorted[0];
    }
    if pos >= n as f64 {
        return sorted[n - 1];
    }
    let r = pos.floor() as usize;
    let a = pos - r as f64;
    sorted[r - 1] + a * (sorted[r] - sorted[r - 1])
}

struct PercentileStats {
    median: f64,
    spread: f64,
    left_right: f64,
    tail_weight: f64,
}

impl PercentileStats {
    fn from_sample(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = |p| sample_quantile(&sorted, p);
        let median = q(0.5);
        let lo = q(GLD_U);
        let hi = q(1.0 - GLD_U);
        let spread = hi - lo;
        Self {
            median,
            spread,
            left_right: (median - lo) / (hi - median),
            tail_weight: (q(0.75) - q(0.25)) / spread,
        }
    }
}

fn shape_stats(l3: f64, l4: f64) -> (f64, f64) {
    let u = GLD_U;
    let v = 1.0 - u;
    let h3 = 0.5f64.powf(l3);
    let h4 = 0.5f64.powf(l4);
    let left = v.powf(l4) - u.powf(l3) + h3 - h4;
    let right = v.powf(l3) - u.powf(l4) + h4 - h3;
    let inner = 0.75f64.powf(l3) - 0.25f64.powf(l3) + 0.75f64.powf(l4) - 0.25f64.powf(l4);
    let outer = v.powf(l3) - u.powf(l3) + v.powf(l4) - u.powf(l4);
    (left / right, inner / outer)
}

fn shape_residual(l3: f64, l4: f64, target: (f64, f64)) -> (f64, f64) {
    let (a, b) = shape_stats(l3, l4);
    (a - target.0, b - target.1)
}

fn norm(r: (f64, f64)) -> f64 {
    if r.0.is_finite() && r.1.is_finite() {
        r.0.hypot(r.1)
    } else {
        f64::INFINITY
    }
}

/// Admissible shape pairs: both positive or both negative (above -1) and away from zero.
fn admissible(l3: f64, l4: f64) -> bool {
    let pos = l3 >= 1e-4 && l4 >= 1e-4 && l3 <= 50.0 && l4 <= 50.0;
    let neg = l3 <= -1e-4 && l4 <= -1e-4 && l3 > -1.0 && l4 > -1.0;
    pos || neg
}

fn seed_grid() -> Vec<f64> {
    let mut g: Vec<f64> = (1..=30).map(|i| i as f64 * 0.1).collect();
    g.extend([0.01, 0.03, 0.05, 0.07, 0.13, 0.14, 3.5, 4.0, 5.0]);
    g.extend((1..=9).map(|i| -(i as f64) * 0.1));
    g.extend([-0.01, -0.05, -0.95]);
    g
}

fn solve_shape(target: (f64, f64)) -> (f64, f64, f64) {
    let grid = seed_grid();
    let mut best = (f64::NAN, f64::NAN, f64::INFINITY);
    for &a in &grid {
        for &b in &grid {
            if !admissible(a, b) {
                continue;
            }
            let r = norm(shape_residual(a, b, target));
            if r < best.2 {
                best = (a, b, r);
            }
        }
    }
    let (mut l3, mut l4, mut res) = best;
    if !res.is_finite() {
        return best;
    }
    for _ in 0..GLD_MAX_ITER {
        if res < 1e-13 {
            break;
        }
        let h = 1e-7;
        let f = shape_residual(l3, l4, target);
        let f3p = shape_residual(l3 + h, l4, target);
        let f3m = shape_residual(l3 - h, l4, target);
        let f4p = shape_residual(l3, l4 + h, target);
        let f4m = shape_residual(l3, l4 - h, target);
        let j11 = (f3p.0 - f3m.0) / (2.0 * h);
        let j21 = (f3p.1 - f3m.1) / (2.0 * h);
        let j12 = (f4p.0 - f4m.0) / (2.0 * h);
        let j22 = (f4p.1 - f4m.1) / (2.0 * h);
        let det = j11 * j22 - j12 * j21;
        // Gauss-Newton direction with a small Levenberg term for near-singular Jacobians.
        let (d3, d4) = if det.abs() > 1e-14 {
            ((j22 * f.0 - j12 * f.1) / det, (-j21 * f.0 + j11 * f.1) / det)
        } else {
            let mu = 1e-6;
            let a11 = j11 * j11 + j21 * j21 + mu;
            let a12 = j11 * j12 + j21 * j22;
            let a22 = j12 * j12 + j22 * j22 + mu;
            let g1 = j11 * f.0 + j21 * f.1;
            let g2 = j12 * f.0 + j22 * f.1;
            let d = a11 * a22 - a12 * a12;
            ((a22 * g1 - a12 * g2) / d, (-a12 * g1 + a11 * g2) / d)
        };
        let mut step = 1.0;
        let mut moved = false;
        while step > 1e-10 {
            let (n3, n4) = (l3 - step * d3, l4 - step * d4);
            if admissible(n3, n4) {
                let r = norm(shape_residual(n3, n4, target));
                if r < res {
                    l3 = n3;
                    l4 = n4;
                    res = r;
                    moved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    (l3, l4, res)
}

/// Percentile-method fit returning the closest shape even when no exact solution exists.
pub fn gld_fit_closest(series: &CellSeries) -> Result<GldFit> {
    if series.len() < 8 {
        return Err(Error::shape(format!("gld fit needs at least 8 values, got {}", series.len())));
    }
    let stats = PercentileStats::from_sample(&series.values);
    if !(stats.spread > 0.0) || !stats.left_right.is_finite() || !(stats.tail_weight > 0.0) {
        return Err(Error::fit("degenerate sample spread", f64::NAN));
    }
    let (l3, l4, residual) = solve_shape((stats.left_right, stats.tail_weight));
    if !residual.is_finite() {
        return Err(Error::fit("no admissible starting point", residual));
    }
    let v = 1.0 - GLD_U;
    let lambda2 = (v.powf(l3) - GLD_U.powf(l3) + v.powf(l4) - GLD_U.powf(l4)) / stats.spread;
    let lambda1 = stats.median - (0.5f64.powf(l3) - 0.5f64.powf(l4)) / lambda2;
    if lambda2 == 0.0 || !lambda2.is_finite() || !lambda1.is_finite() {
        return Err(Error::fit("scale parameter collapsed", residual));
    }
    Ok(GldFit {
        params: GldParams {
            lambda1,
            lambda2,
            lambda3: l3,
            lambda4: l4,
        },
        residual,
    })
}

/// Percentile-method fit; fails unless the shape equations are solved within tolerance.
pub fn gld_fit(series: &CellSeries) -> Result<GldParams> {
    let fit = gld_fit_closest(series)?;
    if fit.residual > GLD_TOLERANCE {
        return Err(Error::fit("percentile equations did not converge", fit.residual));
    }
    Ok(fit.params)
}

/// Which reduction to apply to per-cell window series.
///
/// Serialized as `"gld"` or `"parcorr<b>"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Reduction {
    Parcorr { basis: usize },
    Gld,
}

impl Default for Reduction {
    fn default() -> Self {
        Reduction::Parcorr { basis: 6 }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reduction::Parcorr { basis } => write!(f, "parcorr{basis}"),
            Reduction::Gld => f.write_str("gld"),
        }
    }
}

impl From<Reduction> for String {
    fn from(r: Reduction) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for Reduction {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "gld" {
            return Ok(Reduction::Gld);
        }
        let digits = s.strip_prefix("parcorr").unwrap_or(&s);
        let digits = digits.trim_start_matches(['(', ':']).trim_end_matches(')');
        if digits.is_empty() {
            return Ok(Reduction::default());
        }
        digits
            .parse()
            .ok()
            .filter(|b| *b >= 1)
            .map(|basis| Reduction::Parcorr { basis })
            .ok_or_else(|| Error::config(format!("unknown reduction `{s}`")))
    }
}

/// Reduces every series to a feature vector.
///
/// GLD windows whose percentile equations have no exact solution are
/// represented by the closest admissible fit.
pub fn reduce_all(series: &[CellSeries], reduction: Reduction, seed: u64) -> Result<Vec<Vec<f64>>> {
    match reduction {
        Reduction::Parcorr { basis } => {
            let w = series.first().map(|s| s.len()).unwrap_or(1);
            let basis = SketchBasis::new(basis, w, seed)?;
            series
                .iter()
                .map(|s| parcorr_sketch(s, &basis).map(|v| v.components))
                .collect()
        }
        Reduction::Gld => series
            .iter()
            .map(|s| match gld_fit_closest(s) {
                Ok(fit) => Ok(fit.params.to_vec()),
                // constant windows: a point mass at the value
                Err(Error::Fit { .. }) => Ok(vec![s.values[0], 0.0, 0.0, 0.0]),
                Err(e) => Err(e),
            })
            .collect(),
    }
}
