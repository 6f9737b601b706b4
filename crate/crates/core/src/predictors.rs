//! Predictor abstraction, closed-form per-cell predictor kinds, and the
//! JSON-manifest-backed model registry.
//!
//! Every predictor maps a `j x h x w` input block to an `h x w` next-step
//! frame. The kinds implemented here are all per-cell: output cell `(r, c)`
//! depends only on the input series of cell `(r, c)`.

use std::collections::HashSet;
use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::eef::ErrorEstimationFunction;
use crate::error::{Error, Result};
use crate::grid::{CellSeries, Frame, GridShape, RegionRect};
use crate::linalg::{least_squares, projection_weights};

pub const DEFAULT_AR_ORDER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Persistence,
    Mean,
    Ar,
    LinearTrend,
    SineFit,
    PooledGlobal,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 6] = [
        PredictorKind::Persistence,
        PredictorKind::Mean,
        PredictorKind::Ar,
        PredictorKind::LinearTrend,
        PredictorKind::SineFit,
        PredictorKind::PooledGlobal,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PredictorKind::Persistence => "persistence",
            PredictorKind::Mean => "mean",
            PredictorKind::Ar => "ar",
            PredictorKind::LinearTrend => "linear_trend",
            PredictorKind::SineFit => "sine_fit",
            PredictorKind::PooledGlobal => "pooled_global",
        }
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PredictorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown predictor kind `{s}`")))
    }
}

/// A fitted, frozen predictor.
///
/// `params` layout per kind:
/// * `persistence`: empty
/// * `mean`: `[training_mean]`
/// * `ar`, `pooled_global`: AR coefficients `[a1, .., ap]` (lag 1 first)
/// * `linear_trend`: `[slope, intercept]` of the training fit
/// * `sine_fit`: `[frequency, offset, sin_coef, cos_coef]`, frequency in cycles per tick
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorMeta {
    pub id: String,
    pub kind: PredictorKind,
    pub input_rows: usize,
    pub input_cols: usize,
    pub input_len: usize,
    pub params: Vec<f64>,
    pub training_region: RegionRect,
    pub training_interval: (i64, i64),
}

/// Row-major `len x rows x cols` block of input values.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBlock {
    pub len: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Tick of the last slice.
    pub last_tick: i64,
}

impl InputBlock {
    pub fn new(len: usize, rows: usize, cols: usize, values: Vec<f64>, last_tick: i64) -> Result<Self> {
        if values.len() != len * rows * cols {
            return Err(Error::shape(format!(
                "input block {len}x{rows}x{cols} needs {} values, got {}",
                len * rows * cols,
                values.len()
            )));
        }
        Ok(Self {
            len,
            rows,
            cols,
            values,
            last_tick,
        })
    }

    pub fn get(&self, t: usize, r: usize, c: usize) -> f64 {
        self.values[(t * self.rows + r) * self.cols + c]
    }

    pub fn cell_series(&self, r: usize, c: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.get(t, r, c)).collect()
    }
}

impl PredictorMeta {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("predictor id must not be empty".into()));
        }
        if self.input_rows == 0 || self.input_cols == 0 || self.input_len == 0 {
            return Err(Error::Validation(format!("predictor `{}` has a zero input extent", self.id)));
        }
        let need = match self.kind {
            PredictorKind::Persistence => 0,
            PredictorKind::Mean => 0,
            PredictorKind::Ar | PredictorKind::PooledGlobal => 1,
            PredictorKind::LinearTrend => 0,
            PredictorKind::SineFit => 1,
        };
        if self.params.len() < need {
            return Err(Error::Validation(format!(
                "predictor `{}` of kind {} needs at least {need} params",
                self.id, self.kind
            )));
        }
        if matches!(self.kind, PredictorKind::Ar | PredictorKind::PooledGlobal) && self.params.len() > self.input_len {
            return Err(Error::Validation(format!(
                "predictor `{}` has AR order {} above its input length {}",
                self.id,
                self.params.len(),
                self.input_len
            )));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation(format!("predictor `{}` has non-finite params", self.id)));
        }
        Ok(())
    }

    /// Linear one-step weights over a window, for kinds whose forecast is linear in the window.
    fn window_weights(&self, len: usize) -> Option<Vec<f64>> {
        match self.kind {
            PredictorKind::LinearTrend => {
                if len == 1 {
                    return Some(vec![1.0]);
                }
                let design: Vec<f64> = (0..len).flat_map(|t| [1.0, t as f64]).collect();
                Some(projection_weights(&design, 2, &[1.0, len as f64]))
            }
            PredictorKind::SineFit => {
                let omega = TAU * self.params[0];
                let row = |t: f64| [1.0, (omega * t).sin(), (omega * t).cos()];
                let design: Vec<f64> = (0..len).flat_map(|t| row(t as f64)).collect();
                Some(projection_weights(&design, 3, &row(len as f64)))
            }
            _ => None,
        }
    }

    fn step(&self, history: &[f64], weights: Option<&[f64]>) -> f64 {
        let n = history.len();
        match self.kind {
            PredictorKind::Persistence => history[n - 1],
            PredictorKind::Mean => history.iter().sum::<f64>() / n as f64,
            PredictorKind::Ar | PredictorKind::PooledGlobal => self
                .params
                .iter()
                .enumerate()
                .map(|(lag, a)| a * history[n - 1 - lag])
                .sum(),
            PredictorKind::LinearTrend | PredictorKind::SineFit => weights
                .expect("linear kinds carry weights")
                .iter()
                .zip(history)
                .map(|(w, x)| w * x)
                .sum(),
        }
    }

    /// Recursive `steps`-ahead forecast of one cell from its most recent `input_len` values.
    pub fn forecast_series(&self, history: &[f64], steps: usize) -> Result<Vec<f64>> {
        self.forecaster().forecast(history, steps)
    }

    /// Per-cell forecaster with any window weights precomputed.
    pub fn forecaster(&self) -> Forecaster<'_> {
        Forecaster {
            meta: self,
            weights: self.window_weights(self.input_len),
        }
    }
}

pub struct Forecaster<'a> {
    meta: &'a PredictorMeta,
    weights: Option<Vec<f64>>,
}

impl Forecaster<'_> {
    pub fn forecast(&self, history: &[f64], steps: usize) -> Result<Vec<f64>> {
        let len = self.meta.input_len;
        if history.len() != len {
            return Err(Error::shape(format!(
                "predictor `{}` expects {} steps of history, got {}",
                self.meta.id,
                len,
                history.len()
            )));
        }
        let mut buf = history.to_vec();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let next = self.meta.step(&buf[buf.len() - len..], self.weights.as_deref());
            out.push(next);
            buf.push(next);
        }
        Ok(out)
    }
}

/// One-step-ahead `h x w` prediction from a `j x h x w` block.
pub fn predict(meta: &PredictorMeta, input: &InputBlock) -> Result<Frame> {
    if input.len != meta.input_len || input.rows != meta.input_rows || input.cols != meta.input_cols {
        return Err(Error::shape(format!(
            "predictor `{}` takes {}x{}x{} input, got {}x{}x{}",
            meta.id, meta.input_len, meta.input_rows, meta.input_cols, input.len, input.rows, input.cols
        )));
    }
    if input.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::shape(format!("non-finite input to predictor `{}`", meta.id)));
    }
    let fc = meta.forecaster();
    let mut history = vec![0.0; input.len];
    let mut out = Vec::with_capacity(input.rows * input.cols);
    for r in 0..input.rows {
        for c in 0..input.cols {
            for (t, h) in history.iter_mut().enumerate() {
                *h = input.get(t, r, c);
            }
            out.push(meta.step(&history, fc.weights.as_deref()));
        }
    }
    Frame::new(GridShape::new(input.rows, input.cols)?, out, input.last_tick + 1)
}

/// Everything needed to fit one predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorSpec {
    pub id: String,
    pub kind: PredictorKind,
    #[serde(default = "one")]
    pub input_rows: usize,
    #[serde(default = "one")]
    pub input_cols: usize,
    pub input_len: usize,
    /// AR order for `ar` and `pooled_global`.
    #[serde(default)]
    pub order: Option<usize>,
    /// Cycles per tick for `sine_fit`.
    #[serde(default)]
    pub frequency: Option<f64>,
    /// One or more regions; the pooled model usually spans several.
    pub training_regions: Vec<RegionRect>,
    pub training_interval: (i64, i64),
}

fn one() -> usize {
    1
}

/// Pools lagged pairs from every series and fits AR coefficients by least squares.
fn fit_ar(series: &[CellSeries], order: usize) -> Result<Vec<f64>> {
    let mut design = Vec::new();
    let mut y = Vec::new();
    for s in series {
        for t in order..s.len() {
            design.extend((1..=order).map(|lag| s.values[t - lag]));
            y.push(s.values[t]);
        }
    }
    least_squares(&design, order, &y)
}

/// Fits a predictor on training series; ticks within each series start at 0.
pub fn fit_predictor(spec: &PredictorSpec, training: &[CellSeries]) -> Result<PredictorMeta> {
    if training.is_empty() {
        return Err(Error::fit(format!("no training data for `{}`", spec.id), f64::NAN));
    }
    let params = match spec.kind {
        PredictorKind::Persistence => vec![],
        PredictorKind::Mean => {
            let n: usize = training.iter().map(|s| s.len()).sum();
            vec![training.iter().flat_map(|s| &s.values).sum::<f64>() / n.max(1) as f64]
        }
        PredictorKind::Ar | PredictorKind::PooledGlobal => {
            let order = spec.order.unwrap_or(DEFAULT_AR_ORDER);
            if order == 0 || order > spec.input_len {
                return Err(Error::config(format!(
                    "AR order {order} must be in 1..={} for `{}`",
                    spec.input_len, spec.id
                )));
            }
            fit_ar(training, order)?
        }
        PredictorKind::LinearTrend => {
            let mut design = Vec::new();
            let mut y = Vec::new();
            for s in training {
                for (t, v) in s.values.iter().enumerate() {
                    design.extend([t as f64, 1.0]);
                    y.push(*v);
                }
            }
            least_squares(&design, 2, &y)?
        }
        PredictorKind::SineFit => {
            let freq = spec
                .frequency
                .ok_or_else(|| Error::config(format!("sine_fit `{}` needs a frequency", spec.id)))?;
            let omega = TAU * freq;
            let mut design = Vec::new();
            let mut y = Vec::new();
            for s in training {
                for (t, v) in s.values.iter().enumerate() {
                    let t = t as f64;
                    design.extend([1.0, (omega * t).sin(), (omega * t).cos()]);
                    y.push(*v);
                }
            }
            let mut p = vec![freq];
            p.extend(least_squares(&design, 3, &y)?);
            p
        }
    };
    let training_region = bounding_rect(&spec.training_regions)
        .ok_or_else(|| Error::config(format!("`{}` declares no training region", spec.id)))?;
    let meta = PredictorMeta {
        id: spec.id.clone(),
        kind: spec.kind,
        input_rows: spec.input_rows,
        input_cols: spec.input_cols,
        input_len: spec.input_len,
        params,
        training_region,
        training_interval: spec.training_interval,
    };
    meta.validate()?;
    Ok(meta)
}

fn bounding_rect(rects: &[RegionRect]) -> Option<RegionRect> {
    let first = rects.first()?;
    let (mut r0, mut c0, mut r1, mut c1) = (first.row0, first.col0, first.row_end(), first.col_end());
    for r in &rects[1..] {
        r0 = r0.min(r.row0);
        c0 = c0.min(r.col0);
        r1 = r1.max(r.row_end());
        c1 = c1.max(r.col_end());
    }
    Some(RegionRect {
        row0: r0,
        col0: c0,
        height: r1 - r0,
        width: c1 - c0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub meta: PredictorMeta,
    pub eef: Option<ErrorEstimationFunction>,
}

/// The set of available predictors with their error estimation functions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelRegistry {
    entries: Vec<RegistryEntry>,
}

impl ModelRegistry {
    pub fn new(entries: Vec<RegistryEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            e.meta.validate()?;
            if !seen.insert(e.meta.id.as_str()) {
                return Err(Error::Validation(format!("duplicate predictor id `{}`", e.meta.id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.meta.id == id)
    }

    pub fn push(&mut self, entry: RegistryEntry) -> Result<()> {
        if self.get(&entry.meta.id).is_some() {
            return Err(Error::Validation(format!("duplicate predictor id `{}`", entry.meta.id)));
        }
        entry.meta.validate()?;
        self.entries.push(entry);
        Ok(())
    }

    /// Entries sorted by id.
    pub fn sorted(&self) -> Vec<&RegistryEntry> {
        let mut v: Vec<_> = self.entries.iter().collect();
        v.sort_by(|a, b| a.meta.id.cmp(&b.meta.id));
        v
    }

    pub fn to_json(&self) -> String {
        let records: Vec<ManifestRecord> = self.entries.iter().map(ManifestRecord::from).collect();
        let mut s = serde_json::to_string_pretty(&records).expect("manifest records serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let records: Vec<ManifestRecord> = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.to_string();
            let field = backticked(&msg).filter(|_| msg.contains("field")).map_or(path.clone(), |f| {
                if path.is_empty() || path == "." {
                    f
                } else {
                    format!("{path}.{f}")
                }
            });
            Error::Parse { field, message: msg }
        })?;
        Self::new(records.into_iter().map(RegistryEntry::from).collect())
    }
}

fn backticked(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

pub fn registry_load(path: impl AsRef<Path>) -> Result<ModelRegistry> {
    let text = std::fs::read_to_string(path)?;
    ModelRegistry::from_json(&text)
}

pub fn registry_save(registry: &ModelRegistry, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, registry.to_json())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRect {
    row0: usize,
    col0: usize,
    height: usize,
    width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEef {
    degree: usize,
    coefficients: Vec<f64>,
    cv_rmse: f64,
    centroid: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    references: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    kind: PredictorKind,
    input_rows: usize,
    input_cols: usize,
    input_len: usize,
    params: Vec<f64>,
    training_region: ManifestRect,
    training_interval: [i64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eef: Option<ManifestEef>,
}

impl From<&RegistryEntry> for ManifestRecord {
    fn from(e: &RegistryEntry) -> Self {
        let m = &e.meta;
        ManifestRecord {
            id: m.id.clone(),
            kind: m.kind,
            input_rows: m.input_rows,
            input_cols: m.input_cols,
            input_len: m.input_len,
            params: m.params.clone(),
            training_region: ManifestRect {
                row0: m.training_region.row0,
                col0: m.training_region.col0,
                height: m.training_region.height,
                width: m.training_region.width,
            },
            training_interval: [m.training_interval.0, m.training_interval.1],
            eef: e.eef.as_ref().map(|f| ManifestEef {
                degree: f.degree,
                coefficients: f.coefficients.clone(),
                cv_rmse: f.cv_rmse,
                centroid: f.centroid.clone(),
                max_distance: Some(f.max_distance),
                references: f.references.clone(),
            }),
        }
    }
}

impl From<ManifestRecord> for RegistryEntry {
    fn from(r: ManifestRecord) -> Self {
        RegistryEntry {
            meta: PredictorMeta {
                id: r.id,
                kind: r.kind,
                input_rows: r.input_rows,
                input_cols: r.input_cols,
                input_len: r.input_len,
                params: r.params,
                training_region: RegionRect {
                    row0: r.training_region.row0,
                    col0: r.training_region.col0,
                    height: r.training_region.height,
                    width: r.training_region.width,
                },
                training_interval: (r.training_interval[0], r.training_interval[1]),
            },
            eef: r.eef.map(|e| ErrorEstimationFunction {
                degree: e.degree,
                coefficients: e.coefficients,
                cv_rmse: e.cv_rmse,
                centroid: e.centroid,
                max_distance: e.max_distance.unwrap_or(f64::INFINITY),
                references: e.references,
            }),
        }
    }
}
