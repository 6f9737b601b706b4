//! Grid and window data model shared by every stage of the pipeline.
//!
//! A [`Frame`] is one `rows x cols` observation matrix at an integer tick, a
//! [`DataWindow`] is a run of consecutive frames, and a [`CellSeries`] is the
//! univariate series of one cell across a window.

use serde::{Deserialize, Serialize};

use crate::eef::dtw;
use crate::error::{Error, Result};

/// Standard deviation below which a series is treated as constant.
pub const ZNORM_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("grid shape {rows}x{cols} has a zero extent")));
        }
        Ok(Self { rows, cols })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row < self.rows && col < self.cols
    }

    pub fn full_rect(&self) -> RegionRect {
        RegionRect {
            row0: 0,
            col0: 0,
            height: self.rows,
            width: self.cols,
        }
    }

    fn check(&self, row: usize, col: usize) -> Result<()> {
        if self.contains(row, col) {
            Ok(())
        } else {
            Err(Error::Coordinate {
                row,
                col,
                rows: self.rows,
                cols: self.cols,
            })
        }
    }
}

/// Axis-aligned rectangle of cells; `row0`/`col0` are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionRect {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl RegionRect {
    pub fn new(row0: usize, col0: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("rect {height}x{width} has a zero extent")));
        }
        Ok(Self {
            row0,
            col0,
            height,
            width,
        })
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn row_end(&self) -> usize {
        self.row0 + self.height
    }

    pub fn col_end(&self) -> usize {
        self.col0 + self.width
    }

    pub fn fits_in(&self, shape: GridShape) -> bool {
        self.height > 0 && self.width > 0 && self.row_end() <= shape.rows && self.col_end() <= shape.cols
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row_end() && col >= self.col0 && col < self.col_end()
    }

    pub fn contains_rect(&self, other: &RegionRect) -> bool {
        other.row0 >= self.row0
            && other.col0 >= self.col0
            && other.row_end() <= self.row_end()
            && other.col_end() <= self.col_end()
    }

    pub fn intersects(&self, other: &RegionRect) -> bool {
        self.row0 < other.row_end()
            && other.row0 < self.row_end()
            && self.col0 < other.col_end()
            && other.col0 < self.col_end()
    }

    /// Cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row0..self.row_end()).flat_map(move |r| (self.col0..self.col_end()).map(move |c| (r, c)))
    }

    pub(crate) fn ensure_in(&self, shape: GridShape) -> Result<()> {
        if self.fits_in(shape) {
            Ok(())
        } else {
            Err(Error::Coordinate {
                row: self.row_end().saturating_sub(1),
                col: self.col_end().saturating_sub(1),
                rows: shape.rows,
                cols: shape.cols,
            })
        }
    }
}

/// One observation matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    shape: GridShape,
    values: Vec<f64>,
    timestamp: i64,
}

impl Frame {
    pub fn new(shape: GridShape, values: Vec<f64>, timestamp: i64) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::shape(format!(
                "frame expects {} values for {}x{}, got {}",
                shape.len(),
                shape.rows,
                shape.cols,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::shape(format!("non-finite value at flat index {i}")));
        }
        Ok(Self {
            shape,
            values,
            timestamp,
        })
    }

    pub fn filled(shape: GridShape, value: f64, timestamp: i64) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()], timestamp)
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn with_timestamp(mut self, timestamp: i64) -> Self {
        self.timestamp = timestamp;
        self
    }

    pub fn timestamp(&self) -> i64 {
        self.timestamp
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.shape.cols + col]
    }

    pub fn try_get(&self, row: usize, col: usize) -> Result<f64> {
        self.shape.check(row, col)?;
        Ok(self.get(row, col))
    }

    /// Copy of the sub-rectangle as a new frame with the same timestamp.
    pub fn crop(&self, rect: &RegionRect) -> Result<Frame> {
        rect.ensure_in(self.shape)?;
        let values = rect.cells().map(|(r, c)| self.get(r, c)).collect();
        Frame::new(GridShape::new(rect.height, rect.width)?, values, self.timestamp)
    }
}

/// `n` consecutive frames ending at tick `t`; the first frame is at `t - n + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataWindow {
    frames: Vec<Frame>,
}

impl DataWindow {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::shape("a data window needs at least one frame"))?;
        let shape = first.shape;
        let start = first.timestamp;
        for (i, f) in frames.iter().enumerate() {
            if f.shape != shape {
                return Err(Error::shape(format!(
                    "frame {i} is {}x{}, window is {}x{}",
                    f.shape.rows, f.shape.cols, shape.rows, shape.cols
                )));
            }
            if f.timestamp != start + i as i64 {
                return Err(Error::shape(format!(
                    "frame {i} has tick {}, expected {}",
                    f.timestamp,
                    start + i as i64
                )));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> GridShape {
        self.frames[0].shape
    }

    pub fn start_tick(&self) -> i64 {
        self.frames[0].timestamp
    }

    /// Tick of the last frame.
    pub fn end_tick(&self) -> i64 {
        self.start_tick() + self.frames.len() as i64 - 1
    }

    /// Value of cell `(row, col)` in the `t`-th frame of the window.
    pub fn value(&self, t: usize, row: usize, col: usize) -> f64 {
        self.frames[t].get(row, col)
    }

    pub fn last(&self) -> &Frame {
        self.frames.last().expect("windows are never empty")
    }
}

/// Univariate series of one cell across a window.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSeries {
    pub row: usize,
    pub col: usize,
    pub values: Vec<f64>,
}

impl CellSeries {
    pub fn new(row: usize, col: usize, values: Vec<f64>) -> Self {
        Self { row, col, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A predictive query: forecast `horizon` frames over `region` from windows of `window_len` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub region: RegionRect,
    pub horizon: usize,
    pub window_len: usize,
}

impl QuerySpec {
    pub fn new(region: RegionRect, horizon: usize, window_len: usize) -> Result<Self> {
        if horizon < 1 {
            return Err(Error::config("query horizon must be at least 1"));
        }
        if window_len < 2 {
            return Err(Error::config("query window length must be at least 2"));
        }
        Ok(Self {
            region,
            horizon,
            window_len,
        })
    }
}

pub fn extract_cell_series(window: &DataWindow, row: usize, col: usize) -> Result<CellSeries> {
    window.shape().check(row, col)?;
    let values = window.frames.iter().map(|f| f.get(row, col)).collect();
    Ok(CellSeries::new(row, col, values))
}

/// Series for every cell of `rect`, row-major.
pub fn extract_region_series(window: &DataWindow, rect: &RegionRect) -> Result<Vec<CellSeries>> {
    rect.ensure_in(window.shape())?;
    Ok(rect
        .cells()
        .map(|(r, c)| CellSeries::new(r, c, window.frames.iter().map(|f| f.get(r, c)).collect()))
        .collect())
}

/// Zero-mean, unit population standard deviation; near-constant input maps to zeros.
pub fn znormalize(series: &[f64]) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::shape("cannot normalize an empty series"));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < ZNORM_EPSILON {
        return Ok(vec![0.0; series.len()]);
    }
    Ok(series.iter().map(|v| (v - mean) / std).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesMetric {
    #[default]
    Euclidean,
    Dtw,
}

impl SeriesMetric {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            SeriesMetric::Euclidean => euclidean(a, b),
            SeriesMetric::Dtw => dtw(a, b, None).unwrap_or(f64::INFINITY),
        }
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Index of the medoid within `series_set`.
///
/// Ties on the summed distance go to the lowest `(row, col)`.
pub fn medoid_index(series_set: &[CellSeries], metric: SeriesMetric) -> Result<usize> {
    if series_set.is_empty() {
        return Err(Error::shape("medoid of an empty set"));
    }
    let len = series_set[0].len();
    if series_set.iter().any(|s| s.len() != len) {
        return Err(Error::shape("medoid members must share one length"));
    }
    let n = series_set.len();
    let mut sums = vec![0.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = metric.distance(&series_set[i].values, &series_set[j].values);
            sums[i] += d;
            sums[j] += d;
        }
    }
    let mut best = 0;
    for i in 1..n {
        let better = sums[i] < sums[best]
            || (sums[i] == sums[best]
                && (series_set[i].row, series_set[i].col) < (series_set[best].row, series_set[best].col));
        if better {
            best = i;
        }
    }
    Ok(best)
}

pub fn medoid_series(series_set: &[CellSeries], metric: SeriesMetric) -> Result<CellSeries> {
    medoid_index(series_set, metric).map(|i| series_set[i].clone())
}

pub fn rmse(pred: &Frame, truth: &Frame) -> Result<f64> {
    if pred.shape != truth.shape {
        return Err(Error::shape(format!(
            "rmse of {}x{} against {}x{}",
            pred.shape.rows, pred.shape.cols, truth.shape.rows, truth.shape.cols
        )));
    }
    let sq: f64 = pred
        .values
        .iter()
        .zip(&truth.values)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((sq / pred.values.len() as f64).sqrt())
}
