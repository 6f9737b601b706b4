//! Per-tile model selection, placement, execution and the continuous query loop.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_points, ClusterState, ClusteringConfig};
use crate::error::{Error, Result};
use crate::grid::{extract_cell_series, extract_region_series, rmse, DataWindow, Frame, GridShape, QuerySpec, RegionRect, SeriesMetric};
use crate::predictors::{predict, InputBlock, ModelRegistry, PredictorMeta};
use crate::representation::{reduce_all, Reduction};
use crate::tiling::{tile, tile_medoids, Tile, TilePlan, TilingMethod, DEFAULT_PURITY};

/// One invocation of a predictor inside a tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub tile_id: usize,
    pub predictor_id: String,
    pub target_rect: RegionRect,
    pub pad_rows: usize,
    pub pad_cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub predictor_id: String,
    pub estimate: f64,
    /// Whether the medoid lies beyond the predictor's calibrated distance range.
    pub extrapolating: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePlan {
    pub tick: i64,
    pub tile_plan: TilePlan,
    pub selections: Vec<Selection>,
    pub placements: Vec<Placement>,
}

impl EnsemblePlan {
    /// Builds a plan from explicit per-tile choices.
    pub fn with_selections(tick: i64, tile_plan: TilePlan, selections: Vec<Selection>, registry: &ModelRegistry) -> Result<Self> {
        if selections.len() != tile_plan.tiles.len() {
            return Err(Error::config(format!(
                "{} selections for {} tiles",
                selections.len(),
                tile_plan.tiles.len()
            )));
        }
        let mut placements = Vec::new();
        for (id, (t, s)) in tile_plan.tiles.iter().zip(&selections).enumerate() {
            let meta = lookup(registry, &s.predictor_id)?;
            placements.extend(place_in_tile(id, t, meta));
        }
        Ok(Self {
            tick,
            tile_plan,
            selections,
            placements,
        })
    }

    /// One tile over `region` served by a single predictor.
    pub fn single(tick: i64, region: RegionRect, predictor_id: &str, registry: &ModelRegistry) -> Result<Self> {
        let plan = TilePlan {
            tiles: vec![Tile {
                rect: region,
                majority_cluster: 0,
                purity: 1.0,
                medoid_cell: None,
            }],
            region,
            threshold: 1.0,
        };
        let sel = Selection {
            predictor_id: predictor_id.to_string(),
            estimate: f64::NAN,
            extrapolating: false,
        };
        Self::with_selections(tick, plan, vec![sel], registry)
    }
}

fn lookup<'a>(registry: &'a ModelRegistry, id: &str) -> Result<&'a PredictorMeta> {
    registry
        .get(id)
        .map(|e| &e.meta)
        .ok_or_else(|| Error::config(format!("predictor `{id}` is not registered")))
}

/// Lays `meta`'s input footprint over the tile from its top-left corner.
pub fn place_in_tile(tile_id: usize, tile: &Tile, meta: &PredictorMeta) -> Vec<Placement> {
    let (h, w) = (meta.input_rows.max(1), meta.input_cols.max(1));
    let rect = tile.rect;
    let mut out = Vec::new();
    for r0 in (rect.row0..rect.row_end()).step_by(h) {
        for c0 in (rect.col0..rect.col_end()).step_by(w) {
            let height = h.min(rect.row_end() - r0);
            let width = w.min(rect.col_end() - c0);
            out.push(Placement {
                tile_id,
                predictor_id: meta.id.clone(),
                target_rect: RegionRect {
                    row0: r0,
                    col0: c0,
                    height,
                    width,
                },
                pad_rows: h - height,
                pad_cols: w - width,
            });
        }
    }
    out
}

fn check_window_len(registry: &ModelRegistry, window: &DataWindow) -> Result<()> {
    for e in registry.entries() {
        if e.meta.input_len != window.len() {
            return Err(Error::config(format!(
                "predictor `{}` takes {} frames but windows hold {}",
                e.meta.id,
                e.meta.input_len,
                window.len()
            )));
        }
    }
    Ok(())
}

/// Picks, per tile, the registered predictor with the lowest estimated error
/// on the tile's medoid series. Ties go to the smallest id.
pub fn compose_ensemble(tile_plan: TilePlan, window: &DataWindow, registry: &ModelRegistry) -> Result<EnsemblePlan> {
    if registry.is_empty() {
        return Err(Error::config("cannot compose an ensemble from an empty registry"));
    }
    check_window_len(registry, window)?;
    let candidates = registry.sorted();
    let mut selections = Vec::with_capacity(tile_plan.tiles.len());
    for (i, t) in tile_plan.tiles.iter().enumerate() {
        let (row, col) = t
            .medoid_cell
            .ok_or_else(|| Error::config(format!("tile {i} has no medoid")))?;
        let medoid = extract_cell_series(window, row, col)?;
        let mut best: Option<Selection> = None;
        for e in &candidates {
            let eef = e
                .eef
                .as_ref()
                .ok_or_else(|| Error::config(format!("predictor `{}` has no error estimation function", e.meta.id)))?;
            let dist = eef.distance_to(&medoid.values)?;
            let estimate = eef.evaluate(dist);
            if best.as_ref().is_none_or(|b| estimate < b.estimate) {
                best = Some(Selection {
                    predictor_id: e.meta.id.clone(),
                    estimate,
                    extrapolating: eef.is_extrapolating(dist),
                });
            }
        }
        selections.push(best.expect("registry is nonempty"));
    }
    EnsemblePlan::with_selections(window.end_tick(), tile_plan, selections, registry)
}

fn run_placement(p: &Placement, meta: &PredictorMeta, window: &DataWindow) -> Result<Frame> {
    let (h, w) = (meta.input_rows, meta.input_cols);
    let t = p.target_rect;
    let mut values = Vec::with_capacity(window.len() * h * w);
    for k in 0..window.len() {
        for r in 0..h {
            for c in 0..w {
                // padding repeats the last data row / column
                let row = t.row0 + r.min(t.height - 1);
                let col = t.col0 + c.min(t.width - 1);
                values.push(window.value(k, row, col));
            }
        }
    }
    let input = InputBlock::new(window.len(), h, w, values, window.end_tick())?;
    predict(meta, &input)
}

/// Runs every placement and stitches the outputs into a frame over the plan's region.
pub fn execute_plan(plan: &EnsemblePlan, window: &DataWindow, registry: &ModelRegistry) -> Result<Frame> {
    let region = plan.tile_plan.region;
    if !region.fits_in(window.shape()) {
        return Err(Error::shape(format!("plan region {region:?} exceeds the window grid")));
    }
    let mut out = vec![f64::NAN; region.area()];
    let mut written = vec![false; region.area()];
    for (i, p) in plan.placements.iter().enumerate() {
        let meta = lookup(registry, &p.predictor_id)?;
        let frame = run_placement(p, meta, window).map_err(|e| {
            Error::shape(format!(
                "tile {} placement {i} ({} at {:?}): {e}",
                p.tile_id, p.predictor_id, p.target_rect
            ))
        })?;
        for (row, col) in p.target_rect.cells() {
            let idx = (row - region.row0) * region.width + col - region.col0;
            if std::mem::replace(&mut written[idx], true) {
                return Err(Error::Validation(format!("cell ({row}, {col}) written twice")));
            }
            out[idx] = frame.get(row - p.target_rect.row0, col - p.target_rect.col0);
        }
    }
    if let Some(gap) = written.iter().position(|w| !w) {
        return Err(Error::Validation(format!(
            "cell ({}, {}) is not covered by any placement",
            region.row0 + gap / region.width,
            region.col0 + gap % region.width
        )));
    }
    Frame::new(GridShape::new(region.height, region.width)?, out, window.end_tick() + 1)
}

/// Shifts the window one tick, writing `pred` over `region` on a copy of the last frame.
fn roll(window: &DataWindow, region: RegionRect, pred: &Frame) -> Result<DataWindow> {
    let last = window.last();
    let shape = last.shape();
    let mut values = last.values().to_vec();
    for (row, col) in region.cells() {
        values[row * shape.cols + col] = pred.get(row - region.row0, col - region.col0);
    }
    let mut frames = window.frames()[1..].to_vec();
    frames.push(Frame::new(shape, values, last.timestamp() + 1)?);
    DataWindow::new(frames)
}

/// Recursive multi-step execution: step `s` consumes the predictions of steps before it.
pub fn execute_horizon(plan: &EnsemblePlan, window: &DataWindow, registry: &ModelRegistry, horizon: usize) -> Result<Vec<Frame>> {
    let mut frames = Vec::with_capacity(horizon);
    let mut current = window.clone();
    for step in 0..horizon {
        let pred = execute_plan(plan, &current, registry)?;
        if step + 1 < horizon {
            current = roll(&current, plan.tile_plan.region, &pred)?;
        }
        frames.push(pred);
    }
    Ok(frames)
}

/// Pooled RMSE of predicted frames against the truth cropped to `region`.
pub fn horizon_rmse(preds: &[Frame], truth: &[Frame], region: &RegionRect) -> Result<f64> {
    if preds.len() != truth.len() || preds.is_empty() {
        return Err(Error::shape("prediction and truth horizons differ"));
    }
    let mut sq = 0.0;
    for (p, t) in preds.iter().zip(truth) {
        sq += rmse(p, &t.crop(region)?)?.powi(2);
    }
    Ok((sq / preds.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub clustering: ClusteringConfig,
    pub tiling: TilingMethod,
    pub purity: f64,
    pub reduction: Reduction,
    pub medoid_metric: SeriesMetric,
    /// Record wall-clock stage timings; when off every timing reads 0.
    pub timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            clustering: ClusteringConfig::default(),
            tiling: TilingMethod::default(),
            purity: DEFAULT_PURITY,
            reduction: Reduction::default(),
            medoid_metric: SeriesMetric::default(),
            timings: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub represent: f64,
    pub cluster: f64,
    pub tile: f64,
    pub compose: f64,
    pub execute: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.represent + self.cluster + self.tile + self.compose + self.execute
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileReport {
    pub rect: RegionRect,
    pub purity: f64,
    pub predictor: String,
    /// Estimated error; absent for strategies that do not consult the estimators.
    pub estimate: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub extrapolating: bool,
}

/// Per-tile report rows of a plan, in tile order.
pub fn tile_reports(plan: &EnsemblePlan) -> Vec<TileReport> {
    plan.tile_plan
        .tiles
        .iter()
        .zip(&plan.selections)
        .map(|(t, s)| TileReport {
            rect: t.rect,
            purity: t.purity,
            predictor: s.predictor_id.clone(),
            estimate: s.estimate.is_finite().then_some(s.estimate),
            extrapolating: s.extrapolating,
        })
        .collect()
}

/// One line of the per-window report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub tick: i64,
    pub rmse: f64,
    pub elapsed_ms: StageTimings,
    pub tiles: Vec<TileReport>,
    pub silhouette: Option<f64>,
    pub k: usize,
}

impl WindowReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("reports serialize")
    }
}

pub fn reports_to_jsonl(reports: &[WindowReport]) -> String {
    reports.iter().map(|r| r.to_json_line() + "\n").collect()
}

struct Stopwatch {
    on: bool,
    at: Instant,
}

impl Stopwatch {
    fn new(on: bool) -> Self {
        Self { on, at: Instant::now() }
    }

    fn lap(&mut self) -> f64 {
        if !self.on {
            return 0.0;
        }
        let now = Instant::now();
        let ms = (now - self.at).as_secs_f64() * 1e3;
        self.at = now;
        ms
    }
}

/// Tumbling-window driver: yields `(window, truth frames)` pairs.
///
/// A window is produced only when its `horizon` truth frames are available;
/// a stream that ends earlier simply stops.
pub struct TumblingWindows<I> {
    frames: I,
    buffer: VecDeque<Frame>,
    window_len: usize,
    horizon: usize,
    shape: Option<GridShape>,
}

impl<I: Iterator<Item = Frame>> TumblingWindows<I> {
    pub fn new(frames: I, window_len: usize, horizon: usize) -> Self {
        Self {
            frames,
            buffer: VecDeque::new(),
            window_len,
            horizon,
            shape: None,
        }
    }
}

impl<I: Iterator<Item = Frame>> Iterator for TumblingWindows<I> {
    type Item = Result<(DataWindow, Vec<Frame>)>;

    fn next(&mut self) -> Option<Self::Item> {
        while self.buffer.len() < self.window_len + self.horizon {
            let f = self.frames.next()?;
            let shape = *self.shape.get_or_insert(f.shape());
            if f.shape() != shape {
                return Some(Err(Error::Stream(format!(
                    "frame at tick {} has shape {}x{}, stream started as {}x{}",
                    f.timestamp(),
                    f.shape().rows,
                    f.shape().cols,
                    shape.rows,
                    shape.cols
                ))));
            }
            self.buffer.push_back(f);
        }
        let frames: Vec<Frame> = self.buffer.drain(..self.window_len).collect();
        let truth: Vec<Frame> = self.buffer.iter().take(self.horizon).cloned().collect();
        Some(DataWindow::new(frames).map(|w| (w, truth)))
    }
}

/// Number of windows `TumblingWindows` yields for a stream of `ticks` frames.
pub fn window_count(ticks: usize, window_len: usize, horizon: usize) -> usize {
    if window_len == 0 || ticks < window_len + horizon {
        return 0;
    }
    (ticks - horizon) / window_len
}

fn validate_query(query: &QuerySpec, registry: &ModelRegistry, config: &PipelineConfig) -> Result<()> {
    if registry.is_empty() {
        return Err(Error::config("the registry is empty"));
    }
    if !(config.purity > 0.0 && config.purity <= 1.0) {
        return Err(Error::config(format!("purity threshold {} outside (0, 1]", config.purity)));
    }
    config.clustering.validate()?;
    for e in registry.entries() {
        if e.meta.input_len != query.window_len {
            return Err(Error::config(format!(
                "predictor `{}` takes {} frames, the query window is {}",
                e.meta.id, e.meta.input_len, query.window_len
            )));
        }
    }
    Ok(())
}

/// Carries clustering state across windows of one query.
pub struct QueryRunner<'a> {
    query: QuerySpec,
    registry: &'a ModelRegistry,
    config: PipelineConfig,
    state: ClusterState,
}

impl<'a> QueryRunner<'a> {
    pub fn new(query: QuerySpec, registry: &'a ModelRegistry, config: PipelineConfig) -> Result<Self> {
        validate_query(&query, registry, &config)?;
        Ok(Self {
            query,
            registry,
            config,
            state: ClusterState::default(),
        })
    }

    /// Plans one window; returns the plan, stage timings so far, silhouette and k.
    pub fn plan(&mut self, window: &DataWindow) -> Result<(EnsemblePlan, StageTimings, Option<f64>, usize)> {
        let region = self.query.region;
        if !region.fits_in(window.shape()) {
            return Err(Error::config(format!(
                "query region {region:?} does not fit the {}x{} grid",
                window.shape().rows,
                window.shape().cols
            )));
        }
        let mut timings = StageTimings::default();
        let mut sw = Stopwatch::new(self.config.timings);
        let series = extract_region_series(window, &region)?;
        let points = reduce_all(&series, self.config.reduction, self.config.clustering.seed)?;
        timings.represent = sw.lap();
        let outcome = cluster_points(&points, region, &self.config.clustering, &mut self.state)?;
        timings.cluster = sw.lap();
        let plan = tile(self.config.tiling, &outcome.labels, region, self.config.purity)?;
        let plan = tile_medoids(plan, window, self.config.medoid_metric)?;
        timings.tile = sw.lap();
        let ensemble = compose_ensemble(plan, window, self.registry)?;
        timings.compose = sw.lap();
        Ok((ensemble, timings, outcome.silhouette, outcome.labels.k()))
    }

    pub fn step(&mut self, window: &DataWindow, truth: &[Frame]) -> Result<WindowReport> {
        let (plan, mut timings, silhouette, k) = self.plan(window)?;
        let mut sw = Stopwatch::new(self.config.timings);
        let preds = execute_horizon(&plan, window, self.registry, self.query.horizon)?;
        timings.execute = sw.lap();
        let rmse = horizon_rmse(&preds, truth, &self.query.region)?;
        let tiles = tile_reports(&plan);
        Ok(WindowReport {
            tick: window.end_tick(),
            rmse,
            elapsed_ms: timings,
            tiles,
            silhouette,
            k,
        })
    }
}

/// Runs the full pipeline over every tumbling window of the stream.
pub fn run_continuous_query(
    query: &QuerySpec,
    stream: impl IntoIterator<Item = Frame>,
    registry: &ModelRegistry,
    config: &PipelineConfig,
) -> Result<Vec<WindowReport>> {
    let mut runner = QueryRunner::new(*query, registry, config.clone())?;
    let mut reports = Vec::new();
    for item in TumblingWindows::new(stream.into_iter(), query.window_len, query.horizon) {
        let (window, truth) = item?;
        reports.push(runner.step(&window, &truth)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eef::ErrorEstimationFunction;
    use crate::predictors::{PredictorKind, RegistryEntry};
    use proptest::prelude::*;

    fn meta(id: &str, kind: PredictorKind, rows: usize, cols: usize, len: usize, params: Vec<f64>) -> PredictorMeta {
        PredictorMeta {
            id: id.into(),
            kind,
            input_rows: rows,
            input_cols: cols,
            input_len: len,
            params,
            training_region: RegionRect::new(0, 0, 1, 1).unwrap(),
            training_interval: (0, 0),
        }
    }

    fn flat_eef(value: f64) -> ErrorEstimationFunction {
        ErrorEstimationFunction {
            degree: 1,
            coefficients: vec![value, 0.0],
            cv_rmse: 0.0,
            centroid: vec![0.0; 3],
            max_distance: 1.0,
            references: Vec::new(),
        }
    }

    fn entry(m: PredictorMeta, est: f64) -> RegistryEntry {
        RegistryEntry {
            meta: m,
            eef: Some(flat_eef(est)),
        }
    }

    fn window(rows: usize, cols: usize, len: usize, f: impl Fn(usize, usize, usize) -> f64) -> DataWindow {
        let shape = GridShape::new(rows, cols).unwrap();
        DataWindow::new(
            (0..len)
                .map(|t| Frame::new(shape, (0..rows * cols).map(|i| f(t, i / cols, i % cols)).collect(), t as i64).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn tile_at(rect: RegionRect) -> Tile {
        Tile {
            rect,
            majority_cluster: 0,
            purity: 1.0,
            medoid_cell: Some((rect.row0, rect.col0)),
        }
    }

    fn one_tile_plan(rect: RegionRect) -> TilePlan {
        TilePlan {
            tiles: vec![tile_at(rect)],
            region: rect,
            threshold: 1.0,
        }
    }

    #[test]
    fn placement_examples() {
        let m3 = meta("m", PredictorKind::Persistence, 3, 3, 3, vec![]);
        let t = |h, w| tile_at(RegionRect::new(0, 0, h, w).unwrap());
        let p = place_in_tile(0, &t(3, 3), &m3);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].pad_rows, p[0].pad_cols), (0, 0));
        let p = place_in_tile(0, &t(5, 5), &m3);
        assert_eq!(p.len(), 4);
        assert_eq!((p[0].pad_rows, p[0].pad_cols), (0, 0));
        assert_eq!((p[1].pad_rows, p[1].pad_cols), (0, 1));
        assert_eq!((p[2].pad_rows, p[2].pad_cols), (1, 0));
        assert_eq!((p[3].pad_rows, p[3].pad_cols), (1, 1));
        assert_eq!(p[3].target_rect, RegionRect::new(3, 3, 2, 2).unwrap());
        let p = place_in_tile(0, &t(2, 2), &m3);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].pad_rows, p[0].pad_cols), (1, 1));
    }

    proptest! {
        #[test]
        fn placements_partition_the_tile(h in 1usize..12, w in 1usize..12, mh in 1usize..5, mw in 1usize..5) {
            let m = meta("m", PredictorKind::Persistence, mh, mw, 3, vec![]);
            let rect = RegionRect::new(2, 1, h, w).unwrap();
            let ps = place_in_tile(7, &tile_at(rect), &m);
            let mut seen = vec![0; h * w];
            for p in &ps {
                prop_assert!(p.pad_rows < mh && p.pad_cols < mw);
                prop_assert_eq!(p.target_rect.height + p.pad_rows, mh);
                prop_assert_eq!(p.target_rect.width + p.pad_cols, mw);
                for (r, c) in p.target_rect.cells() {
                    seen[(r - 2) * w + c - 1] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn compose_picks_lowest_estimate_and_breaks_ties_by_id() {
        let w = window(2, 2, 3, |t, _, _| t as f64);
        let rect = RegionRect::new(0, 0, 2, 2).unwrap();
        let reg = ModelRegistry::new(vec![
            entry(meta("b", PredictorKind::Persistence, 1, 1, 3, vec![]), 1.0),
            entry(meta("a", PredictorKind::Persistence, 1, 1, 3, vec![]), 2.0),
        ])
        .unwrap();
        let plan = compose_ensemble(one_tile_plan(rect), &w, &reg).unwrap();
        assert_eq!(plan.selections[0].predictor_id, "b");
        assert_eq!(plan.selections[0].estimate, 1.0);
        let tied = ModelRegistry::new(vec![
            entry(meta("b", PredictorKind::Persistence, 1, 1, 3, vec![]), 1.0),
            entry(meta("a", PredictorKind::Persistence, 1, 1, 3, vec![]), 1.0),
        ])
        .unwrap();
        assert_eq!(compose_ensemble(one_tile_plan(rect), &w, &tied).unwrap().selections[0].predictor_id, "a");
        let empty = ModelRegistry::new(vec![]).unwrap();
        assert!(compose_ensemble(one_tile_plan(rect), &w, &empty).unwrap_err().is_config());
        let no_eef = ModelRegistry::new(vec![RegistryEntry {
            meta: meta("a", PredictorKind::Persistence, 1, 1, 3, vec![]),
            eef: None,
        }])
        .unwrap();
        assert!(compose_ensemble(one_tile_plan(rect), &w, &no_eef).is_err());
    }

    #[test]
    fn execution_examples() {
        let w = window(4, 5, 3, |t, r, c| (t * 100 + r * 10 + c) as f64);
        let region = RegionRect::new(1, 1, 3, 4).unwrap();
        let reg = ModelRegistry::new(vec![
            entry(meta("p", PredictorKind::Persistence, 2, 3, 3, vec![]), 0.0),
            entry(meta("zero", PredictorKind::Ar, 1, 1, 3, vec![0.0]), 0.0),
            entry(meta("two", PredictorKind::Persistence, 2, 2, 3, vec![]), 0.0),
        ])
        .unwrap();
        let plan = EnsemblePlan::single(w.end_tick(), region, "p", &reg).unwrap();
        let out = execute_plan(&plan, &w, &reg).unwrap();
        assert_eq!(out, w.last().crop(&region).unwrap().with_timestamp(w.end_tick() + 1));

        let left = RegionRect::new(1, 1, 3, 2).unwrap();
        let right = RegionRect::new(1, 3, 3, 2).unwrap();
        let tp = TilePlan {
            tiles: vec![tile_at(left), tile_at(right)],
            region,
            threshold: 1.0,
        };
        let sels = ["zero", "two"]
            .iter()
            .map(|id| Selection {
                predictor_id: id.to_string(),
                estimate: 0.0,
                extrapolating: false,
            })
            .collect();
        let plan = EnsemblePlan::with_selections(2, tp, sels, &reg).unwrap();
        let twos = window(4, 5, 3, |_, _, _| 2.0);
        let out = execute_plan(&plan, &twos, &reg).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(out.get(r, c), if c < 2 { 0.0 } else { 2.0 });
            }
        }

        let flat = window(4, 5, 3, |_, _, _| 7.0);
        let padded = EnsemblePlan::single(2, region, "p", &reg).unwrap();
        assert!(padded.placements.iter().any(|p| p.pad_rows > 0 || p.pad_cols > 0));
        let unit = ModelRegistry::new(vec![entry(meta("p", PredictorKind::Persistence, 1, 1, 3, vec![]), 0.0)]).unwrap();
        let exact = EnsemblePlan::single(2, region, "p", &unit).unwrap();
        assert_eq!(execute_plan(&padded, &flat, &reg).unwrap(), execute_plan(&exact, &flat, &unit).unwrap());
    }

    #[test]
    fn placement_order_does_not_matter() {
        let w = window(6, 6, 3, |t, r, c| ((t + 1) * (r + 2) * (c + 3)) as f64 * 0.37);
        let region = RegionRect::new(0, 0, 6, 6).unwrap();
        let reg = ModelRegistry::new(vec![entry(meta("ar", PredictorKind::Ar, 2, 2, 3, vec![0.5, 0.3, 0.1]), 0.0)]).unwrap();
        let mut plan = EnsemblePlan::single(2, region, "ar", &reg).unwrap();
        let a = execute_plan(&plan, &w, &reg).unwrap();
        plan.placements.reverse();
        let b = execute_plan(&plan, &w, &reg).unwrap();
        assert_eq!(a.values(), b.values());
        plan.placements.pop();
        assert!(execute_plan(&plan, &w, &reg).is_err());
    }

    #[test]
    fn second_step_consumes_first_prediction() {
        let w = window(1, 1, 3, |t, _, _| t as f64);
        let region = RegionRect::new(0, 0, 1, 1).unwrap();
        let reg = ModelRegistry::new(vec![entry(meta("lin", PredictorKind::LinearTrend, 1, 1, 3, vec![1.0, 0.0]), 0.0)]).unwrap();
        let plan = EnsemblePlan::single(2, region, "lin", &reg).unwrap();
        let lin = &reg.get("lin").unwrap().meta;
        let steps = execute_horizon(&plan, &w, &reg, 2).unwrap();
        let direct = lin.forecast_series(&[0.0, 1.0, 2.0], 2).unwrap();
        assert_eq!(steps[0].get(0, 0), direct[0]);
        assert_eq!(steps[1].get(0, 0), direct[1]);
        assert_eq!(steps[1].timestamp(), 4);
    }

    #[test]
    fn tumbling_window_counts() {
        let shape = GridShape::new(1, 1).unwrap();
        let frames = (0..1460).map(|t| Frame::filled(shape, 0.0, t).unwrap());
        assert_eq!(TumblingWindows::new(frames, 24, 1).count(), 60);
        assert_eq!(window_count(1460, 24, 1), 60);
        assert_eq!(window_count(1464, 24, 1), 60);
        assert_eq!(window_count(1465, 24, 1), 61);
        assert_eq!(window_count(10, 24, 1), 0);

        let other = GridShape::new(2, 1).unwrap();
        let drift = (0..30).map(|t| Frame::filled(if t < 20 { shape } else { other }, 0.0, t).unwrap());
        let got: Vec<_> = TumblingWindows::new(drift, 24, 1).collect();
        assert!(matches!(got[0], Err(Error::Stream(_))));
    }
}
