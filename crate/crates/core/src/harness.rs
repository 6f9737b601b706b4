//! Experiment harness: synthetic grids, stream files, baseline strategies and
//! comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clustering::ClusteringConfig;
use crate::eef::{fit_eef, NoiseSchedule, DEFAULT_NOISE_FRACTION, DEFAULT_NOISE_LEVELS};
use crate::ensemble::{
    execute_horizon, horizon_rmse, run_continuous_query, tile_reports, EnsemblePlan, PipelineConfig, Selection,
    StageTimings, TileReport, TumblingWindows, WindowReport,
};
use crate::error::{Error, Result};
use crate::grid::{CellSeries, DataWindow, Frame, GridShape, QuerySpec, RegionRect, SeriesMetric};
use crate::predictors::{fit_predictor, ModelRegistry, PredictorKind, PredictorSpec, RegistryEntry};
use crate::representation::Reduction;
use crate::tiling::{Tile, TilePlan, TilingMethod, DEFAULT_PURITY};

pub const STG_MAGIC: &[u8; 4] = b"STG1";
const STG_HEADER_LEN: usize = 16;

pub const DEFAULT_WINDOW: usize = 24;
pub const DEFAULT_LENGTH: usize = 1460;

/// A full gridded stream held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedStream {
    shape: GridShape,
    frames: Vec<Frame>,
}

impl GriddedStream {
    pub fn new(shape: GridShape, frames: Vec<Frame>) -> Result<Self> {
        if let Some(f) = frames.iter().find(|f| f.shape() != shape) {
            return Err(Error::Stream(format!(
                "frame at tick {} is {}x{}, stream is {}x{}",
                f.timestamp(),
                f.shape().rows,
                f.shape().cols,
                shape.rows,
                shape.cols
            )));
        }
        Ok(Self { shape, frames })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
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

    /// Cell series over `[start, end)` for every cell of `rect`, row-major.
    pub fn region_series(&self, rect: &RegionRect, start: usize, end: usize) -> Result<Vec<CellSeries>> {
        if !rect.fits_in(self.shape) {
            return Err(Error::config(format!("region {rect:?} outside the {}x{} grid", self.shape.rows, self.shape.cols)));
        }
        if start >= end || end > self.frames.len() {
            return Err(Error::config(format!(
                "interval [{start}, {end}) outside a stream of {} ticks",
                self.frames.len()
            )));
        }
        Ok(rect
            .cells()
            .map(|(r, c)| CellSeries::new(r, c, self.frames[start..end].iter().map(|f| f.get(r, c)).collect()))
            .collect())
    }
}

/// Serializes a stream: magic, `u32` rows, cols, ticks (little-endian), then `f32` cells.
pub fn stg_to_bytes(stream: &GriddedStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(STG_HEADER_LEN + 4 * stream.shape.len() * stream.len());
    out.extend_from_slice(STG_MAGIC);
    for v in [stream.shape.rows, stream.shape.cols, stream.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for f in &stream.frames {
        for v in f.values() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn stg_from_bytes(bytes: &[u8]) -> Result<GriddedStream> {
    let format = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 4 || &bytes[..4] != STG_MAGIC {
        return Err(format(0, "missing STG1 magic".into()));
    }
    if bytes.len() < STG_HEADER_LEN {
        return Err(format(bytes.len(), "truncated header".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (rows, cols, ticks) = (field(0), field(1), field(2));
    if rows == 0 || cols == 0 {
        return Err(format(4, format!("grid extent {rows}x{cols} has a zero side")));
    }
    let shape = GridShape::new(rows, cols)?;
    let frame_bytes = 4 * rows * cols;
    let expected = STG_HEADER_LEN + frame_bytes * ticks;
    if bytes.len() < expected {
        return Err(format(
            bytes.len(),
            format!("payload truncated, {ticks} frames of {rows}x{cols} need {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(format(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let mut frames = Vec::with_capacity(ticks);
    for t in 0..ticks {
        let at = STG_HEADER_LEN + t * frame_bytes;
        let values = bytes[at..at + frame_bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let frame = Frame::new(shape, values, t as i64).map_err(|e| format(at, e.to_string()))?;
        frames.push(frame);
    }
    GriddedStream::new(shape, frames)
}

pub fn write_stg(stream: &GriddedStream, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, stg_to_bytes(stream)).map_err(Error::from)
}

pub fn read_stg(path: impl AsRef<Path>) -> Result<GriddedStream> {
    stg_from_bytes(&std::fs::read(path)?)
}

/// Parses CSV text holding `ticks * rows` lines of `cols` comma-separated values;
/// each consecutive block of `rows` lines is one frame. Blank lines are skipped.
pub fn parse_csv(text: &str, rows: usize) -> Result<GriddedStream> {
    if rows == 0 {
        return Err(Error::config("csv import needs at least one row per frame"));
    }
    let mut values = Vec::new();
    let mut cols = None;
    let mut lines = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let field = format!("line {}", i + 1);
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim().parse::<f64>().map_err(|e| Error::Parse {
                    field: field.clone(),
                    message: format!("`{}`: {e}", v.trim()),
                })
            })
            .collect::<Result<_>>()?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(Error::Parse {
                field,
                message: format!("{} values, expected {}", row.len(), cols.unwrap_or(0)),
            });
        }
        values.extend(row);
        lines += 1;
    }
    let cols = cols.ok_or_else(|| Error::Parse {
        field: "line 1".into(),
        message: "no data".into(),
    })?;
    if lines % rows != 0 {
        return Err(Error::Parse {
            field: format!("line {lines}"),
            message: format!("{lines} lines do not split into frames of {rows} rows"),
        });
    }
    let shape = GridShape::new(rows, cols)?;
    let frames = values
        .chunks_exact(rows * cols)
        .enumerate()
        .map(|(t, v)| Frame::new(shape, v.to_vec(), t as i64))
        .collect::<Result<_>>()?;
    GriddedStream::new(shape, frames)
}

pub fn import_csv(path: impl AsRef<Path>, rows: usize) -> Result<GriddedStream> {
    parse_csv(&std::fs::read_to_string(path)?, rows)
}

/// Generating pattern of one synthetic region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PatternSpec {
    Linear { slope: f64, intercept: f64 },
    /// `amplitude * sin(2 pi frequency t + phase)`, frequency in cycles per tick.
    Sine { amplitude: f64, frequency: f64, phase: f64 },
    RandomWalk { step_sigma: f64 },
}

impl PatternSpec {
    fn series(&self, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(match *self {
            PatternSpec::Linear { slope, intercept } => (0..len).map(|t| intercept + slope * t as f64).collect(),
            PatternSpec::Sine {
                amplitude,
                frequency,
                phase,
            } => (0..len)
                .map(|t| amplitude * (std::f64::consts::TAU * frequency * t as f64 + phase).sin())
                .collect(),
            PatternSpec::RandomWalk { step_sigma } => {
                let step = Normal::new(0.0, step_sigma).map_err(|e| Error::config(e.to_string()))?;
                let mut x = 0.0;
                (0..len)
                    .map(|t| {
                        if t > 0 {
                            x += step.sample(rng);
                        }
                        x
                    })
                    .collect()
            }
        })
    }

    /// Predictor kind that fits this pattern.
    pub fn specialist_kind(&self) -> PredictorKind {
        match self {
            PatternSpec::Linear { .. } => PredictorKind::LinearTrend,
            PatternSpec::Sine { .. } => PredictorKind::SineFit,
            PatternSpec::RandomWalk { .. } => PredictorKind::Ar,
        }
    }
}

/// Grid of square regions, each driven by one named pattern plus cell noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticGridConfig {
    pub patterns: BTreeMap<String, PatternSpec>,
    /// Pattern name per region, row-major.
    pub layout: Vec<Vec<String>>,
    #[serde(default = "default_region_size")]
    pub region_size: usize,
    #[serde(default = "default_length")]
    pub length: usize,
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_region_size() -> usize {
    5
}

fn default_length() -> usize {
    DEFAULT_LENGTH
}

pub const PRESETS: [&str; 3] = ["grid1", "grid2", "grid3"];

fn preset_patterns() -> BTreeMap<String, PatternSpec> {
    BTreeMap::from([
        ("linear".to_string(), PatternSpec::Linear { slope: 0.5, intercept: 0.0 }),
        (
            "sine_a".to_string(),
            PatternSpec::Sine {
                amplitude: 10.0,
                frequency: 1.0 / 12.0,
                phase: 0.0,
            },
        ),
        (
            "sine_b".to_string(),
            PatternSpec::Sine {
                amplitude: 5.0,
                frequency: 1.0 / 8.0,
                phase: 0.0,
            },
        ),
        ("random_walk".to_string(), PatternSpec::RandomWalk { step_sigma: 1.0 }),
    ])
}

/// Built-in grids.
///
/// `grid1` and `grid2` place the same four patterns (linear, two sines, random
/// walk) in different region layouts; `grid3` uses only linear and the two sines.
pub fn preset(name: &str, seed: u64) -> Result<SyntheticGridConfig> {
    let rows: [[&str; 4]; 4] = match name {
        "grid1" => [
            ["linear", "sine_a", "sine_b", "random_walk"],
            ["sine_a", "sine_b", "random_walk", "linear"],
            ["sine_b", "random_walk", "linear", "sine_a"],
            ["random_walk", "linear", "sine_a", "sine_b"],
        ],
        "grid2" => [
            ["random_walk", "linear", "sine_a", "sine_b"],
            ["sine_b", "random_walk", "linear", "sine_a"],
            ["sine_a", "sine_b", "random_walk", "linear"],
            ["linear", "sine_a", "sine_b", "random_walk"],
        ],
        "grid3" => [
            ["linear", "sine_a", "sine_b", "linear"],
            ["sine_a", "sine_b", "linear", "sine_a"],
            ["sine_b", "linear", "sine_a", "sine_b"],
            ["linear", "sine_a", "sine_b", "linear"],
        ],
        other => {
            return Err(Error::config(format!(
                "unknown preset `{other}`, expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    let mut patterns = preset_patterns();
    if name == "grid3" {
        patterns.remove("random_walk");
    }
    Ok(SyntheticGridConfig {
        patterns,
        layout: rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
        region_size: 5,
        length: DEFAULT_LENGTH,
        noise_sigma: 1.0,
        seed,
    })
}

impl SyntheticGridConfig {
    pub fn validate(&self) -> Result<GridShape> {
        let width = self.layout.first().map_or(0, Vec::len);
        if width == 0 || self.layout.iter().any(|r| r.len() != width) {
            return Err(Error::config("layout must be a non-empty rectangular matrix"));
        }
        if let Some(bad) = self.layout.iter().flatten().find(|n| !self.patterns.contains_key(*n)) {
            return Err(Error::config(format!("layout names unknown pattern `{bad}`")));
        }
        if self.region_size == 0 || self.length == 0 || !(self.noise_sigma >= 0.0) {
            return Err(Error::config("region_size and length must be positive, noise_sigma non-negative"));
        }
        GridShape::new(self.layout.len() * self.region_size, width * self.region_size)
    }

    /// Every region with its pattern name, row-major.
    pub fn regions(&self) -> Vec<(RegionRect, String)> {
        let s = self.region_size;
        self.layout
            .iter()
            .enumerate()
            .flat_map(|(i, row)| {
                row.iter().enumerate().map(move |(j, name)| {
                    (
                        RegionRect {
                            row0: i * s,
                            col0: j * s,
                            height: s,
                            width: s,
                        },
                        name.clone(),
                    )
                })
            })
            .collect()
    }

    /// First region (row-major) generated by `pattern`.
    pub fn first_region(&self, pattern: &str) -> Option<RegionRect> {
        self.regions().into_iter().find(|(_, n)| n == pattern).map(|(r, _)| r)
    }

    pub fn pattern_at(&self, row: usize, col: usize) -> &str {
        &self.layout[row / self.region_size][col / self.region_size]
    }
}

/// Renders the configured grid. Values are rounded to `f32` so files round-trip exactly.
pub fn generate_synthetic(config: &SyntheticGridConfig) -> Result<GriddedStream> {
    let shape = config.validate()?;
    let mut bases = BTreeMap::new();
    for (i, (name, spec)) in config.patterns.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1 + i as u64);
        bases.insert(name.as_str(), spec.series(config.length, &mut rng)?);
    }
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut frames = Vec::with_capacity(config.length);
    for t in 0..config.length {
        let mut values = Vec::with_capacity(shape.len());
        for r in 0..shape.rows {
            for c in 0..shape.cols {
                let base = bases[config.pattern_at(r, c)][t];
                let v = if config.noise_sigma > 0.0 { base + noise.sample(&mut rng) } else { base };
                values.push(v as f32 as f64);
            }
        }
        frames.push(Frame::new(shape, values, t as i64)?);
    }
    GriddedStream::new(shape, frames)
}

/// What `fit` trains: predictor specs plus the noise schedule for their estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub models: Vec<PredictorSpec>,
    #[serde(default = "default_levels")]
    pub noise_levels: usize,
    /// Per-level variance as a fraction of each model's training variance.
    #[serde(default = "default_fraction")]
    pub noise_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_levels() -> usize {
    DEFAULT_NOISE_LEVELS
}

fn default_fraction() -> f64 {
    DEFAULT_NOISE_FRACTION
}

/// Specialist per pattern, a pooled global model and, with `extended`,
/// persistence, mean and a first-order AR.
pub fn preset_fit_config(grid: &SyntheticGridConfig, window_len: usize, interval: (i64, i64), extended: bool) -> Result<FitConfig> {
    let mut models = Vec::new();
    let mut pooled = Vec::new();
    for (name, spec) in &grid.patterns {
        let Some(region) = grid.first_region(name) else {
            continue;
        };
        pooled.push(region);
        models.push(PredictorSpec {
            id: name.clone(),
            kind: spec.specialist_kind(),
            input_rows: 1,
            input_cols: 1,
            input_len: window_len,
            order: None,
            frequency: match spec {
                PatternSpec::Sine { frequency, .. } => Some(*frequency),
                _ => None,
            },
            training_regions: vec![region],
            training_interval: interval,
        });
    }
    if pooled.is_empty() {
        return Err(Error::config("the layout uses no patterns"));
    }
    let simple = |id: &str, kind, order, regions: Vec<RegionRect>| PredictorSpec {
        id: id.to_string(),
        kind,
        input_rows: 1,
        input_cols: 1,
        input_len: window_len,
        order,
        frequency: None,
        training_regions: regions,
        training_interval: interval,
    };
    models.push(simple("global", PredictorKind::PooledGlobal, None, pooled.clone()));
    if extended {
        models.push(simple("persistence", PredictorKind::Persistence, None, pooled.clone()));
        models.push(simple("mean", PredictorKind::Mean, None, pooled.clone()));
        models.push(simple("ar1", PredictorKind::Ar, Some(1), pooled));
    }
    Ok(FitConfig {
        models,
        noise_levels: DEFAULT_NOISE_LEVELS,
        noise_fraction: DEFAULT_NOISE_FRACTION,
        seed: 0,
    })
}

/// Training series of a spec: every cell of every training region over its interval.
pub fn training_series(stream: &GriddedStream, spec: &PredictorSpec) -> Result<Vec<CellSeries>> {
    let (start, end) = spec.training_interval;
    if start < 0 || end <= start {
        return Err(Error::config(format!("`{}` has an empty training interval", spec.id)));
    }
    let mut out = Vec::new();
    for rect in &spec.training_regions {
        out.extend(stream.region_series(rect, start as usize, end as usize)?);
    }
    Ok(out)
}

/// Fits every model and its error estimation function.
pub fn fit_registry(stream: &GriddedStream, config: &FitConfig) -> Result<ModelRegistry> {
    let mut entries = Vec::with_capacity(config.models.len());
    for spec in &config.models {
        let training = training_series(stream, spec)?;
        let meta = fit_predictor(spec, &training)?;
        let schedule = NoiseSchedule::scaled_to(&training, config.noise_levels, config.noise_fraction)?;
        let eef = fit_eef(&meta, &training, &schedule, config.seed)?;
        entries.push(RegistryEntry { meta, eef: Some(eef) });
    }
    ModelRegistry::new(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    #[serde(rename = "stream_ensemble")]
    Ensemble,
    Random,
    Global,
    Average,
    BestOfAll,
    BestFitStatic,
    BestFitDynamic,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Ensemble,
        Strategy::Random,
        Strategy::Global,
        Strategy::Average,
        Strategy::BestOfAll,
        Strategy::BestFitStatic,
        Strategy::BestFitDynamic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Ensemble => "stream_ensemble",
            Strategy::Random => "random",
            Strategy::Global => "global",
            Strategy::Average => "average",
            Strategy::BestOfAll => "best_of_all",
            Strategy::BestFitStatic => "best_fit_static",
            Strategy::BestFitDynamic => "best_fit_dynamic",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy `{s}`")))
    }
}

/// A rectangle served by a fixed predictor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Allocation {
    pub rect: RegionRect,
    pub predictor: String,
}

/// Allocates to every region the predictor named after its pattern.
pub fn best_fit_allocation(grid: &SyntheticGridConfig) -> Vec<Allocation> {
    grid.regions()
        .into_iter()
        .map(|(rect, predictor)| Allocation { rect, predictor })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub clustering: ClusteringConfig,
    pub tiling: TilingMethod,
    pub purity_threshold: f64,
    pub dr: Reduction,
    pub seed: u64,
    /// Predictor used by `global`; defaults to the registry's pooled model.
    pub global_model: Option<String>,
    /// Fixed allocation for the best-fit strategies.
    pub allocation: Vec<Allocation>,
    pub timings: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ensemble,
            clustering: ClusteringConfig::default(),
            tiling: TilingMethod::default(),
            purity_threshold: DEFAULT_PURITY,
            dr: Reduction::default(),
            seed: 0,
            global_model: None,
            allocation: Vec::new(),
            timings: true,
        }
    }
}

impl StrategyConfig {
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            clustering: ClusteringConfig {
                seed: self.seed,
                ..self.clustering.clone()
            },
            tiling: self.tiling,
            purity: self.purity_threshold,
            reduction: self.dr,
            medoid_metric: SeriesMetric::Euclidean,
            timings: self.timings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub windows: Vec<WindowReport>,
    pub mean_rmse: f64,
    /// Model picked by `best_of_all`.
    pub chosen_model: Option<String>,
}

impl StrategyReport {
    fn new(strategy: Strategy, windows: Vec<WindowReport>, chosen_model: Option<String>) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Stream("the stream is too short for a single window".into()));
        }
        let mean_rmse = windows.iter().map(|w| w.rmse).sum::<f64>() / windows.len() as f64;
        Ok(Self {
            strategy,
            windows,
            mean_rmse,
            chosen_model,
        })
    }
}

fn check_query(query: &QuerySpec, stream: &GriddedStream, registry: &ModelRegistry) -> Result<()> {
    if !query.region.fits_in(stream.shape()) {
        let r = &query.region;
        return Err(Error::config(format!(
            "query region {}x{} at ({}, {}) does not fit the {}x{} grid",
            r.height,
            r.width,
            r.row0,
            r.col0,
            stream.shape().rows,
            stream.shape().cols
        )));
    }
    if registry.is_empty() {
        return Err(Error::config("the registry is empty"));
    }
    if let Some(e) = registry.entries().iter().find(|e| e.meta.input_len != query.window_len) {
        return Err(Error::config(format!(
            "predictor `{}` takes {} frames, the query window is {}",
            e.meta.id, e.meta.input_len, query.window_len
        )));
    }
    Ok(())
}

fn windows<'a>(stream: &'a GriddedStream, query: &QuerySpec) -> TumblingWindows<impl Iterator<Item = Frame> + 'a> {
    TumblingWindows::new(stream.frames.iter().cloned(), query.window_len, query.horizon)
}

fn fixed_report(plan: &EnsemblePlan, window: &DataWindow, truth: &[Frame], query: &QuerySpec, registry: &ModelRegistry) -> Result<WindowReport> {
    let preds = execute_horizon(plan, window, registry, query.horizon)?;
    Ok(WindowReport {
        tick: window.end_tick(),
        rmse: horizon_rmse(&preds, truth, &query.region)?,
        elapsed_ms: StageTimings::default(),
        tiles: tile_reports(plan),
        silhouette: None,
        k: 1,
    })
}

/// One predictor over the whole query, every window.
fn run_single(id: &str, query: &QuerySpec, stream: &GriddedStream, registry: &ModelRegistry) -> Result<Vec<WindowReport>> {
    let mut out = Vec::new();
    for item in windows(stream, query) {
        let (w, truth) = item?;
        let plan = EnsemblePlan::single(w.end_tick(), query.region, id, registry)?;
        out.push(fixed_report(&plan, &w, &truth, query, registry)?);
    }
    Ok(out)
}

fn run_average(query: &QuerySpec, stream: &GriddedStream, registry: &ModelRegistry) -> Result<Vec<WindowReport>> {
    let ids: Vec<String> = registry.sorted().iter().map(|e| e.meta.id.clone()).collect();
    let mut out = Vec::new();
    for item in windows(stream, query) {
        let (w, truth) = item?;
        let mut sums: Option<Vec<Vec<f64>>> = None;
        let mut template = Vec::new();
        for id in &ids {
            let plan = EnsemblePlan::single(w.end_tick(), query.region, id, registry)?;
            let preds = execute_horizon(&plan, &w, registry, query.horizon)?;
            let acc = sums.get_or_insert_with(|| vec![vec![0.0; query.region.area()]; preds.len()]);
            for (a, p) in acc.iter_mut().zip(&preds) {
                for (x, v) in a.iter_mut().zip(p.values()) {
                    *x += v;
                }
            }
            template = preds;
        }
        let n = ids.len() as f64;
        let preds: Vec<Frame> = sums
            .expect("registry is nonempty")
            .into_iter()
            .zip(&template)
            .map(|(s, f)| Frame::new(f.shape(), s.into_iter().map(|v| v / n).collect(), f.timestamp()))
            .collect::<Result<_>>()?;
        out.push(WindowReport {
            tick: w.end_tick(),
            rmse: horizon_rmse(&preds, &truth, &query.region)?,
            elapsed_ms: StageTimings::default(),
            tiles: vec![TileReport {
                rect: query.region,
                purity: 1.0,
                predictor: "average".into(),
                estimate: None,
                extrapolating: false,
            }],
            silhouette: None,
            k: 1,
        });
    }
    Ok(out)
}

fn allocation_plan(allocation: &[Allocation], query: &QuerySpec, registry: &ModelRegistry) -> Result<(TilePlan, Vec<Selection>)> {
    let q = query.region;
    let mut tiles = Vec::new();
    let mut sels = Vec::new();
    for a in allocation {
        let r0 = a.rect.row0.max(q.row0);
        let c0 = a.rect.col0.max(q.col0);
        let r1 = a.rect.row_end().min(q.row_end());
        let c1 = a.rect.col_end().min(q.col_end());
        if r0 >= r1 || c0 >= c1 {
            continue;
        }
        if registry.get(&a.predictor).is_none() {
            return Err(Error::config(format!("allocation names unregistered predictor `{}`", a.predictor)));
        }
        tiles.push(Tile {
            rect: RegionRect::new(r0, c0, r1 - r0, c1 - c0)?,
            majority_cluster: 0,
            purity: 1.0,
            medoid_cell: None,
        });
        sels.push(Selection {
            predictor_id: a.predictor.clone(),
            estimate: f64::NAN,
            extrapolating: false,
        });
    }
    let plan = TilePlan {
        tiles,
        region: q,
        threshold: 1.0,
    };
    plan.check()
        .map_err(|e| Error::config(format!("allocation does not tile the query: {e}")))?;
    Ok((plan, sels))
}

/// Runs one strategy over every tumbling window of the stream.
pub fn run_strategy(config: &StrategyConfig, query: &QuerySpec, stream: &GriddedStream, registry: &ModelRegistry) -> Result<StrategyReport> {
    check_query(query, stream, registry)?;
    let strategy = config.strategy;
    match strategy {
        Strategy::Ensemble => {
            let reports = run_continuous_query(query, stream.frames.iter().cloned(), registry, &config.pipeline())?;
            StrategyReport::new(strategy, reports, None)
        }
        Strategy::Random => {
            let ids: Vec<String> = registry.sorted().iter().map(|e| e.meta.id.clone()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut out = Vec::new();
            for item in windows(stream, query) {
                let (w, truth) = item?;
                let id = &ids[rng.random_range(0..ids.len())];
                let plan = EnsemblePlan::single(w.end_tick(), query.region, id, registry)?;
                out.push(fixed_report(&plan, &w, &truth, query, registry)?);
            }
            StrategyReport::new(strategy, out, None)
        }
        Strategy::Global => {
            let id = match &config.global_model {
                Some(id) => id.clone(),
                None => registry
                    .sorted()
                    .iter()
                    .find(|e| e.meta.kind == PredictorKind::PooledGlobal)
                    .map(|e| e.meta.id.clone())
                    .ok_or_else(|| Error::config("the global strategy needs a pooled_global predictor"))?,
            };
            StrategyReport::new(strategy, run_single(&id, query, stream, registry)?, Some(id))
        }
        Strategy::Average => StrategyReport::new(strategy, run_average(query, stream, registry)?, None),
        Strategy::BestOfAll => {
            let mut best: Option<StrategyReport> = None;
            for e in registry.sorted() {
                let r = StrategyReport::new(strategy, run_single(&e.meta.id, query, stream, registry)?, Some(e.meta.id.clone()))?;
                if best.as_ref().is_none_or(|b| r.mean_rmse < b.mean_rmse) {
                    best = Some(r);
                }
            }
            Ok(best.expect("registry is nonempty"))
        }
        Strategy::BestFitStatic | Strategy::BestFitDynamic => {
            if config.allocation.is_empty() {
                return Err(Error::config(format!("{strategy} needs an allocation")));
            }
            let (tile_plan, sels) = allocation_plan(&config.allocation, query, registry)?;
            let mut out = Vec::new();
            for item in windows(stream, query) {
                let (w, truth) = item?;
                let plan = EnsemblePlan::with_selections(w.end_tick(), tile_plan.clone(), sels.clone(), registry)?;
                out.push(fixed_report(&plan, &w, &truth, query, registry)?);
            }
            StrategyReport::new(strategy, out, None)
        }
    }
}

/// One row of a comparison: a named stream, a query and the best-fit allocations.
#[derive(Debug, Clone)]
pub struct Dataset<'a> {
    pub name: String,
    pub stream: &'a GriddedStream,
    pub query: QuerySpec,
    pub static_allocation: Vec<Allocation>,
    pub dynamic_allocation: Vec<Allocation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareTable {
    pub strategies: Vec<Strategy>,
    /// `(dataset, mean RMSE per strategy)`
    pub rows: Vec<(String, Vec<f64>)>,
}

impl CompareTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset");
        for s in &self.strategies {
            out.push(',');
            out.push_str(s.name());
        }
        out.push('\n');
        for (name, values) in &self.rows {
            out.push_str(name);
            for v in values {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn get(&self, dataset: &str, strategy: Strategy) -> Option<f64> {
        let col = self.strategies.iter().position(|s| *s == strategy)?;
        self.rows.iter().find(|(n, _)| n == dataset).map(|(_, v)| v[col])
    }
}

/// Runs every strategy on every dataset.
pub fn compare(datasets: &[Dataset<'_>], strategies: &[Strategy], base: &StrategyConfig, registry: &ModelRegistry) -> Result<CompareTable> {
    let mut rows = Vec::with_capacity(datasets.len());
    for d in datasets {
        let mut values = Vec::with_capacity(strategies.len());
        for &strategy in strategies {
            let allocation = match strategy {
                Strategy::BestFitStatic => d.static_allocation.clone(),
                Strategy::BestFitDynamic => d.dynamic_allocation.clone(),
                _ => Vec::new(),
            };
            let cfg = StrategyConfig {
                strategy,
                allocation,
                ..base.clone()
            };
            values.push(run_strategy(&cfg, &d.query, d.stream, registry)?.mean_rmse);
        }
        rows.push((d.name.clone(), values));
    }
    Ok(CompareTable {
        strategies: strategies.to_vec(),
        rows,
    })
}

/// Per-window clustering and timing table.
pub fn cluster_report_csv(reports: &[WindowReport]) -> String {
    let mut out = String::from("tick,k,silhouette,tiles,represent_ms,cluster_ms,tile_ms,compose_ms,execute_ms,rmse\n");
    for r in reports {
        let sil = r.silhouette.map(|s| format!("{s:.6}")).unwrap_or_default();
        let t = &r.elapsed_ms;
        let _ = writeln!(
            out,
            "{},{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.6}",
            r.tick,
            r.k,
            sil,
            r.tiles.len(),
            t.represent,
            t.cluster,
            t.tile,
            t.compose,
            t.execute,
            r.rmse
        );
    }
    out
}
