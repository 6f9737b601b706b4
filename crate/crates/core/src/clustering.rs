//! Spatial clustering of reduced cell representations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{euclidean, extract_region_series, DataWindow, GridShape, RegionRect};
use crate::representation::{reduce_all, Reduction};

const MAX_LLOYD_ITERATIONS: usize = 100;
const CONVERGENCE_TOL: f64 = 1e-6;

/// One cluster label per cell of a region, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLabels {
    region: RegionRect,
    labels: Vec<usize>,
    k: usize,
}

impl ClusterLabels {
    /// Checks that labels are in `[0, k)` and that every label occurs.
    pub fn new(region: RegionRect, labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.len() != region.area() {
            return Err(Error::shape(format!(
                "{} labels for a region of {} cells",
                labels.len(),
                region.area()
            )));
        }
        let mut seen = vec![false; k];
        for &l in &labels {
            *seen.get_mut(l).ok_or_else(|| Error::shape(format!("label {l} outside [0, {k})")))? = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::shape(format!("label {missing} of {k} is never used")));
        }
        Ok(Self { region, labels, k })
    }

    /// Renumbers arbitrary label ids to `0..k`, preserving their order.
    pub fn compacted(region: RegionRect, raw: &[usize]) -> Result<Self> {
        let mut used: Vec<usize> = raw.to_vec();
        used.sort_unstable();
        used.dedup();
        let labels = raw
            .iter()
            .map(|l| used.binary_search(l).expect("label collected above"))
            .collect();
        Self::new(region, labels, used.len())
    }

    pub fn region(&self) -> RegionRect {
        self.region
    }

    pub fn shape(&self) -> GridShape {
        GridShape {
            rows: self.region.height,
            cols: self.region.width,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Label at absolute grid coordinates.
    pub fn get(&self, row: usize, col: usize) -> usize {
        let r = row - self.region.row0;
        let c = col - self.region.col0;
        self.labels[r * self.region.width + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringStrategy {
    Static,
    #[default]
    Dynamic,
    Stream,
}

impl std::str::FromStr for ClusteringStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "static" => Ok(Self::Static),
            "dynamic" => Ok(Self::Dynamic),
            "stream" | "birch" => Ok(Self::Stream),
            other => Err(Error::config(format!("unknown clustering strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BirchConfig {
    pub threshold: f64,
    pub branching: usize,
    pub max_leaves: usize,
}

impl Default for BirchConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            branching: 8,
            max_leaves: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub strategy: ClusteringStrategy,
    pub k_min: usize,
    pub k_max: usize,
    pub fixed_k: Option<usize>,
    pub seed: u64,
    pub birch: BirchConfig,
    /// Dynamic mode reclusters every this many windows and only reassigns in between.
    pub recluster_every: usize,
    /// k-means runs per candidate k; the lowest inertia is kept.
    pub restarts: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            strategy: ClusteringStrategy::Dynamic,
            k_min: 3,
            k_max: 5,
            fixed_k: None,
            seed: 0,
            birch: BirchConfig::default(),
            recluster_every: 1,
            restarts: 10,
        }
    }
}

impl ClusteringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_min < 2 || self.k_min > self.k_max {
            return Err(Error::config(format!(
                "cluster search needs 2 <= k_min <= k_max, got {}..{}",
                self.k_min, self.k_max
            )));
        }
        if self.fixed_k == Some(0) {
            return Err(Error::config("fixed_k must be at least 1"));
        }
        if !(self.birch.threshold > 0.0) || self.birch.branching < 2 || self.birch.max_leaves < 1 {
            return Err(Error::config(
                "birch needs threshold > 0, branching >= 2 and max_leaves >= 1",
            ));
        }
        if self.recluster_every == 0 {
            return Err(Error::config("recluster_every must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(Error::config("restarts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub objective_trace: Vec<f64>,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let dim = points.first().map(Vec::len).ok_or_else(|| Error::shape("no points to cluster"))?;
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("points of mixed dimension"));
    }
    Ok(dim)
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Moves one point into each empty cluster: the point farthest from its
/// centroid among clusters that can spare a member.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assign: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let donor = (0..points.len())
            .filter(|&i| counts[assign[i]] >= 2)
            .max_by(|&i, &j| {
                let di = sq_dist(&points[i], &centroids[assign[i]]);
                let dj = sq_dist(&points[j], &centroids[assign[j]]);
                di.total_cmp(&dj).then(j.cmp(&i))
            })
            .expect("k <= |points| leaves a cluster with two members");
        assign[donor] = empty;
        centroids[empty] = points[donor].clone();
    }
}

fn recompute(points: &[Vec<f64>], assign: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, n) in sums.iter_mut().zip(counts) {
        for v in s.iter_mut() {
            *v /= n as f64;
        }
    }
    sums
}

fn objective(points: &[Vec<f64>], assign: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(assign).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

/// Lloyd's algorithm from k-means++ seeds.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    let dim = check_points(points)?;
    if k == 0 || k > points.len() {
        return Err(Error::config(format!("k = {k} for {} points", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut assign = vec![0; points.len()];
    let mut trace = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        for (a, p) in assign.iter_mut().zip(points) {
            *a = nearest(p, &centroids);
        }
        repair_empty(points, &mut centroids, &mut assign);
        trace.push(objective(points, &assign, &centroids));
        let next = recompute(points, &assign, k, dim);
        let moved = next
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if moved < CONVERGENCE_TOL {
            break;
        }
    }
    Ok(KMeansResult {
        assignments: assign,
        centroids,
        objective_trace: trace,
    })
}

/// Mean silhouette; singleton clusters and `a = b = 0` points contribute 0.
pub fn silhouette(points: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    check_points(points)?;
    if assignments.len() != points.len() {
        return Err(Error::shape("one assignment per point required"));
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::UndefinedMetric("silhouette needs at least two clusters".into()));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for (i, p) in points.iter().enumerate() {
        let own = assignments[i];
        if sizes[own] == 1 {
            continue;
        }
        sums.fill(0.0);
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[assignments[j]] += euclidean(p, q);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}

fn distinct_points(points: &[Vec<f64>], limit: usize) -> usize {
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !seen.contains(&p) {
            seen.push(p);
            if seen.len() >= limit {
                break;
            }
        }
    }
    seen.len()
}

/// Best of `restarts` k-means runs by final inertia; run 0 uses `seed` itself.
pub fn kmeans_restarts(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let mut best = kmeans(points, k, seed)?;
    for r in 1..restarts as u64 {
        let run = kmeans(points, k, seed.wrapping_add(r.wrapping_mul(0x9E37_79B9_7F4A_7C15)))?;
        if run.inertia() < best.inertia() {
            best = run;
        }
    }
    Ok(best)
}

/// Outcome of a silhouette search.
#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub k: usize,
    pub silhouette: Option<f64>,
    pub result: KMeansResult,
}

/// Searches `k_min..=k_max` (or uses `fixed_k`) and returns the best clustering.
pub fn select_k_scored(points: &[Vec<f64>], config: &ClusteringConfig) -> Result<KSelection> {
    check_points(points)?;
    if let Some(k) = config.fixed_k {
        let result = kmeans_restarts(points, k, config.seed, config.restarts.max(1))?;
        let silhouette = silhouette(points, &result.assignments).ok();
        return Ok(KSelection { k, silhouette, result });
    }
    if config.k_max > points.len() {
        return Err(Error::config(format!(
            "k_max = {} exceeds the {} points",
            config.k_max,
            points.len()
        )));
    }
    if distinct_points(points, 2) < 2 {
        return Err(Error::UndefinedMetric("all points coincide".into()));
    }
    let mut best: Option<KSelection> = None;
    for k in config.k_min..=config.k_max {
        let result = kmeans_restarts(points, k, config.seed, config.restarts.max(1))?;
        let score = silhouette(points, &result.assignments)?;
        if best.as_ref().is_none_or(|b| score > b.silhouette.unwrap_or(f64::NEG_INFINITY)) {
            best = Some(KSelection {
                k,
                silhouette: Some(score),
                result,
            });
        }
    }
    Ok(best.expect("k_min <= k_max"))
}

pub fn select_k(points: &[Vec<f64>], config: &ClusteringConfig) -> Result<usize> {
    select_k_scored(points, config).map(|s| s.k)
}

/// Clustering feature: count, linear sum and sum of squared norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfEntry {
    pub n: usize,
    pub ls: Vec<f64>,
    pub ss: f64,
}

impl CfEntry {
    pub fn from_point(p: &[f64]) -> Self {
        Self {
            n: 1,
            ls: p.to_vec(),
            ss: p.iter().map(|v| v * v).sum(),
        }
    }

    pub fn centroid(&self) -> Vec<f64> {
        self.ls.iter().map(|v| v / self.n as f64).collect()
    }

    /// Root mean squared distance of members to the centroid.
    pub fn radius(&self) -> f64 {
        let n = self.n as f64;
        let c2: f64 = self.ls.iter().map(|v| (v / n).powi(2)).sum();
        (self.ss / n - c2).max(0.0).sqrt()
    }

    pub fn merged(&self, other: &CfEntry) -> CfEntry {
        CfEntry {
            n: self.n + other.n,
            ls: self.ls.iter().zip(&other.ls).map(|(a, b)| a + b).collect(),
            ss: self.ss + other.ss,
        }
    }
}

/// Leaf CF entries grouped into nodes of at most `branching` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamClustererState {
    dim: usize,
    threshold: f64,
    branching: usize,
    max_leaves: usize,
    nodes: Vec<Vec<CfEntry>>,
    /// Number of points inserted so far.
    generation: u64,
}

impl StreamClustererState {
    pub fn new(dim: usize, config: &BirchConfig) -> Result<Self> {
        if dim == 0 || !(config.threshold > 0.0) || config.branching < 2 || config.max_leaves < 1 {
            return Err(Error::config("invalid stream clusterer parameters"));
        }
        Ok(Self {
            dim,
            threshold: config.threshold,
            branching: config.branching,
            max_leaves: config.max_leaves,
            nodes: Vec::new(),
            generation: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &CfEntry> {
        self.nodes.iter().flatten()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().map(Vec::len).sum()
    }

    fn nearest_leaf(&self, p: &[f64]) -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for (ni, node) in self.nodes.iter().enumerate() {
            for (ei, e) in node.iter().enumerate() {
                let d = sq_dist(p, &e.centroid());
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some(((ni, ei), d));
                }
            }
        }
        best.map(|(idx, _)| idx)
    }

    fn absorb(&mut self, cf: CfEntry) {
        match self.nearest_leaf(&cf.centroid()) {
            Some((ni, ei)) => {
                let merged = self.nodes[ni][ei].merged(&cf);
                if merged.radius() <= self.threshold {
                    self.nodes[ni][ei] = merged;
                } else {
                    self.nodes[ni].push(cf);
                    if self.nodes[ni].len() > self.branching {
                        self.split(ni);
                    }
                }
            }
            None => self.nodes.push(vec![cf]),
        }
    }

    /// Splits a node around its farthest pair of entries.
    fn split(&mut self, ni: usize) {
        let entries = std::mem::take(&mut self.nodes[ni]);
        let cents: Vec<Vec<f64>> = entries.iter().map(CfEntry::centroid).collect();
        let (mut sa, mut sb, mut far) = (0, 1, -1.0);
        for i in 0..cents.len() {
            for j in i + 1..cents.len() {
                let d = sq_dist(&cents[i], &cents[j]);
                if d > far {
                    (sa, sb, far) = (i, j, d);
                }
            }
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, e) in entries.into_iter().enumerate() {
            if sq_dist(&cents[i], &cents[sa]) <= sq_dist(&cents[i], &cents[sb]) {
                a.push(e);
            } else {
                b.push(e);
            }
        }
        self.nodes[ni] = a;
        self.nodes.push(b);
    }

    /// Doubles the threshold and reinserts all entries until the leaf budget holds.
    fn rebuild(&mut self) {
        while self.leaf_count() > self.max_leaves {
            self.threshold *= 2.0;
            let entries: Vec<CfEntry> = std::mem::take(&mut self.nodes).into_iter().flatten().collect();
            for e in entries {
                self.absorb(e);
            }
        }
    }
}

/// Inserts one point into the CF tree.
pub fn birch_insert(state: &mut StreamClustererState, point: &[f64]) -> Result<()> {
    if point.len() != state.dim {
        return Err(Error::shape(format!(
            "point of dimension {} for a clusterer of dimension {}",
            point.len(),
            state.dim
        )));
    }
    state.absorb(CfEntry::from_point(point));
    state.generation += 1;
    if state.leaf_count() > state.max_leaves {
        state.rebuild();
    }
    Ok(())
}

/// State carried between windows.
#[derive(Debug, Clone, Default)]
pub struct ClusterState {
    centroids: Option<Vec<Vec<f64>>>,
    windows_seen: usize,
    stream: Option<StreamClustererState>,
}

impl ClusterState {
    pub fn stream(&self) -> Option<&StreamClustererState> {
        self.stream.as_ref()
    }

    pub fn windows_seen(&self) -> usize {
        self.windows_seen
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutcome {
    pub labels: ClusterLabels,
    /// Silhouette of the final labels, `None` for a single cluster.
    pub silhouette: Option<f64>,
}

/// Full search, falling back to one cluster when the points cannot be split.
fn fresh_clustering(points: &[Vec<f64>], config: &ClusteringConfig) -> Result<Vec<Vec<f64>>> {
    let mut cfg = config.clone();
    let distinct = distinct_points(points, cfg.k_max.max(cfg.fixed_k.unwrap_or(0)));
    if let Some(k) = cfg.fixed_k {
        cfg.fixed_k = Some(k.min(distinct));
    } else {
        cfg.k_max = cfg.k_max.min(distinct);
        if cfg.k_max < cfg.k_min {
            if distinct < 2 {
                return Ok(vec![mean_point(points)]);
            }
            cfg.k_min = cfg.k_max;
        }
    }
    match select_k_scored(points, &cfg) {
        Ok(sel) => Ok(sel.result.centroids),
        Err(Error::UndefinedMetric(_)) => Ok(vec![mean_point(points)]),
        Err(e) => Err(e),
    }
}

fn mean_point(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len() as f64;
    let mut m = vec![0.0; points[0].len()];
    for p in points {
        for (a, v) in m.iter_mut().zip(p) {
            *a += v / n;
        }
    }
    m
}

/// Clusters already-reduced points laid out row-major over `region`.
pub fn cluster_points(
    points: &[Vec<f64>],
    region: RegionRect,
    config: &ClusteringConfig,
    state: &mut ClusterState,
) -> Result<ClusterOutcome> {
    let dim = check_points(points)?;
    if points.len() != region.area() {
        return Err(Error::shape(format!(
            "{} points for a region of {} cells",
            points.len(),
            region.area()
        )));
    }
    let raw: Vec<usize> = match config.strategy {
        ClusteringStrategy::Static | ClusteringStrategy::Dynamic => {
            let refresh = match config.strategy {
                ClusteringStrategy::Static => state.centroids.is_none(),
                _ => state.centroids.is_none() || state.windows_seen % config.recluster_every == 0,
            };
            if refresh {
                state.centroids = Some(fresh_clustering(points, config)?);
            }
            let cents = state.centroids.as_ref().expect("set above");
            if cents[0].len() != dim {
                return Err(Error::shape("point dimension changed between windows"));
            }
            points.iter().map(|p| nearest(p, cents)).collect()
        }
        ClusteringStrategy::Stream => {
            let tree = match &mut state.stream {
                Some(t) => t,
                slot => slot.insert(StreamClustererState::new(dim, &config.birch)?),
            };
            for p in points {
                birch_insert(tree, p)?;
            }
            let leaf_cents: Vec<Vec<f64>> = tree.leaves().map(CfEntry::centroid).collect();
            let leaf_labels = if leaf_cents.len() < 2 {
                vec![0; leaf_cents.len()]
            } else {
                let cents = fresh_clustering(&leaf_cents, config)?;
                leaf_cents.iter().map(|c| nearest(c, &cents)).collect()
            };
            points.iter().map(|p| leaf_labels[nearest(p, &leaf_cents)]).collect()
        }
    };
    state.windows_seen += 1;
    let labels = ClusterLabels::compacted(region, &raw)?;
    let silhouette = if labels.k() >= 2 {
        Some(silhouette(points, labels.labels())?)
    } else {
        None
    };
    Ok(ClusterOutcome { labels, silhouette })
}

/// Reduces each cell series of the region and clusters the result.
pub fn cluster_window(
    window: &DataWindow,
    region: RegionRect,
    reduction: Reduction,
    config: &ClusteringConfig,
    state: &mut ClusterState,
) -> Result<ClusterOutcome> {
    let series = extract_region_series(window, &region)?;
    let points = reduce_all(&series, reduction, config.seed)?;
    cluster_points(&points, region, config, state)
}
