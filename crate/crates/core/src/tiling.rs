//! Rectangular tiling of cluster labels.

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterLabels;
use crate::error::{Error, Result};
use crate::grid::{extract_region_series, medoid_index, DataWindow, RegionRect, SeriesMetric};

pub const DEFAULT_PURITY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TilingMethod {
    BottomUp,
    #[default]
    Quadtree,
}

impl std::str::FromStr for TilingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "bottom_up" | "bottomup" => Ok(Self::BottomUp),
            "quadtree" => Ok(Self::Quadtree),
            other => Err(Error::config(format!("unknown tiling method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub rect: RegionRect,
    pub majority_cluster: usize,
    pub purity: f64,
    pub medoid_cell: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub tiles: Vec<Tile>,
    pub region: RegionRect,
    pub threshold: f64,
}

impl TilePlan {
    /// Verifies that the tiles cover the region exactly once and meet the threshold.
    pub fn check(&self) -> Result<()> {
        let r = self.region;
        let mut owner = vec![usize::MAX; r.area()];
        for (i, t) in self.tiles.iter().enumerate() {
            if !r.contains_rect(&t.rect) {
                return Err(Error::Validation(format!("tile {i} {:?} leaves the region", t.rect)));
            }
            for (row, col) in t.rect.cells() {
                let slot = &mut owner[(row - r.row0) * r.width + col - r.col0];
                if *slot != usize::MAX {
                    return Err(Error::Validation(format!("cell ({row}, {col}) is in tiles {} and {i}", *slot)));
                }
                *slot = i;
            }
            if t.rect.area() > 1 && t.purity < self.threshold {
                return Err(Error::Validation(format!(
                    "tile {i} purity {} below threshold {}",
                    t.purity, self.threshold
                )));
            }
        }
        if let Some(gap) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::Validation(format!(
                "cell ({}, {}) is not covered",
                r.row0 + gap / r.width,
                r.col0 + gap % r.width
            )));
        }
        Ok(())
    }
}

/// Per-label 2-D prefix counts over the label region.
struct LabelCounts {
    region: RegionRect,
    k: usize,
    /// `(height + 1) x (width + 1) x k`
    prefix: Vec<u32>,
}

impl LabelCounts {
    fn new(labels: &ClusterLabels) -> Self {
        let region = labels.region();
        let (h, w, k) = (region.height, region.width, labels.k());
        let mut prefix = vec![0u32; (h + 1) * (w + 1) * k];
        let idx = |r: usize, c: usize, l: usize| (r * (w + 1) + c) * k + l;
        for r in 0..h {
            for c in 0..w {
                let here = labels.labels()[r * w + c];
                for l in 0..k {
                    let v = prefix[idx(r, c + 1, l)] + prefix[idx(r + 1, c, l)] - prefix[idx(r, c, l)]
                        + u32::from(l == here);
                    prefix[idx(r + 1, c + 1, l)] = v;
                }
            }
        }
        Self { region, k, prefix }
    }

    fn majority(&self, rect: &RegionRect) -> (usize, f64) {
        let w = self.region.width;
        let k = self.k;
        let (r0, c0) = (rect.row0 - self.region.row0, rect.col0 - self.region.col0);
        let (r1, c1) = (r0 + rect.height, c0 + rect.width);
        let at = |r: usize, c: usize, l: usize| self.prefix[(r * (w + 1) + c) * k + l] as i64;
        let mut best = (0, -1i64);
        for l in 0..k {
            let n = at(r1, c1, l) - at(r0, c1, l) - at(r1, c0, l) + at(r0, c0, l);
            if n > best.1 {
                best = (l, n);
            }
        }
        (best.0, best.1 as f64 / rect.area() as f64)
    }
}

fn ensure_within(rect: &RegionRect, labels: &ClusterLabels) -> Result<()> {
    let outer = labels.region();
    if outer.contains_rect(rect) {
        return Ok(());
    }
    let (row, col) = (rect.row_end() - 1, rect.col_end() - 1);
    Err(Error::Coordinate {
        row,
        col,
        rows: outer.row_end(),
        cols: outer.col_end(),
    })
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("purity threshold {threshold} outside (0, 1]")))
    }
}

/// Majority label (ties to the smaller id) and its share of the rect.
pub fn purity(rect: &RegionRect, labels: &ClusterLabels) -> Result<(usize, f64)> {
    ensure_within(rect, labels)?;
    let mut counts = vec![0usize; labels.k()];
    for (r, c) in rect.cells() {
        counts[labels.get(r, c)] += 1;
    }
    let mut best = 0;
    for (l, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = l;
        }
    }
    Ok((best, counts[best] as f64 / rect.area() as f64))
}

fn make_tile(rect: RegionRect, counts: &LabelCounts) -> Tile {
    let (majority_cluster, purity) = counts.majority(&rect);
    Tile {
        rect,
        majority_cluster,
        purity,
        medoid_cell: None,
    }
}

/// Greedy growth from row-major seeds, cycling right, down, left, up.
pub fn tile_bottom_up(labels: &ClusterLabels, region: RegionRect, threshold: f64) -> Result<TilePlan> {
    check_threshold(threshold)?;
    ensure_within(&region, labels)?;
    let counts = LabelCounts::new(labels);
    let w = region.width;
    let mut taken = vec![false; region.area()];
    let free = |taken: &[bool], rect: &RegionRect| {
        rect.cells()
            .all(|(r, c)| !taken[(r - region.row0) * w + c - region.col0])
    };
    let mut tiles = Vec::new();
    let mut cursor = 0;
    while let Some(off) = taken[cursor..].iter().position(|t| !t) {
        let seed = cursor + off;
        cursor = seed;
        let mut rect = RegionRect::new(region.row0 + seed / w, region.col0 + seed % w, 1, 1)?;
        let mut alive = [true; 4];
        let mut dir = 0;
        while alive.iter().any(|a| *a) {
            if alive[dir] {
                // the strip of new cells and the grown rect
                let step = match dir {
                    0 if rect.col_end() < region.col_end() => Some((
                        RegionRect::new(rect.row0, rect.col_end(), rect.height, 1)?,
                        RegionRect::new(rect.row0, rect.col0, rect.height, rect.width + 1)?,
                    )),
                    1 if rect.row_end() < region.row_end() => Some((
                        RegionRect::new(rect.row_end(), rect.col0, 1, rect.width)?,
                        RegionRect::new(rect.row0, rect.col0, rect.height + 1, rect.width)?,
                    )),
                    2 if rect.col0 > region.col0 => Some((
                        RegionRect::new(rect.row0, rect.col0 - 1, rect.height, 1)?,
                        RegionRect::new(rect.row0, rect.col0 - 1, rect.height, rect.width + 1)?,
                    )),
                    3 if rect.row0 > region.row0 => Some((
                        RegionRect::new(rect.row0 - 1, rect.col0, 1, rect.width)?,
                        RegionRect::new(rect.row0 - 1, rect.col0, rect.height + 1, rect.width)?,
                    )),
                    _ => None,
                };
                match step {
                    Some((strip, grown)) if free(&taken, &strip) && counts.majority(&grown).1 >= threshold => {
                        rect = grown;
                    }
                    _ => alive[dir] = false,
                }
            }
            dir = (dir + 1) % 4;
        }
        for (r, c) in rect.cells() {
            taken[(r - region.row0) * w + c - region.col0] = true;
        }
        tiles.push(make_tile(rect, &counts));
    }
    Ok(TilePlan {
        tiles,
        region,
        threshold,
    })
}

fn quad(rect: RegionRect, counts: &LabelCounts, threshold: f64, out: &mut Vec<Tile>) {
    let tile = make_tile(rect, counts);
    if rect.area() == 1 || tile.purity >= threshold {
        out.push(tile);
        return;
    }
    let top = rect.height.div_ceil(2);
    let left = rect.width.div_ceil(2);
    let rows = [(rect.row0, top), (rect.row0 + top, rect.height - top)];
    let cols = [(rect.col0, left), (rect.col0 + left, rect.width - left)];
    for (r0, h) in rows {
        for (c0, w) in cols {
            if let Ok(child) = RegionRect::new(r0, c0, h, w) {
                quad(child, counts, threshold, out);
            }
        }
    }
}

/// Recursive quadrant splitting at `ceil(size / 2)`, children in NW, NE, SW, SE order.
pub fn tile_quadtree(labels: &ClusterLabels, region: RegionRect, threshold: f64) -> Result<TilePlan> {
    check_threshold(threshold)?;
    ensure_within(&region, labels)?;
    let counts = LabelCounts::new(labels);
    let mut tiles = Vec::new();
    quad(region, &counts, threshold, &mut tiles);
    Ok(TilePlan {
        tiles,
        region,
        threshold,
    })
}

pub fn tile(method: TilingMethod, labels: &ClusterLabels, region: RegionRect, threshold: f64) -> Result<TilePlan> {
    match method {
        TilingMethod::BottomUp => tile_bottom_up(labels, region, threshold),
        TilingMethod::Quadtree => tile_quadtree(labels, region, threshold),
    }
}

/// Fills every tile's medoid cell from the window's series.
pub fn tile_medoids(mut plan: TilePlan, window: &DataWindow, metric: SeriesMetric) -> Result<TilePlan> {
    for t in &mut plan.tiles {
        let series = extract_region_series(window, &t.rect)?;
        let m = &series[medoid_index(&series, metric)?];
        t.medoid_cell = Some((m.row, m.col));
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Frame, GridShape};
    use proptest::prelude::*;

    fn labels_from(rows: usize, cols: usize, f: impl Fn(usize, usize) -> usize) -> ClusterLabels {
        let raw: Vec<usize> = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        ClusterLabels::compacted(RegionRect::new(0, 0, rows, cols).unwrap(), &raw).unwrap()
    }

    fn quadrants() -> ClusterLabels {
        labels_from(20, 20, |r, c| 2 * (r / 10) + c / 10)
    }

    #[test]
    fn purity_examples() {
        let uni = labels_from(3, 3, |_, _| 0);
        let all = RegionRect::new(0, 0, 3, 3).unwrap();
        assert_eq!(purity(&all, &uni).unwrap(), (0, 1.0));
        let mixed = labels_from(2, 2, |r, c| usize::from(r == 1 && c == 1));
        assert_eq!(purity(&RegionRect::new(0, 0, 2, 2).unwrap(), &mixed).unwrap(), (0, 0.75));
        let pair = labels_from(1, 2, |_, c| 1 - c);
        assert_eq!(purity(&RegionRect::new(0, 0, 1, 2).unwrap(), &pair).unwrap(), (0, 0.5));
        assert!(matches!(
            purity(&RegionRect::new(2, 2, 2, 2).unwrap(), &uni),
            Err(Error::Coordinate { .. })
        ));
    }

    #[test]
    fn bottom_up_examples() {
        let uni = labels_from(4, 4, |_, _| 0);
        let plan = tile_bottom_up(&uni, uni.region(), 0.9).unwrap();
        assert_eq!(plan.tiles.len(), 1);
        assert_eq!(plan.tiles[0].rect, uni.region());

        let q = quadrants();
        let plan = tile_bottom_up(&q, q.region(), 1.0).unwrap();
        assert_eq!(plan.tiles.len(), 4);
        assert!(plan.tiles.iter().all(|t| t.rect.height == 10 && t.rect.width == 10));

        let cb = labels_from(6, 6, |r, c| (r + c) % 2);
        let plan = tile_bottom_up(&cb, cb.region(), 1.0).unwrap();
        assert_eq!(plan.tiles.len(), 36);
        assert!(tile_bottom_up(&cb, cb.region(), 0.0).is_err());
    }

    #[test]
    fn quadtree_examples() {
        let uni = labels_from(7, 5, |_, _| 0);
        assert_eq!(tile_quadtree(&uni, uni.region(), 1.0).unwrap().tiles.len(), 1);
        let q = quadrants();
        let plan = tile_quadtree(&q, q.region(), 0.9).unwrap();
        assert_eq!(plan.tiles.len(), 4);
        assert!(plan.tiles.iter().all(|t| t.rect.height == 10 && t.rect.width == 10));
        assert_eq!(plan.tiles[1].rect.col0, 10);
        assert_eq!(plan.tiles[2].rect.row0, 10);
        let one = labels_from(1, 1, |_, _| 0);
        let plan = tile_quadtree(&one, one.region(), 1.0).unwrap();
        assert_eq!(plan.tiles.len(), 1);
        assert_eq!(plan.tiles[0].rect.area(), 1);
    }

    #[test]
    fn sub_region_tiling_uses_absolute_coordinates() {
        let q = quadrants();
        let sub = RegionRect::new(5, 5, 10, 10).unwrap();
        for plan in [tile_bottom_up(&q, sub, 1.0).unwrap(), tile_quadtree(&q, sub, 1.0).unwrap()] {
            plan.check().unwrap();
            assert_eq!(plan.tiles.len(), 4);
            assert!(plan.tiles.iter().all(|t| t.rect.area() == 25));
        }
    }

    fn window_with(values: impl Fn(usize, usize, usize) -> f64, rows: usize, cols: usize) -> DataWindow {
        let shape = GridShape::new(rows, cols).unwrap();
        let frames = (0..4)
            .map(|t| {
                let v = (0..rows * cols).map(|i| values(t, i / cols, i % cols)).collect();
                Frame::new(shape, v, t as i64).unwrap()
            })
            .collect();
        DataWindow::new(frames).unwrap()
    }

    #[test]
    fn medoid_examples() {
        let labels = labels_from(3, 3, |_, _| 0);
        let singles = tile_quadtree(&labels, labels.region(), 1.0).unwrap();
        let mut plan = singles.clone();
        plan.tiles = labels
            .region()
            .cells()
            .map(|(r, c)| Tile {
                rect: RegionRect::new(r, c, 1, 1).unwrap(),
                majority_cluster: 0,
                purity: 1.0,
                medoid_cell: None,
            })
            .collect();
        let w = window_with(|t, r, c| (t * 10 + r * 3 + c) as f64, 3, 3);
        let plan = tile_medoids(plan, &w, SeriesMetric::Euclidean).unwrap();
        assert!(plan.tiles.iter().all(|t| t.medoid_cell == Some((t.rect.row0, t.rect.col0))));

        let outlier = window_with(|t, r, c| if (r, c) == (0, 0) { 100.0 } else { t as f64 }, 3, 3);
        let plan = tile_medoids(singles.clone(), &outlier, SeriesMetric::Euclidean).unwrap();
        assert_ne!(plan.tiles[0].medoid_cell, Some((0, 0)));

        let constant = window_with(|_, _, _| 3.0, 3, 3);
        let plan = tile_medoids(singles, &constant, SeriesMetric::Euclidean).unwrap();
        assert_eq!(plan.tiles[0].medoid_cell, Some((0, 0)));
    }

    fn arb_labels() -> impl Strategy<Value = ClusterLabels> {
        (1usize..=12, 1usize..=12, 1usize..=4).prop_flat_map(|(h, w, k)| {
            prop::collection::vec(0..k, h * w).prop_map(move |raw| {
                ClusterLabels::compacted(RegionRect::new(0, 0, h, w).unwrap(), &raw).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn both_tilers_cover_exactly(labels in arb_labels(), t in prop::sample::select(vec![0.5, 0.7, 0.9, 1.0])) {
            for plan in [
                tile_bottom_up(&labels, labels.region(), t).unwrap(),
                tile_quadtree(&labels, labels.region(), t).unwrap(),
            ] {
                prop_assert!(plan.check().is_ok(), "{:?}", plan.check());
                for tile in &plan.tiles {
                    let (m, p) = purity(&tile.rect, &labels).unwrap();
                    prop_assert_eq!(m, tile.majority_cluster);
                    prop_assert!((p - tile.purity).abs() < 1e-12);
                }
            }
            prop_assert_eq!(
                tile_bottom_up(&labels, labels.region(), t).unwrap(),
                tile_bottom_up(&labels, labels.region(), t).unwrap()
            );
        }

        #[test]
        fn relabeling_keeps_geometry(labels in arb_labels(), t in 0.5f64..=1.0) {
            let k = labels.k();
            let flipped: Vec<usize> = labels.labels().iter().map(|l| k - 1 - l).collect();
            let other = ClusterLabels::new(labels.region(), flipped, k).unwrap();
            let rects = |p: TilePlan| p.tiles.into_iter().map(|t| t.rect).collect::<Vec<_>>();
            prop_assert_eq!(
                rects(tile_quadtree(&labels, labels.region(), t).unwrap()),
                rects(tile_quadtree(&other, other.region(), t).unwrap())
            );
            prop_assert_eq!(
                rects(tile_bottom_up(&labels, labels.region(), t).unwrap()),
                rects(tile_bottom_up(&other, other.region(), t).unwrap())
            );
        }
    }
}
