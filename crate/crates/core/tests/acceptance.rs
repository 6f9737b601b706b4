//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tilecast::clustering::{cluster_window, ClusterLabels, ClusterState, ClusteringConfig, ClusteringStrategy};
use tilecast::eef::{calibration_pairs, dtw, fit_eef, model_error_on, NoiseSchedule};
use tilecast::ensemble::{reports_to_jsonl, window_count, TumblingWindows, WindowReport};
use tilecast::grid::{CellSeries, DataWindow, QuerySpec, RegionRect};
use tilecast::harness::{
    best_fit_allocation, cluster_report_csv, compare, fit_registry, generate_synthetic, preset, preset_fit_config,
    run_strategy, training_series, Dataset, GriddedStream, Strategy, StrategyConfig, SyntheticGridConfig,
};
use tilecast::predictors::{fit_predictor, ModelRegistry, PredictorKind, PredictorMeta, RegistryEntry};
use tilecast::representation::{make_sketch_basis, parcorr_sketch, Reduction};
use tilecast::tiling::{tile_bottom_up, tile_quadtree, TilePlan};

const WINDOW: usize = 24;
const TRAIN: (i64, i64) = (0, 240);
const SEEDS: u64 = 30;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct World {
    grid: SyntheticGridConfig,
    stream: GriddedStream,
    registry: ModelRegistry,
}

fn world(name: &str, seed: u64, extended: bool) -> World {
    let grid = preset(name, seed).unwrap();
    let stream = generate_synthetic(&grid).unwrap();
    let mut fit = preset_fit_config(&grid, WINDOW, TRAIN, extended).unwrap();
    fit.seed = seed;
    let registry = fit_registry(&stream, &fit).unwrap();
    World { grid, stream, registry }
}

/// Same models as `world`, without error estimators.
fn bare_world(name: &str, seed: u64) -> World {
    let grid = preset(name, seed).unwrap();
    let stream = generate_synthetic(&grid).unwrap();
    let fit = preset_fit_config(&grid, WINDOW, TRAIN, false).unwrap();
    let entries = fit
        .models
        .iter()
        .map(|spec| RegistryEntry {
            meta: fit_predictor(spec, &training_series(&stream, spec).unwrap()).unwrap(),
            eef: None,
        })
        .collect();
    World {
        grid,
        stream,
        registry: ModelRegistry::new(entries).unwrap(),
    }
}

fn full_query(stream: &GriddedStream) -> QuerySpec {
    QuerySpec::new(stream.shape().full_rect(), 1, WINDOW).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Average ranks, ties share the mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            r[idx[k]] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

fn strategy(s: Strategy) -> StrategyConfig {
    StrategyConfig {
        strategy: s,
        timings: false,
        ..Default::default()
    }
}

fn motivating_experiment() -> Outcome {
    let started = Instant::now();
    let mut rmse: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for seed in 0..SEEDS {
        let frozen = best_fit_allocation(&preset("grid1", seed).unwrap());
        for name in ["grid1", "grid2"] {
            let w = bare_world(name, seed);
            let q = full_query(&w.stream);
            let mut run = |label: &'static str, cfg: StrategyConfig| {
                let r = run_strategy(&cfg, &q, &w.stream, &w.registry).unwrap();
                rmse.entry((name, label)).or_default().push(r.mean_rmse);
            };
            run("global", strategy(Strategy::Global));
            run("random", StrategyConfig { seed, ..strategy(Strategy::Random) });
            run(
                "dynamic",
                StrategyConfig {
                    allocation: best_fit_allocation(&w.grid),
                    ..strategy(Strategy::BestFitDynamic)
                },
            );
            run(
                "static",
                StrategyConfig {
                    allocation: frozen.clone(),
                    ..strategy(Strategy::BestFitStatic)
                },
            );
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let m = |g, s| mean(&rmse[&(g, s)]);
    let mut pass = elapsed <= 60.0;
    let mut detail = String::new();
    for g in ["grid1", "grid2"] {
        let dynamic = m(g, "dynamic");
        pass &= m(g, "global") >= 2.0 * dynamic && m(g, "random") >= 2.0 * dynamic;
        detail += &format!(
            "{g}: dynamic {dynamic:.3} global {:.3} random {:.3} static {:.3}; ",
            m(g, "global"),
            m(g, "random"),
            m(g, "static")
        );
    }
    pass &= m("grid2", "static") >= 2.0 * m("grid2", "dynamic");
    detail += &format!("{elapsed:.1}s");
    outcome(pass, detail)
}

fn baseline_dominance() -> Outcome {
    const BASELINES: [Strategy; 5] = [
        Strategy::Ensemble,
        Strategy::Average,
        Strategy::Random,
        Strategy::Global,
        Strategy::BestOfAll,
    ];
    let queries = [
        ("grid1", RegionRect::new(0, 0, 20, 20).unwrap()),
        ("grid2", RegionRect::new(0, 0, 20, 20).unwrap()),
        ("grid3", RegionRect::new(0, 0, 20, 20).unwrap()),
        ("grid1", RegionRect::new(0, 0, 10, 10).unwrap()),
        ("grid2", RegionRect::new(5, 5, 10, 10).unwrap()),
    ];
    let mut pass = true;
    let mut near_best = 0;
    let mut detail = String::new();
    for (i, (name, rect)) in queries.iter().enumerate() {
        let mut sums = vec![0.0; BASELINES.len()];
        let seeds = 3;
        for seed in 0..seeds {
            let w = world(name, seed, false);
            let ds = [Dataset {
                name: format!("q{i}"),
                stream: &w.stream,
                query: QuerySpec::new(*rect, 1, WINDOW).unwrap(),
                static_allocation: Vec::new(),
                dynamic_allocation: Vec::new(),
            }];
            let base = StrategyConfig { seed, ..strategy(Strategy::Ensemble) };
            let t = compare(&ds, &BASELINES, &base, &w.registry).unwrap();
            for (s, v) in sums.iter_mut().zip(&t.rows[0].1) {
                *s += v / seeds as f64;
            }
        }
        let [ens, avg, rnd, glob, best] = sums[..] else { unreachable!() };
        pass &= ens <= avg && ens <= rnd && ens <= glob;
        let worse_than_global = sums.iter().filter(|v| **v > glob).count();
        pass &= worse_than_global <= 1;
        if ens <= 1.10 * best {
            near_best += 1;
        }
        detail += &format!("q{i} ens {ens:.3} avg {avg:.3} rnd {rnd:.3} glob {glob:.3} best {best:.3}; ");
    }
    pass &= near_best >= 4;
    detail += &format!("within 10% of best on {near_best}/5");
    outcome(pass, detail)
}

fn specialist_recovery() -> Outcome {
    let mut fractions = Vec::new();
    for seed in 0..SEEDS {
        let w = world("grid1", seed, false);
        let q = full_query(&w.stream);
        let r = run_strategy(&StrategyConfig { seed, ..strategy(Strategy::Ensemble) }, &q, &w.stream, &w.registry).unwrap();
        let (mut hit, mut total) = (0usize, 0usize);
        for win in &r.windows {
            for t in &win.tiles {
                for (row, col) in t.rect.cells() {
                    total += 1;
                    if t.predictor == w.grid.pattern_at(row, col) {
                        hit += 1;
                    }
                }
            }
        }
        fractions.push(hit as f64 / total as f64);
    }
    let f = mean(&fractions);
    outcome(f >= 0.9, format!("specialist share {f:.3}"))
}

fn persistence(len: usize) -> PredictorMeta {
    PredictorMeta {
        id: "persistence".into(),
        kind: PredictorKind::Persistence,
        input_rows: 1,
        input_cols: 1,
        input_len: len,
        params: Vec::new(),
        training_region: RegionRect::new(0, 0, 1, 1).unwrap(),
        training_interval: (0, 1),
    }
}

fn eef_calibration() -> Outcome {
    let train: Vec<CellSeries> = (0..16)
        .map(|c| {
            let phase = c as f64 * 0.2;
            CellSeries::new(
                c / 4,
                c % 4,
                (0..480).map(|t| 4.0 * (std::f64::consts::TAU * t as f64 / 48.0 + phase).sin()).collect(),
            )
        })
        .collect();
    let p = persistence(WINDOW);
    let sched = NoiseSchedule::scaled_to(&train, 10, 0.05).unwrap();
    let (_, pairs) = calibration_pairs(&p, &train, &sched, 5).unwrap();
    let d: Vec<f64> = pairs.iter().map(|q| q.dist).collect();
    let e: Vec<f64> = pairs.iter().map(|q| q.err).collect();
    let rho = spearman(&d, &e);
    let eef = fit_eef(&p, &train, &sched, 5).unwrap();
    let base = model_error_on(&train, &p, WINDOW, 1).unwrap();
    let gap = (eef.evaluate(0.0) - base).abs();
    outcome(
        rho >= 0.9 && gap <= eef.cv_rmse,
        format!("spearman {rho:.3}, |F(0) - base| {gap:.4} vs cv_rmse {:.4}", eef.cv_rmse),
    )
}

/// Minimum alignment cost by enumerating every monotone path.
fn exhaustive_dtw(a: &[f64], b: &[f64]) -> f64 {
    fn go(a: &[f64], b: &[f64], i: usize, j: usize) -> f64 {
        let here = (a[i] - b[j]).abs();
        if i + 1 == a.len() && j + 1 == b.len() {
            return here;
        }
        let mut best = f64::INFINITY;
        if i + 1 < a.len() && j + 1 < b.len() {
            best = best.min(go(a, b, i + 1, j + 1));
        }
        if i + 1 < a.len() {
            best = best.min(go(a, b, i + 1, j));
        }
        if j + 1 < b.len() {
            best = best.min(go(a, b, i, j + 1));
        }
        here + best
    }
    go(a, b, 0, 0)
}

fn dtw_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut mismatches = 0;
    for _ in 0..200 {
        let a: Vec<f64> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(-5..=5) as f64).collect();
        let b: Vec<f64> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(-5..=5) as f64).collect();
        if dtw(&a, &b, None).unwrap() != exhaustive_dtw(&a, &b) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over 200 pairs"))
}

fn cover_and_purity_ok(plan: &TilePlan, labels: &ClusterLabels) -> bool {
    let r = plan.region;
    let mut seen = vec![0u8; r.area()];
    for t in &plan.tiles {
        if !r.contains_rect(&t.rect) {
            return false;
        }
        let mut counts = BTreeMap::new();
        for (row, col) in t.rect.cells() {
            seen[(row - r.row0) * r.width + col - r.col0] += 1;
            *counts.entry(labels.get(row, col)).or_insert(0usize) += 1;
        }
        let top = *counts.values().max().unwrap() as f64 / t.rect.area() as f64;
        if t.rect.area() > 1 && top < plan.threshold {
            return false;
        }
    }
    seen.iter().all(|&s| s == 1)
}

fn tiling_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = 0;
    let (mut quad_tiles, mut bu_tiles) = (0usize, 0usize);
    for i in 0..1000 {
        let rows = rng.random_range(1..=32);
        let cols = rng.random_range(1..=32);
        let k = rng.random_range(1..=5);
        let threshold = [0.7, 0.9, 1.0][i % 3];
        // blocky labels so tiles are not all single cells
        let bs = rng.random_range(1..=8);
        let blocks: Vec<usize> = (0..(rows / bs + 1) * (cols / bs + 1)).map(|_| rng.random_range(0..k)).collect();
        let labels: Vec<usize> = (0..rows * cols)
            .map(|c| {
                let (r, cc) = (c / cols, c % cols);
                if rng.random_bool(0.05) {
                    rng.random_range(0..k)
                } else {
                    blocks[(r / bs) * (cols / bs + 1) + cc / bs]
                }
            })
            .collect();
        let region = RegionRect::new(0, 0, rows, cols).unwrap();
        let labels = ClusterLabels::compacted(region, &labels).unwrap();
        let q = tile_quadtree(&labels, region, threshold).unwrap();
        let b = tile_bottom_up(&labels, region, threshold).unwrap();
        if !cover_and_purity_ok(&q, &labels) || !cover_and_purity_ok(&b, &labels) {
            failures += 1;
        }
        quad_tiles += q.tiles.len();
        bu_tiles += b.tiles.len();
    }
    let (qm, bm) = (quad_tiles as f64 / 1000.0, bu_tiles as f64 / 1000.0);
    let note = if qm <= bm { "holds" } else { "does not hold" };
    outcome(
        failures == 0,
        format!("{failures} invalid plans; mean tiles quadtree {qm:.2} bottom-up {bm:.2} (quadtree <= bottom-up {note})"),
    )
}

fn random_walks(n: usize, len: usize, seed: u64) -> Vec<CellSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut x = 0.0;
            let v = (0..len)
                .map(|_| {
                    let s: f64 = StandardNormal.sample(&mut rng);
                    x += s;
                    x
                })
                .collect();
            CellSeries::new(0, i, v)
        })
        .collect()
}

fn znorm(v: &[f64]) -> Vec<f64> {
    let m = mean(v);
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    v.iter().map(|x| (x - m) / sd).collect()
}

fn sketch_fidelity() -> Outcome {
    let walks = random_walks(100, 64, 17);
    let z: Vec<Vec<f64>> = walks.iter().map(|w| znorm(&w.values)).collect();
    let mut exact = Vec::new();
    for i in 0..z.len() {
        for j in i + 1..z.len() {
            exact.push(z[i].iter().zip(&z[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
    }
    let mut rs = Vec::new();
    for b in [2, 4, 6, 8] {
        let basis = make_sketch_basis(b, 64, 99).unwrap();
        let sk: Vec<_> = walks.iter().map(|w| parcorr_sketch(w, &basis).unwrap()).collect();
        let mut approx = Vec::new();
        for i in 0..sk.len() {
            for j in i + 1..sk.len() {
                approx.push(sk[i].distance(&sk[j]));
            }
        }
        rs.push(pearson(&approx, &exact));
    }
    let monotone = rs.windows(2).all(|w| w[1] >= w[0] - 0.02);
    outcome(
        rs[3] >= 0.9 && monotone,
        format!("pearson r for b=2,4,6,8: {:.3} {:.3} {:.3} {:.3}", rs[0], rs[1], rs[2], rs[3]),
    )
}

fn silhouette_k() -> Outcome {
    let mut hits = 0;
    for seed in 0..SEEDS {
        let grid = preset("grid3", seed).unwrap();
        let stream = generate_synthetic(&grid).unwrap();
        let start = (seed as usize % 60) * WINDOW;
        let window = DataWindow::new(stream.frames()[start..start + WINDOW].to_vec()).unwrap();
        let config = ClusteringConfig {
            strategy: ClusteringStrategy::Dynamic,
            seed,
            ..Default::default()
        };
        let out = cluster_window(
            &window,
            stream.shape().full_rect(),
            Reduction::Parcorr { basis: 6 },
            &config,
            &mut ClusterState::default(),
        )
        .unwrap();
        if out.labels.k() == 3 {
            hits += 1;
        }
    }
    outcome(hits >= 28, format!("k = 3 in {hits}/30 windows"))
}

fn windowing() -> Outcome {
    let mut grid = preset("grid1", 0).unwrap();
    grid.length = 1460;
    let stream = generate_synthetic(&grid).unwrap();
    let counted = TumblingWindows::new(stream.frames().iter().cloned(), 24, 1).count();
    let formula = window_count(1460, 24, 1);
    outcome(counted == 60 && formula == 60, format!("iterator {counted}, formula {formula}"))
}

fn determinism() -> Outcome {
    let run = || {
        let w = world("grid1", 4, false);
        let q = full_query(&w.stream);
        let r = run_strategy(&StrategyConfig { seed: 4, ..strategy(Strategy::Ensemble) }, &q, &w.stream, &w.registry).unwrap();
        let ds = [Dataset {
            name: "grid1".into(),
            stream: &w.stream,
            query: q,
            static_allocation: best_fit_allocation(&w.grid),
            dynamic_allocation: best_fit_allocation(&w.grid),
        }];
        let table = compare(&ds, &Strategy::ALL, &StrategyConfig { seed: 4, ..strategy(Strategy::Ensemble) }, &w.registry).unwrap();
        (
            reports_to_jsonl(&r.windows),
            cluster_report_csv(&r.windows),
            table.to_csv(),
            w.registry.to_json(),
        )
    };
    let (a, b) = (run(), run());
    outcome(a == b, format!("jsonl {} bytes, csv {} bytes, table {} bytes", a.0.len(), a.1.len(), a.2.len()))
}

fn timed_run(w: &World, clustering: ClusteringStrategy, tiling: tilecast::tiling::TilingMethod) -> (f64, Vec<WindowReport>) {
    let q = full_query(&w.stream);
    let cfg = StrategyConfig {
        clustering: ClusteringConfig {
            strategy: clustering,
            ..Default::default()
        },
        tiling,
        ..strategy(Strategy::Ensemble)
    };
    let started = Instant::now();
    let r = run_strategy(&cfg, &q, &w.stream, &w.registry).unwrap();
    (started.elapsed().as_secs_f64(), r.windows)
}

fn performance() -> Outcome {
    use tilecast::tiling::TilingMethod;
    let w = world("grid1", 0, true);
    let (quad, qr) = timed_run(&w, ClusteringStrategy::Static, TilingMethod::Quadtree);
    let (bu, br) = timed_run(&w, ClusteringStrategy::Dynamic, TilingMethod::BottomUp);
    let tiles = |r: &[WindowReport]| r.iter().map(|x| x.tiles.len()).sum::<usize>() as f64 / r.len() as f64;
    let models = w.registry.entries().len();
    outcome(
        models == 8 && qr.len() == 60 && br.len() == 60 && quad <= 10.0 && bu <= 120.0 && quad < bu,
        format!(
            "{models} models, quadtree+static {quad:.2}s ({:.1} tiles/window), bottom-up+dynamic {bu:.2}s ({:.1} tiles/window)",
            tiles(&qr),
            tiles(&br)
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("1 motivating experiment ordering", motivating_experiment),
        ("2 baseline dominance", baseline_dominance),
        ("3 specialist recovery", specialist_recovery),
        ("4 error estimator calibration", eef_calibration),
        ("5 dtw oracle equivalence", dtw_oracle),
        ("6 tiling invariants", tiling_invariants),
        ("7 sketch fidelity", sketch_fidelity),
        ("8 silhouette k recovery", silhouette_k),
        ("9 windowing arithmetic", windowing),
        ("10 determinism", determinism),
        ("11 desk-scale performance", performance),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let o = check();
        println!("criterion {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
