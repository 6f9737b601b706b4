use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use tilecast::clustering::ClusteringStrategy;
use tilecast::ensemble::reports_to_jsonl;
use tilecast::grid::{QuerySpec, RegionRect};
use tilecast::harness::{
    best_fit_allocation, cluster_report_csv, compare, fit_registry, generate_synthetic, import_csv, preset,
    preset_fit_config, read_stg, run_strategy, write_stg, Dataset, FitConfig, GriddedStream, Strategy,
    StrategyConfig, SyntheticGridConfig, DEFAULT_WINDOW,
};
use tilecast::predictors::ModelRegistry;
use tilecast::representation::Reduction;
use tilecast::tiling::TilingMethod;
use tilecast::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(name = "tilecast", version, about = "Per-tile model selection for gridded stream forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic grid (or a converted CSV) as an STG stream file.
    Generate(GenerateArgs),
    /// Fit predictors and their error estimators; writes a JSON manifest.
    Fit(FitArgs),
    /// Run one strategy over a stream; writes one JSON report per window.
    Run(RunArgs),
    /// Run a strategy matrix over several streams; writes a CSV table of mean RMSE.
    Compare(CompareArgs),
    /// Per-window cluster count, silhouette and stage timings as CSV.
    ClusterReport(RunArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Built-in grid: grid1, grid2 or grid3.
    #[arg(long, conflicts_with_all = ["config", "csv"])]
    preset: Option<String>,
    /// Synthetic grid config (JSON).
    #[arg(long, conflicts_with = "csv")]
    config: Option<PathBuf>,
    /// Convert a CSV file instead of generating.
    #[arg(long, requires = "rows")]
    csv: Option<PathBuf>,
    /// Rows per frame in the CSV file.
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of ticks (overrides the config).
    #[arg(long)]
    length: Option<usize>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Stream file (STG).
    stream: PathBuf,
    /// Fit config (JSON) listing the models.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Derive one specialist per pattern plus a pooled model from a preset layout.
    #[arg(long)]
    preset: Option<String>,
    /// Also fit persistence, mean and ar1 (with --preset).
    #[arg(long)]
    extended: bool,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Training ticks as start,end (with --preset).
    #[arg(long, default_value = "0,240")]
    train: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    /// Model manifest written by `fit`.
    #[arg(long)]
    manifest: PathBuf,
    /// Strategy config (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    tiling: Option<TilingMethod>,
    #[arg(long)]
    clustering: Option<ClusteringStrategy>,
    #[arg(long)]
    purity: Option<f64>,
    /// parcorr or gld.
    #[arg(long)]
    dr: Option<String>,
    /// Sketch size for parcorr.
    #[arg(long)]
    basis: Option<usize>,
    /// Window length; defaults to the manifest's input length.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 1)]
    horizon: usize,
    /// Query rectangle r0,c0,h,w; defaults to the whole grid.
    #[arg(long)]
    query: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Preset whose layout gives the best-fit allocation.
    #[arg(long)]
    preset: Option<String>,
    /// Report zero stage timings so outputs are byte-reproducible.
    #[arg(long)]
    no_timings: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Stream file (STG).
    stream: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Stream files (STG), one dataset each.
    #[arg(required = true)]
    streams: Vec<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Comma-separated strategies; defaults to all.
    #[arg(long)]
    strategies: Option<String>,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, content: &str) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, content)?,
        None => std::io::stdout().write_all(content.as_bytes())?,
    }
    Ok(())
}

fn parse_pair(s: &str) -> Result<(i64, i64), Error> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts[..] {
        [a, b] => Ok((
            a.parse().map_err(|_| config_err(format!("bad start `{a}`")))?,
            b.parse().map_err(|_| config_err(format!("bad end `{b}`")))?,
        )),
        _ => Err(config_err(format!("expected start,end, got `{s}`"))),
    }
}

fn parse_rect(s: &str) -> Result<RegionRect, Error> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| config_err(format!("bad query component `{p}`"))))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [r0, c0, h, w] => RegionRect::new(r0, c0, h, w),
        _ => Err(config_err(format!("query must be r0,c0,h,w, got `{s}`"))),
    }
}

fn generate(args: GenerateArgs) -> Result<(), Error> {
    let stream = if let Some(csv) = &args.csv {
        import_csv(csv, args.rows.unwrap_or(0))?
    } else {
        let mut cfg: SyntheticGridConfig = match (&args.preset, &args.config) {
            (Some(name), _) => preset(name, args.seed.unwrap_or(0))?,
            (None, Some(path)) => load_json(path)?,
            (None, None) => return Err(config_err("generate needs --preset, --config or --csv")),
        };
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if let Some(len) = args.length {
            cfg.length = len;
        }
        generate_synthetic(&cfg)?
    };
    write_stg(&stream, &args.out)
}

fn fit(args: FitArgs) -> Result<(), Error> {
    let stream = read_stg(&args.stream)?;
    let mut cfg: FitConfig = match (&args.config, &args.preset) {
        (Some(path), _) => load_json(path)?,
        (None, Some(name)) => {
            let grid = preset(name, 0)?;
            preset_fit_config(&grid, args.window, parse_pair(&args.train)?, args.extended)?
        }
        (None, None) => return Err(config_err("fit needs --config or --preset")),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let registry = fit_registry(&stream, &cfg)?;
    emit(args.out.as_deref(), &registry.to_json())
}

struct Prepared {
    registry: ModelRegistry,
    config: StrategyConfig,
    rect: Option<RegionRect>,
    window: usize,
    horizon: usize,
}

fn prepare(p: &PipelineArgs) -> Result<Prepared, Error> {
    let text = fs::read_to_string(&p.manifest).map_err(|e| config_err(format!("{}: {e}", p.manifest.display())))?;
    let registry = ModelRegistry::from_json(&text)?;
    let mut config: StrategyConfig = match &p.config {
        Some(path) => load_json(path)?,
        None => StrategyConfig::default(),
    };
    if let Some(s) = p.strategy {
        config.strategy = s;
    }
    if let Some(t) = p.tiling {
        config.tiling = t;
    }
    if let Some(c) = p.clustering {
        config.clustering.strategy = c;
    }
    if let Some(purity) = p.purity {
        config.purity_threshold = purity;
    }
    match (p.dr.as_deref(), p.basis) {
        (Some("gld"), Some(_)) => return Err(config_err("--basis only applies to parcorr")),
        (Some(dr), basis) => {
            config.dr = match (dr.parse::<Reduction>()?, basis) {
                (Reduction::Parcorr { .. }, Some(b)) => Reduction::Parcorr { basis: b },
                (r, _) => r,
            }
        }
        (None, Some(b)) => config.dr = Reduction::Parcorr { basis: b },
        (None, None) => {}
    }
    if let Some(seed) = p.seed {
        config.seed = seed;
        config.clustering.seed = seed;
    }
    if p.no_timings {
        config.timings = false;
    }
    if !(config.purity_threshold > 0.0 && config.purity_threshold <= 1.0) {
        return Err(config_err("purity must lie in (0, 1]"));
    }
    config.clustering.validate()?;
    if let Some(name) = &p.preset {
        if config.allocation.is_empty() {
            config.allocation = best_fit_allocation(&preset(name, 0)?);
        }
    }
    let window = match p.window {
        Some(w) => w,
        None => registry
            .sorted()
            .first()
            .map(|e| e.meta.input_len)
            .ok_or_else(|| config_err("the manifest is empty"))?,
    };
    let rect = p.query.as_deref().map(parse_rect).transpose()?;
    Ok(Prepared {
        registry,
        config,
        rect,
        window,
        horizon: p.horizon,
    })
}

fn query_for(prep: &Prepared, stream: &GriddedStream) -> Result<QuerySpec, Error> {
    let rect = prep.rect.unwrap_or_else(|| stream.shape().full_rect());
    QuerySpec::new(rect, prep.horizon, prep.window)
}

fn run(args: RunArgs, cluster_report: bool) -> Result<(), Error> {
    let mut prep = prepare(&args.pipeline)?;
    if cluster_report {
        prep.config.strategy = Strategy::Ensemble;
    }
    let stream = read_stg(&args.stream)?;
    let query = query_for(&prep, &stream)?;
    let report = run_strategy(&prep.config, &query, &stream, &prep.registry)?;
    let text = if cluster_report {
        cluster_report_csv(&report.windows)
    } else {
        reports_to_jsonl(&report.windows)
    };
    emit(args.out.as_deref(), &text)
}

fn run_compare(args: CompareArgs) -> Result<(), Error> {
    let prep = prepare(&args.pipeline)?;
    let strategies: Vec<Strategy> = match &args.strategies {
        Some(s) => s.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => Strategy::ALL.to_vec(),
    };
    let streams: Vec<(String, GriddedStream)> = args
        .streams
        .iter()
        .map(|p| {
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            read_stg(p).map(|s| (name, s))
        })
        .collect::<Result<_, _>>()?;
    let datasets: Vec<Dataset> = streams
        .iter()
        .map(|(name, stream)| {
            Ok(Dataset {
                name: name.clone(),
                stream,
                query: query_for(&prep, stream)?,
                static_allocation: prep.config.allocation.clone(),
                dynamic_allocation: prep.config.allocation.clone(),
            })
        })
        .collect::<Result<_, Error>>()?;
    let table = compare(&datasets, &strategies, &prep.config, &prep.registry)?;
    emit(args.out.as_deref(), &table.to_csv())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Fit(a) => fit(a),
        Command::Run(a) => run(a, false),
        Command::Compare(a) => run_compare(a),
        Command::ClusterReport(a) => run(a, true),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tilecast: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_DATA })
        }
    }
}
