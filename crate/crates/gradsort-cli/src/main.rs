//! Command line interface for sorted grid layouts.
//!
//! Exit codes: 0 success, 1 usage or parameter errors, 2 runtime errors
//! (I/O, bad files, evaluation mismatches), 3 numerical failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gradsort::baselines::{self, SomConfig};
use gradsort::error::{Error, Result};
use gradsort::io::{self, Dataset, DatasetInfo, ResultsFile, TOOL_VERSION};
use gradsort::loss::GridShape;
use gradsort::metrics;
use gradsort::permgen::GeneratorKind;
use gradsort::trainer::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "gradsort", version, about = "Sort vector collections onto 2-D grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random RGB color dataset and write it as CSV
    GenColors {
        /// Number of colors
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Arrange a dataset on a grid and write a results file
    Sort(SortArgs),
    /// Re-evaluate a results file against its dataset
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        results: PathBuf,
    },
    /// Render an arranged RGB dataset as a PPM image
    Render {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pixels per grid cell
        #[arg(long, default_value_t = 16)]
        cell_px: usize,
    },
    /// Check analytic gradients against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exhaustively find the optimal arrangement of a small dataset
    Oracle {
        #[arg(long)]
        dataset: PathBuf,
        /// Grid as WxH, e.g. 3x2
        #[arg(long)]
        grid: String,
        /// Optional results file to write
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SortArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// One of: gradsort, gradsort-lowrank, gradsort-softsort, som, random, 2opt
    #[arg(long, default_value = "gradsort")]
    method: String,
    /// Grid as WxH, e.g. 16x16
    #[arg(long)]
    grid: String,
    /// Optimization steps (gradsort methods) or pass budget (2opt)
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seed list; runs one job per seed in parallel and
    /// keeps the best arrangement
    #[arg(long)]
    seeds: Option<String>,
    /// JSON file with trainer or SOM settings; explicit flags win
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_grid(spec: &str, n: usize) -> Result<GridShape> {
    let (w, h) = spec
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Parameter(format!("grid must look like WxH, got {spec:?}")))?;
    let n_x: usize = w
        .trim()
        .parse()
        .map_err(|_| Error::Parameter(format!("bad grid width {w:?}")))?;
    let n_y: usize = h
        .trim()
        .parse()
        .map_err(|_| Error::Parameter(format!("bad grid height {h:?}")))?;
    let grid = GridShape::new(n_x, n_y)?;
    if grid.n() != n {
        return Err(Error::Parameter(format!(
            "grid {n_x}x{n_y} has {} cells but the dataset has {n} vectors",
            grid.n()
        )));
    }
    Ok(grid)
}

fn load_json_config<T: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
) -> Result<(T, serde_json::Value)> {
    match path {
        None => Ok((T::default(), serde_json::json!({}))),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let cfg: T = serde_json::from_value(value.clone())?;
            Ok((cfg, value))
        }
    }
}

fn dataset_info(ds: &Dataset) -> DatasetInfo {
    DatasetInfo {
        name: ds.name.clone(),
        kind: ds.kind,
        n: ds.n(),
        dim: ds.dim(),
        provenance: ds.provenance.clone(),
    }
}

/// Picks the generator for a gradsort method, keeping user-configured
/// parameters when they already use the matching generator family.
fn generator_for_method(method: &str, configured: &GeneratorKind, n: usize) -> GeneratorKind {
    match (method, configured) {
        ("gradsort", k @ GeneratorKind::FullRankGumbelSinkhorn { .. }) => k.clone(),
        ("gradsort", _) => GeneratorKind::full_rank_default(),
        ("gradsort-lowrank", k @ GeneratorKind::LowRank { .. }) => k.clone(),
        ("gradsort-lowrank", _) => GeneratorKind::LowRank {
            rank: GeneratorKind::default_lowrank_rank(n),
            tau: 1.0,
        },
        ("gradsort-softsort", k @ GeneratorKind::SoftSort { .. }) => k.clone(),
        _ => GeneratorKind::SoftSort { tau: 1.0 },
    }
}

fn run_sort(args: &SortArgs) -> Result<()> {
    let ds = io::load_csv(&args.dataset)?;
    let grid = parse_grid(&args.grid, ds.n())?;
    let seeds: Vec<u64> = match (&args.seeds, args.seed) {
        (Some(list), _) => {
            let mut v = Vec::new();
            for part in list.split(',') {
                let s: u64 = part.trim().parse().map_err(|_| {
                    Error::Parameter(format!("bad seed {part:?} in --seeds"))
                })?;
                v.push(s);
            }
            if v.is_empty() {
                return Err(Error::Parameter("--seeds must name at least one seed".into()));
            }
            v
        }
        (None, s) => vec![s.unwrap_or(0)],
    };

    let started = std::time::Instant::now();
    let (best, config_json) = match args.method.as_str() {
        "gradsort" | "gradsort-lowrank" | "gradsort-softsort" => {
            let (mut cfg, _) = load_json_config::<TrainConfig>(args.config.as_deref())?;
            cfg.generator = generator_for_method(&args.method, &cfg.generator, ds.n());
            if let Some(steps) = args.steps {
                cfg.max_steps = steps;
            }
            cfg.validate()?;
            let results = fan_out(&seeds, |seed| {
                let mut c = cfg.clone();
                c.seed = seed;
                let r = trainer::train(&ds.vectors, &grid, &c)?;
                Ok(SeedRun {
                    seed,
                    q_nbr: r.final_quality.q_nbr,
                    permutation: r.permutation,
                    quality: r.final_quality,
                    converged_step: r.converged_step,
                    resolved_by_lap: r.resolved_by_lap,
                    loss_trace: r.loss_trace,
                })
            })?;
            let mut cfg_json = serde_json::to_value(&cfg)?;
            let best = pick_best(results, &mut cfg_json);
            (best, cfg_json)
        }
        "som" => {
            let (cfg, _) = load_json_config::<SomConfig>(args.config.as_deref())?;
            let results = fan_out(&seeds, |seed| {
                let c = SomConfig { seed, ..cfg.clone() };
                let perm = baselines::som_sort(&ds.vectors, &grid, &c)?;
                let q = metrics::quality(&perm, &ds.vectors, &grid, 16.0)?;
                Ok(SeedRun {
                    seed,
                    q_nbr: q.q_nbr,
                    permutation: perm,
                    quality: q,
                    converged_step: None,
                    resolved_by_lap: false,
                    loss_trace: vec![],
                })
            })?;
            let mut cfg_json = serde_json::to_value(&cfg)?;
            let best = pick_best(results, &mut cfg_json);
            (best, cfg_json)
        }
        "random" => {
            let results = fan_out(&seeds, |seed| {
                let perm = baselines::random_arrangement(ds.n(), seed)?;
                let q = metrics::quality(&perm, &ds.vectors, &grid, 16.0)?;
                Ok(SeedRun {
                    seed,
                    q_nbr: q.q_nbr,
                    permutation: perm,
                    quality: q,
                    converged_step: None,
                    resolved_by_lap: false,
                    loss_trace: vec![],
                })
            })?;
            let mut cfg_json = serde_json::json!({});
            let best = pick_best(results, &mut cfg_json);
            (best, cfg_json)
        }
        "2opt" => {
            let passes = args.steps.unwrap_or(1000);
            let results = fan_out(&seeds, |seed| {
                let start = baselines::random_arrangement(ds.n(), seed)?;
                let perm = baselines::swap_2opt(&ds.vectors, &grid, &start, passes)?;
                let q = metrics::quality(&perm, &ds.vectors, &grid, 16.0)?;
                Ok(SeedRun {
                    seed,
                    q_nbr: q.q_nbr,
                    permutation: perm,
                    quality: q,
                    converged_step: None,
                    resolved_by_lap: false,
                    loss_trace: vec![],
                })
            })?;
            let mut cfg_json = serde_json::json!({ "max_passes": passes });
            let best = pick_best(results, &mut cfg_json);
            (best, cfg_json)
        }
        other => {
            return Err(Error::Parameter(format!(
                "unknown method {other:?}; expected gradsort, gradsort-lowrank, \
                 gradsort-softsort, som, random or 2opt"
            )))
        }
    };

    let rf = ResultsFile {
        tool_version: TOOL_VERSION.into(),
        dataset: dataset_info(&ds),
        method: args.method.clone(),
        grid: (grid.n_x, grid.n_y),
        config: config_json,
        permutation: best.permutation,
        quality: best.quality,
        converged_step: best.converged_step,
        resolved_by_lap: best.resolved_by_lap,
        loss_trace: best.loss_trace,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    rf.save(&args.out)?;
    println!(
        "method={} grid={}x{} seed={} q_nbr={:.6} out={}",
        args.method,
        grid.n_x,
        grid.n_y,
        best.seed,
        rf.quality.q_nbr,
        args.out.display()
    );
    Ok(())
}

struct SeedRun {
    seed: u64,
    q_nbr: f64,
    permutation: gradsort::Permutation,
    quality: gradsort::QualityReport,
    converged_step: Option<usize>,
    resolved_by_lap: bool,
    loss_trace: Vec<gradsort::trainer::TraceRecord>,
}

/// Runs one job per seed on its own thread and collects all results.
fn fan_out<F>(seeds: &[u64], job: F) -> Result<Vec<SeedRun>>
where
    F: Fn(u64) -> Result<SeedRun> + Sync + Send,
{
    if seeds.len() == 1 {
        return Ok(vec![job(seeds[0])?]);
    }
    let job = &job;
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&s| scope.spawn(move || job(s)))
            .collect();
        let mut out = Vec::new();
        for h in handles {
            out.push(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

fn pick_best(mut runs: Vec<SeedRun>, cfg_json: &mut serde_json::Value) -> SeedRun {
    for r in &runs {
        println!("seed={} q_nbr={:.6}", r.seed, r.q_nbr);
    }
    runs.sort_by(|a, b| b.q_nbr.total_cmp(&a.q_nbr).then(a.seed.cmp(&b.seed)));
    let best = runs.remove(0);
    if let serde_json::Value::Object(map) = cfg_json {
        map.insert("seed".into(), serde_json::json!(best.seed));
    }
    best
}

fn run_eval(dataset: &Path, results: &Path) -> Result<()> {
    let ds = io::load_csv(dataset)?;
    let rf = ResultsFile::load(results)?;
    if rf.dataset.n != ds.n() || rf.dataset.dim != ds.dim() {
        return Err(Error::InvalidInput(format!(
            "results were computed for a {}x{} dataset, this one is {}x{}",
            rf.dataset.n,
            rf.dataset.dim,
            ds.n(),
            ds.dim()
        )));
    }
    let grid = GridShape::new(rf.grid.0, rf.grid.1)?;
    if grid.n() != ds.n() {
        return Err(Error::InvalidInput("results grid does not cover the dataset".into()));
    }
    let p = rf
        .config
        .get("p_exponent")
        .and_then(|v| v.as_f64())
        .unwrap_or(16.0);
    let q = metrics::quality(&rf.permutation, &ds.vectors, &grid, p)?;
    let dq = (q.q_nbr - rf.quality.q_nbr).abs();
    println!(
        "stored q_nbr={:.9} recomputed q_nbr={:.9} delta={dq:.3e}",
        rf.quality.q_nbr, q.q_nbr
    );
    if dq > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "quality mismatch: results file claims {:.9} but the dataset gives {:.9}",
            rf.quality.q_nbr, q.q_nbr
        )));
    }
    println!("ok");
    Ok(())
}

fn run_render(dataset: &Path, results: &Path, out: &Path, cell_px: usize) -> Result<()> {
    let ds = io::load_csv(dataset)?;
    let rf = ResultsFile::load(results)?;
    let grid = GridShape::new(rf.grid.0, rf.grid.1)?;
    let bytes = io::render_ppm(&ds, &rf.permutation, &grid, cell_px)?;
    std::fs::write(out, bytes)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run_gradcheck(seed: u64) -> Result<()> {
    let report = metrics::gradcheck_suite(seed)?;
    for e in &report.entries {
        println!(
            "{} {}: max_rel_err={:.3e}",
            if e.passed { "PASS" } else { "FAIL" },
            e.name,
            e.max_rel_err
        );
    }
    if report.all_passed() {
        println!("all gradients match finite differences");
        Ok(())
    } else {
        Err(Error::Numeric("gradient check failed".into()))
    }
}

fn run_oracle(dataset: &Path, grid_spec: &str, out: Option<&Path>) -> Result<()> {
    let ds = io::load_csv(dataset)?;
    let grid = parse_grid(grid_spec, ds.n())?;
    let started = std::time::Instant::now();
    let (perm, l_nbr) = metrics::brute_force_optimum(&ds.vectors, &grid)?;
    let q = metrics::quality(&perm, &ds.vectors, &grid, 16.0)?;
    println!(
        "optimal l_nbr={l_nbr:.9} q_nbr={:.9} assignment={:?}",
        q.q_nbr,
        perm.assignment()
    );
    if let Some(path) = out {
        let rf = ResultsFile {
            tool_version: TOOL_VERSION.into(),
            dataset: dataset_info(&ds),
            method: "oracle".into(),
            grid: (grid.n_x, grid.n_y),
            config: serde_json::json!({}),
            permutation: perm,
            quality: q,
            converged_step: None,
            resolved_by_lap: false,
            loss_trace: vec![],
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        rf.save(path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenColors { n, seed, out } => {
            let ds = io::gen_colors(n, seed)?;
            io::save_csv(&ds, &out)?;
            println!("wrote {} colors to {}", n, out.display());
            Ok(())
        }
        Command::Sort(args) => run_sort(&args),
        Command::Eval { dataset, results } => run_eval(&dataset, &results),
        Command::Render { dataset, results, out, cell_px } => {
            run_render(&dataset, &results, &out, cell_px)
        }
        Command::Gradcheck { seed } => run_gradcheck(seed),
        Command::Oracle { dataset, grid, out } => run_oracle(&dataset, &grid, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // keep clap's help/version on stdout with exit 0
            if e.use_stderr() {
                eprintln!("error: usage: {e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
