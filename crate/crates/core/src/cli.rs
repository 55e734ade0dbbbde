//! Command-line front end: `gen-data`, `train`, `eval`, `gradcheck`, `ablate`, `sweep-sigma`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
//! 3 gradient check failure.

use crate::data::raster::{load_split, write_pgm, write_synthetic, Manifest};
use crate::data::synth::{DomainSpec, SynthConfig};
use crate::data::{to_batch, Domain, Split, TileDataset, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::gradcheck_suite::{self, Scope};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::nn::Mode;
use crate::pseudo_label::{entropy_map, ProbMap};
use crate::tensor::Tape;
use crate::trainer::experiments::{ablate, group_stats, sweep_sigma, write_csv};
use crate::trainer::{load_model, Model, TrainConfig, TrainMode, Trainer};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

/// Worker thread count override.
pub const THREADS_ENV: &str = "MEMADAPT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "memadapt", version, about = "Domain-adaptive segmentation with a prototype memory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic two-domain tile dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training tiles per domain; val and test get 1/8 and 1/4 of this.
        #[arg(long, default_value_t = 400)]
        tiles: usize,
        #[arg(long, default_value_t = 32)]
        tile_size: usize,
        /// Source domain parameters (JSON).
        #[arg(long)]
        domain_a: Option<PathBuf>,
        /// Target domain parameters (JSON).
        #[arg(long)]
        domain_b: Option<PathBuf>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `output_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "target")]
        domain: String,
        /// Metrics JSON path; printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-tile normalized entropy maps (PGM).
        #[arg(long)]
        entropy_maps: Option<PathBuf>,
    },
    /// Finite-difference check of every op and of the network objectives.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every mode for each seed and tabulate target test scores.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "source_only,dfa,idma,dfa_idma")]
        modes: Vec<String>,
        /// Overrides `output_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured mode at several entropy thresholds.
    SweepSigma {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        sigmas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Overrides `output_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
    GradCheck(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
            Failure::GradCheck(_) => EXIT_GRADCHECK,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) | Failure::GradCheck(m) => f.write_str(m),
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|_| execute(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData {
            out,
            seed,
            tiles,
            tile_size,
            domain_a,
            domain_b,
            force,
        } => gen_data(&out, seed, tiles, tile_size, domain_a.as_deref(), domain_b.as_deref(), force),
        Command::Train { config, resume, out } => train(&config, resume.as_deref(), out),
        Command::Eval {
            ckpt,
            data,
            split,
            domain,
            out,
            entropy_maps,
        } => eval(&ckpt, &data, &split, &domain, out.as_deref(), entropy_maps.as_deref()),
        Command::Gradcheck { scope, cases, seed } => gradcheck(&scope, cases, seed),
        Command::Ablate {
            config,
            seeds,
            modes,
            out,
        } => run_ablation(&config, &seeds, &modes, out),
        Command::SweepSigma {
            config,
            sigmas,
            seeds,
            out,
        } => run_sweep(&config, &sigmas, &seeds, out),
    }
}

/// Reads JSON, reporting schema violations with their JSON path.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: format!("{}:{}", path.display(), e.path()),
        msg: e.inner().to_string(),
    })
}

fn is_non_empty_dir(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Pixel counts per class (VOID last) for every domain and split.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct HistogramReport {
    pub classes: Vec<String>,
    pub counts: BTreeMap<String, BTreeMap<String, Vec<u64>>>,
}

impl HistogramReport {
    pub fn fractions(&self, domain: &str, split: &str) -> Option<Vec<f64>> {
        let c = self.counts.get(domain)?.get(split)?;
        let total: u64 = c[..NUM_CLASSES].iter().sum();
        Some(c[..NUM_CLASSES].iter().map(|&v| v as f64 / total.max(1) as f64).collect())
    }
}

pub const HISTOGRAM_FILE: &str = "class_histogram.json";

fn gen_data(
    out: &Path,
    seed: u64,
    tiles: usize,
    tile_size: usize,
    domain_a: Option<&Path>,
    domain_b: Option<&Path>,
    force: bool,
) -> CliResult<()> {
    if out.exists() && !out.is_dir() {
        return Err(usage(format!("{} exists and is not a directory", out.display())));
    }
    if is_non_empty_dir(out) && !force {
        return Err(usage(format!("{} is not empty (pass --force to write into it)", out.display())));
    }
    if tiles == 0 {
        return Err(usage("--tiles must be positive"));
    }
    if tile_size < 8 {
        return Err(usage("--tile-size must be at least 8"));
    }
    let read_spec = |p: Option<&Path>, default: DomainSpec| -> CliResult<DomainSpec> {
        let spec = match p {
            Some(p) => load_json::<DomainSpec>(p).map_err(usage)?,
            None => default,
        };
        spec.validate().map_err(usage)?;
        Ok(spec)
    };
    let cfg = SynthConfig {
        layout_seed: seed,
        tile_size,
        train_tiles: tiles,
        val_tiles: (tiles / 8).max(1),
        test_tiles: (tiles / 4).max(1),
        source: read_spec(domain_a, DomainSpec::source())?,
        target: read_spec(domain_b, DomainSpec::target_same_sensor())?,
    };
    std::fs::create_dir_all(out).map_err(|e| runtime(Error::io(out, e)))?;
    let manifest = write_synthetic(out, &cfg).map_err(runtime)?;
    let mut counts: BTreeMap<String, BTreeMap<String, Vec<u64>>> = BTreeMap::new();
    for domain in [Domain::Source, Domain::Target] {
        for split in Split::ALL {
            let d = load_split(out, &manifest, domain, split, true).map_err(runtime)?;
            counts
                .entry(domain.name().into())
                .or_default()
                .insert(split.name().into(), d.class_histogram().to_vec());
        }
    }
    let mut classes: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    classes.push("void".into());
    let report = HistogramReport { classes, counts };
    let path = out.join(HISTOGRAM_FILE);
    let text = serde_json::to_string_pretty(&report).map_err(runtime)?;
    std::fs::write(&path, text).map_err(|e| runtime(Error::io(&path, e)))?;
    println!("wrote {} ({} train tiles per domain)", out.display(), tiles);
    for (domain, splits) in &report.counts {
        for split in splits.keys() {
            let f = report.fractions(domain, split).unwrap_or_default();
            let cells: Vec<String> = CLASS_NAMES
                .iter()
                .zip(&f)
                .map(|(n, v)| format!("{n} {:.1}%", 100.0 * v))
                .collect();
            println!("{domain:>6}/{split:<5} {}", cells.join("  "));
        }
    }
    Ok(())
}

fn load_config(path: &Path, out: Option<PathBuf>) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::load(path).map_err(usage)?;
    if out.is_some() {
        cfg.output_dir = out;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn train(config: &Path, resume: Option<&Path>, out: Option<PathBuf>) -> CliResult<()> {
    let cfg = load_config(config, out)?;
    if cfg.output_dir.is_none() {
        return Err(usage("no output directory: set output_dir in the config or pass --out"));
    }
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(cfg, dir),
        None => Trainer::new(cfg),
    }
    .map_err(usage)?;
    let s = trainer.run().map_err(runtime)?;
    println!(
        "{} iterations in {:.0}s; target test mIoU {} OA {} MA {}",
        s.iterations,
        s.seconds,
        fmt_score(s.test.miou),
        fmt_score(s.test.oa),
        fmt_score(s.test.ma)
    );
    Ok(())
}

fn fmt_score(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{:.2}", 100.0 * v))
}

/// Checks that a dataset directory fits the network a checkpoint was trained with.
fn check_compatible(model: &Model, manifest: &Manifest, data: &TileDataset) -> Result<()> {
    let spec = &model.spec;
    if manifest.classes.len() != spec.num_classes {
        return Err(Error::Checkpoint(format!(
            "dataset has {} classes, network predicts {}",
            manifest.classes.len(),
            spec.num_classes
        )));
    }
    for (i, t) in data.tiles.iter().enumerate() {
        if (t.height, t.width) != (spec.tile_size, spec.tile_size) {
            return Err(Error::Checkpoint(format!(
                "tile {i} is {}x{}, network expects {}x{}",
                t.width, t.height, spec.tile_size, spec.tile_size
            )));
        }
        t.validate_labels(spec.num_classes)?;
    }
    Ok(())
}

/// Confusion matrix of `model` on `data`, the same way training validation computes it.
pub fn evaluate_dataset(model: &Model, data: &TileDataset, batch: usize) -> Result<ConfusionMatrix> {
    model.evaluate(data, batch)
}

fn write_entropy_maps(model: &Model, data: &TileDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, tile) in data.tiles.iter().enumerate() {
        let (x, _) = to_batch(&[tile])?;
        let mut tape = Tape::inference();
        let v = tape.constant(x);
        let logits = model.forward_logits(&mut tape, v, Mode::Eval)?;
        let prob = tape.softmax(logits, 1)?;
        let maps = ProbMap::from_tensor(tape.value(prob))?;
        let e = entropy_map(&maps[0]);
        let path = dir.join(format!("{}_{}_{i:05}.pgm", data.domain.name(), data.split.name()));
        write_pgm(&path, tile.height, tile.width, &e.to_gray())?;
    }
    Ok(())
}

fn eval(
    ckpt: &Path,
    data_dir: &Path,
    split: &str,
    domain: &str,
    out: Option<&Path>,
    entropy_maps: Option<&Path>,
) -> CliResult<()> {
    let split = Split::parse(split).map_err(usage)?;
    let domain = Domain::parse(domain).map_err(usage)?;
    let (model, meta) = load_model(ckpt).map_err(usage)?;
    let manifest = Manifest::load(data_dir).map_err(usage)?;
    let data = load_split(data_dir, &manifest, domain, split, true).map_err(usage)?;
    check_compatible(&model, &manifest, &data).map_err(usage)?;
    let cm = evaluate_dataset(&model, &data, meta.config.eval_batch).map_err(runtime)?;
    let metrics: Metrics = cm.summary();
    if let Some(path) = out {
        metrics.write_json(path).map_err(runtime)?;
    }
    if let Some(dir) = entropy_maps {
        write_entropy_maps(&model, &data, dir).map_err(runtime)?;
    }
    println!("{}", serde_json::to_string_pretty(&metrics).map_err(runtime)?);
    Ok(())
}

fn gradcheck(scope: &str, cases: usize, seed: u64) -> CliResult<()> {
    let scope = Scope::parse(scope).map_err(usage)?;
    if cases == 0 {
        return Err(usage("--cases must be positive"));
    }
    let outcomes = gradcheck_suite::run(scope, cases, seed).map_err(runtime)?;
    let mut failed = Vec::new();
    for o in &outcomes {
        let status = if o.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:<4} {:<26} cases {:>3}  max rel err {:.3e}  {:.2}s",
            o.name, o.cases, o.max_rel_error, o.seconds
        );
        if !o.passed() {
            failed.push(o.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::GradCheck(format!(
            "{} check(s) above {:e}: {}",
            failed.len(),
            gradcheck_suite::TOLERANCE,
            failed.join(", ")
        )))
    }
}

/// One line of an aggregate table: a per-seed result or a `mean` row.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct GridRow {
    pub setting: String,
    pub seed: String,
    pub miou: f64,
    pub oa: f64,
    pub ma: f64,
}

fn grid<T>(rows: &[T], setting: impl Fn(&T) -> String, seed: impl Fn(&T) -> u64, score: impl Fn(&T) -> [f64; 3]) -> Vec<GridRow> {
    let mut out: Vec<GridRow> = rows
        .iter()
        .map(|r| {
            let [miou, oa, ma] = score(r);
            GridRow {
                setting: setting(r),
                seed: seed(r).to_string(),
                miou,
                oa,
                ma,
            }
        })
        .collect();
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        let s = setting(r);
        if !order.contains(&s) {
            order.push(s);
        }
    }
    let stats: Vec<_> = (0..3)
        .map(|k| group_stats(rows, |r| setting(r), |r| score(r)[k]))
        .collect();
    for s in order {
        out.push(GridRow {
            seed: "mean".into(),
            miou: stats[0][&s].0,
            oa: stats[1][&s].0,
            ma: stats[2][&s].0,
            setting: s,
        });
    }
    out
}

fn print_grid(rows: &[GridRow]) {
    println!("{:<12} {:>6} {:>8} {:>8} {:>8}", "setting", "seed", "mIoU", "OA", "MA");
    for r in rows {
        println!(
            "{:<12} {:>6} {:>8.2} {:>8.2} {:>8.2}",
            r.setting,
            r.seed,
            100.0 * r.miou,
            100.0 * r.oa,
            100.0 * r.ma
        );
    }
}

fn experiment_config(config: &Path, out: Option<PathBuf>, seeds: &[u64]) -> CliResult<(TrainConfig, PathBuf)> {
    let cfg = load_config(config, out)?;
    let dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| usage("no output directory: set output_dir in the config or pass --out"))?;
    if seeds.is_empty() {
        return Err(usage("--seeds is empty"));
    }
    Ok((cfg, dir))
}

pub const ABLATION_FILE: &str = "ablation.csv";
pub const SWEEP_FILE: &str = "sigma_sweep.csv";

fn run_ablation(config: &Path, seeds: &[u64], modes: &[String], out: Option<PathBuf>) -> CliResult<()> {
    let (cfg, dir) = experiment_config(config, out, seeds)?;
    let modes: Vec<TrainMode> = modes
        .iter()
        .map(|m| TrainMode::parse(m.trim()))
        .collect::<Result<_>>()
        .map_err(usage)?;
    let rows = ablate(&cfg, &modes, seeds).map_err(runtime)?;
    let table = grid(&rows, |r| r.mode.name().to_string(), |r| r.seed, |r| [r.miou, r.oa, r.ma]);
    write_csv(&dir.join(ABLATION_FILE), &table).map_err(runtime)?;
    print_grid(&table);
    Ok(())
}

fn run_sweep(config: &Path, sigmas: &[f64], seeds: &[u64], out: Option<PathBuf>) -> CliResult<()> {
    let (cfg, dir) = experiment_config(config, out, seeds)?;
    if sigmas.is_empty() {
        return Err(usage("--sigmas is empty"));
    }
    if let Some(s) = sigmas.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(usage(format!("sigma {s} outside [0, 1]")));
    }
    if !cfg.mode.has_memory() {
        return Err(usage(format!("mode {} has no memory to filter for", cfg.mode.name())));
    }
    let rows = sweep_sigma(&cfg, sigmas, seeds).map_err(runtime)?;
    let table = grid(&rows, |r| format!("{}", r.sigma), |r| r.seed, |r| [r.miou, r.oa, r.ma]);
    write_csv(&dir.join(SWEEP_FILE), &table).map_err(runtime)?;
    print_grid(&table);
    Ok(())
}
