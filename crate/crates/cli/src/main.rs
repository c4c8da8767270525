use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use lego_har::bench::{grid_csv, layer_timing_csv, run_grid, time_layer, Grid, LayerBench};
use lego_har::checkpoint::Checkpoint;
use lego_har::config::{InputShape, ModelConfig, PAPER_SCALE_EPOCHS};
use lego_har::cost::{cost_report, CostReport};
use lego_har::data::{load_windowed, normalize, split, Manifest, WindowedDataset};
use lego_har::metrics::EvalReport;
use lego_har::pipeline::{prepare, train_config};
use lego_har::train::{evaluate, metrics_csv};
use lego_har::Error;

const EXIT_INVALID: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_PARTIAL_GRID: u8 = 4;

/// Train, evaluate, inspect and benchmark Lego-filter CNNs for activity recognition.
#[derive(Debug, Parser)]
#[command(name = "legohar", version)]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    /// Force single-threaded, bit-reproducible execution. Execution is always
    /// single-threaded, so this only documents intent.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and print metrics as JSON.
    Eval(EvalArgs),
    /// Report per-layer parameters, FLOPs, compression ratio and speedup.
    Inspect(InspectArgs),
    /// Train an (o, m) grid and/or time the naive and split-transform-merge paths.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Model config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seed for initialization and batch order; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of epochs; overrides the config.
    #[arg(long, conflicts_with = "paper_scale")]
    epochs: Option<usize>,
    /// Train for at least 500 epochs.
    #[arg(long)]
    paper_scale: bool,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write per-epoch metrics (CSV).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitPart {
    All,
    Train,
    Test,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest; defaults to the one named in the checkpoint's config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which windows to score. `train` and `test` apply the checkpoint's split.
    #[arg(long, value_enum, default_value_t = SplitPart::All)]
    split: SplitPart,
    /// Also write the confusion matrix (CSV) here.
    #[arg(long)]
    confusion: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["config", "checkpoint"]))]
struct InspectArgs {
    /// Model config (JSON); its dataset manifest supplies the input shape.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Also write the report as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Model config for the grid.
    #[arg(long, requires = "grid")]
    config: Option<PathBuf>,
    /// Grid of fragment counts and bank ratios, e.g. "o=2,4;m=0.5,0.25".
    #[arg(long, requires = "config")]
    grid: Option<String>,
    /// Timing repeats; the median is reported.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Comma-separated seeds; F1 is averaged over them. Defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Number of epochs per cell; overrides the config.
    #[arg(long)]
    epochs: Option<usize>,
    /// Where to write the grid CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Time a single large Lego layer on random input.
    #[arg(long)]
    layer: bool,
    /// Input channels of the timed layer.
    #[arg(long, default_value_t = LayerBench::default().channels)]
    channels: usize,
    /// Output filters of the timed layer.
    #[arg(long, default_value_t = LayerBench::default().filters)]
    filters: usize,
    /// Fragments of the timed layer.
    #[arg(long, default_value_t = LayerBench::default().o)]
    o: usize,
    /// Bank ratio of the timed layer.
    #[arg(long, default_value_t = LayerBench::default().m)]
    m: f64,
    /// Temporal kernel extent of the timed layer.
    #[arg(long, default_value_t = LayerBench::default().kernel)]
    kernel: usize,
    /// Input length of the timed layer.
    #[arg(long, default_value_t = LayerBench::default().time)]
    time: usize,
    /// Input width (sensor channels) of the timed layer.
    #[arg(long, default_value_t = LayerBench::default().width)]
    width: usize,
    /// Batch size of the timed layer.
    #[arg(long, default_value_t = LayerBench::default().batch)]
    batch: usize,
}

/// A failed command with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_INVALID,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<(), Error> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn load_config(path: &Path) -> Result<ModelConfig, Error> {
    let cfg = ModelConfig::load(path)?;
    cfg.validate_static()?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> CmdResult {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.training.epochs = epochs;
    }
    if args.paper_scale {
        cfg.training.epochs = cfg.training.epochs.max(PAPER_SCALE_EPOCHS);
    }
    cfg.validate_static()?;

    let data = prepare(&cfg)?;
    info!(
        "{}: {} train / {} test windows, {} classes",
        cfg.name,
        data.train.len(),
        data.test.len(),
        data.classes()
    );
    let run = train_config(&cfg, &data, |_| {})?;
    if let Some(path) = &args.metrics {
        write_file(path, metrics_csv(&run.history, &run.block_names).as_bytes())?;
    }
    if let Some(path) = &args.out {
        run.checkpoint.save(path)?;
        info!("checkpoint written to {}", path.display());
    }
    let last = run.last();
    emit(&format!(
        "epochs {}  train loss {:.4}  test weighted F1 {:.4}  test accuracy {:.4}\n",
        last.epoch, last.train_loss, last.test_f1, last.test_accuracy
    ))?;
    Ok(())
}

fn eval(args: EvalArgs) -> CmdResult {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let manifest_path = args.data.unwrap_or_else(|| ck.config.data.clone());
    let manifest = Manifest::load(&manifest_path)?;
    let ds = load_windowed(&manifest)?;
    let mut ds: WindowedDataset = match args.split {
        SplitPart::All => ds,
        part => {
            let parts = split(&ds, &ck.config.split)?;
            ds.subset(if part == SplitPart::Train { &parts.train } else { &parts.test })
        }
    };
    if ds.class_names != ck.class_names {
        warn!(
            "dataset classes {:?} differ from the checkpoint's {:?}",
            ds.class_names, ck.class_names
        );
    }
    if let Some(stats) = &ck.normalization {
        if stats.channels() != ds.channels() {
            return Err(Error::InvalidInput(format!(
                "dataset has {} channels, the checkpoint was trained on {}",
                ds.channels(),
                stats.channels()
            ))
            .into());
        }
        normalize(&mut ds, stats)?;
    }
    let cm = evaluate(&ck.network, &ds)?;
    let report = EvalReport::from_confusion(&cm, &ck.class_names)?;
    if let Some(path) = &args.confusion {
        write_file(path, cm.to_csv(&ck.class_names)?.as_bytes())?;
    }
    emit(&(serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n"))?;
    Ok(())
}

fn inspect_report(args: &InspectArgs) -> Result<CostReport, Error> {
    if let Some(path) = &args.checkpoint {
        let ck = Checkpoint::load(path)?;
        return cost_report(&ck.config.layers, ck.network.input(), ck.network.classes());
    }
    let cfg = load_config(args.config.as_deref().expect("clap enforces one source"))?;
    let manifest = Manifest::load(&cfg.data)?;
    let (channels, classes) = match manifest.static_shape() {
        Some(shape) => shape,
        None => {
            let ds = load_windowed(&manifest)?;
            (ds.channels(), ds.num_classes())
        }
    };
    cost_report(&cfg.layers, InputShape::window(manifest.window_len, channels), classes)
}

fn inspect(args: InspectArgs) -> CmdResult {
    let report = inspect_report(&args)?;
    if let Some(path) = &args.csv {
        write_file(path, report.to_csv()?.as_bytes())?;
    }
    if args.json {
        emit(&(report.to_json() + "\n"))?;
    } else {
        emit(&report.to_table())?;
    }
    Ok(())
}

fn bench(args: BenchArgs) -> CmdResult {
    if !args.layer && args.grid.is_none() {
        return Err(Error::InvalidInput("nothing to do: pass --layer and/or --config with --grid".into()).into());
    }
    if args.repeats == 0 {
        return Err(Error::InvalidInput("--repeats must be at least 1".into()).into());
    }
    if args.layer {
        let case = LayerBench {
            channels: args.channels,
            filters: args.filters,
            o: args.o,
            m: args.m,
            kernel: args.kernel,
            time: args.time,
            width: args.width,
            batch: args.batch,
        };
        let timing = time_layer(&case, args.repeats, 0)?;
        info!(
            "naive {:.2} ms, split-transform-merge {:.2} ms: {:.2}x measured, {:.2}x theoretical",
            timing.naive.median(),
            timing.stm.median(),
            timing.measured_speedup(),
            timing.theoretical_speedup
        );
        emit(&layer_timing_csv(&timing))?;
    }
    let (Some(config), Some(grid)) = (&args.config, &args.grid) else {
        return Ok(());
    };
    let grid: Grid = grid.parse()?;
    let mut cfg = load_config(config)?;
    if let Some(epochs) = args.epochs {
        cfg.training.epochs = epochs;
        cfg.validate_static()?;
    }
    let seeds = if args.seeds.is_empty() { vec![cfg.seed] } else { args.seeds.clone() };
    let data = prepare(&cfg)?;
    let rows = run_grid(&cfg, &data, &grid, &seeds, args.repeats, |row| match &row.result {
        Ok(r) => info!("{}: weighted F1 {:.4}, ratio {:.2}x", row.cell, r.weighted_f1, r.ratio),
        Err(e) => warn!("{}: failed: {e}", row.cell),
    })?;
    let csv = grid_csv(&rows, seeds.len(), args.repeats);
    match &args.out {
        Some(path) => write_file(path, csv.as_bytes())?,
        None => emit(&csv)?,
    }
    let failed = rows.iter().filter(|r| r.failed()).count();
    if failed > 0 {
        return Err(Failure {
            code: EXIT_PARTIAL_GRID,
            message: format!("{failed} of {} grid cells failed", rows.len()),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if cli.deterministic {
        info!("deterministic mode: single-threaded execution");
    }
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
