//! Command surface of the `routecast` binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use routecast_core::dataset::{self, Sample};
use routecast_core::features::{cell_density_map, rudy_map};
use routecast_core::gradcheck::{self, Suite};
use routecast_core::io::nodes::{read_nets, resolve_nets};
use routecast_core::io::{read_grid, read_nodes, save_grid, save_pgm, GridFormat, LabelGrid, Resolution, SynthConfig};
use routecast_core::metrics::{evaluate_dataset, EvalOptions, KendallVariant};
use routecast_core::model::Model;
use routecast_core::train::{load_model, Checkpoint, Precise, Trainer};
use routecast_core::{Config, Error, Precision};

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_COMPAT: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Io { .. } | Error::Parse { .. } | Error::Validation(_) | Error::Format(_) | Error::Data(_) => {
                EXIT_DATA
            }
            Error::Compat(_) => EXIT_COMPAT,
            Error::NonFinite { .. } | Error::Tensor(_) => EXIT_INTERNAL,
        };
        Self::new(code, e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(EXIT_DATA, format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "routecast",
    version,
    about = "Routability map prediction from raw node placements"
)]
pub struct Cli {
    /// Overrides the seed in the config (train) or of the generator (gen).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batch members during training.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Arithmetic precision for training and inference.
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a directory of node files with `.cfg1` labels.
    Train(TrainArgs),
    /// Predict a routability map for one node file.
    Predict(PredictArgs),
    /// Correlate predicted maps against labels, paired by file stem.
    Eval(EvalArgs),
    /// Rasterize a hand-crafted baseline feature map.
    Featurize(FeaturizeArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic corpus, optionally with a matching desk-scale config.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config; the desk profile is used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Validate the config, print the parameter count and stop.
    #[arg(long)]
    pub dry_run: bool,
    /// Continue from a `last.cfck` written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs (the rest can be resumed).
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Output path prefix; `.cfg1`, `.txt` and `.pgm` are appended.
    #[arg(long)]
    pub out: PathBuf,
    /// Requested raster, `N` or `WxH`; must match the checkpoint.
    #[arg(long, value_parser = parse_resolution)]
    pub resolution: Option<Resolution>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub label: PathBuf,
    /// Correlate all cells at once instead of averaging per sample.
    #[arg(long)]
    pub pooled: bool,
    /// Use tau-a instead of tau-b.
    #[arg(long)]
    pub tau_a: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Density,
    Rudy,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub input: PathBuf,
    /// Net file, required for RUDY.
    #[arg(long)]
    pub nets: Option<PathBuf>,
    #[arg(long, value_parser = parse_resolution, default_value = "64")]
    pub resolution: Resolution,
    /// Output path prefix; `.cfg1`, `.txt` and `.pgm` are appended.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "all", value_parser = |s: &str| s.parse::<Suite>())]
    pub module: Suite,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 1000)]
    pub nodes: usize,
    #[arg(long, default_value_t = 4)]
    pub clusters: usize,
    #[arg(long, value_parser = parse_resolution, default_value = "64")]
    pub resolution: Resolution,
    /// Also write a desk-scale training config for this corpus here.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn parse_resolution(s: &str) -> std::result::Result<Resolution, String> {
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("bad resolution `{s}`, expected N or WxH"))
    };
    match s.split_once(['x', 'X']) {
        Some((w, h)) => Ok(Resolution::new(parse(w)?, parse(h)?)),
        None => Ok(Resolution::square(parse(s)?)),
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a),
        Command::Predict(a) => cmd_predict(cli, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Featurize(a) => cmd_featurize(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Gen(a) => cmd_gen(cli, a),
    }
}

fn load_config(cli: &Cli, path: Option<&Path>) -> CliResult<Config> {
    let mut config = match path {
        Some(p) => Config::load(p).map_err(|e| match e {
            Error::Io { .. } => CliError::new(EXIT_CONFIG, e.to_string()),
            other => other.into(),
        })?,
        None => Config::desk(),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    if let Some(t) = cli.threads {
        config.train.threads = t;
    }
    if let Some(p) = cli.precision {
        config.train.precision = p;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    if let Some(ckpt) = &a.resume {
        let ckpt = Checkpoint::load(ckpt)?;
        let config: Config = ckpt.json("config")?;
        let data = load_data(a.data.as_deref())?;
        return match config.train.precision {
            Precision::F32 => train_loop(Trainer::<f32>::resume(&ckpt, &data)?, &data, a),
            Precision::F64 => train_loop(Trainer::<f64>::resume(&ckpt, &data)?, &data, a),
        };
    }
    let config = load_config(cli, a.config.as_deref())?;
    if a.dry_run {
        let count = Model::<f32>::new(&config.model, config.train.seed)?.params().numel();
        println!("config ok: {count} parameters, {} raster", config.model.resolution());
        return Ok(());
    }
    let data = load_data(a.data.as_deref())?;
    match config.train.precision {
        Precision::F32 => train_loop(Trainer::<f32>::new(&config, &data)?, &data, a),
        Precision::F64 => train_loop(Trainer::<f64>::new(&config, &data)?, &data, a),
    }
}

fn load_data(dir: Option<&Path>) -> CliResult<Vec<Sample>> {
    let dir = dir.ok_or_else(|| CliError::new(EXIT_DATA, "--data is required for training"))?;
    let data = dataset::load_dir(dir)?;
    info!("{} samples from {}", data.len(), dir.display());
    Ok(data)
}

fn train_loop<T: Precise>(mut trainer: Trainer<T>, data: &[Sample], a: &TrainArgs) -> CliResult<()> {
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let log_path = a.out.join("train.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let until = a.stop_after.unwrap_or(usize::MAX);
    let out = a.out.clone();
    trainer.run(data, until, |t, rec| {
        let line = format!(
            "epoch {} train_loss {:.6} val_loss {} val_pearson {} lr {:.3e} seconds {:.1}\n",
            rec.epoch,
            rec.train_loss,
            rec.val_loss.map_or("n/a".into(), |v| format!("{v:.6}")),
            rec.val.pearson.map_or("n/a".into(), |v| format!("{v:.4}")),
            rec.lr,
            rec.seconds
        );
        log.write_all(line.as_bytes()).map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        t.checkpoint().save(&out.join("last.cfck"))
    })?;
    trainer.best_checkpoint().save(&a.out.join("model.cfck"))?;
    let history = serde_json::to_string_pretty(trainer.history()).expect("history serializes");
    let path = a.out.join("history.json");
    fs::write(&path, history).map_err(|e| io_err(&path, e))?;
    match trainer.best_epoch() {
        Some(e) => println!("trained {} epochs, best epoch {e}", trainer.epoch()),
        None => println!("trained {} epochs", trainer.epoch()),
    }
    Ok(())
}

fn write_outputs(prefix: &Path, grid: &LabelGrid) -> CliResult<()> {
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let with = |ext: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(format!(".{ext}"));
        PathBuf::from(s)
    };
    save_grid(&with("cfg1"), grid, GridFormat::Binary)?;
    save_grid(&with("txt"), grid, GridFormat::Text)?;
    save_pgm(&with("pgm"), grid)?;
    Ok(())
}

fn cmd_predict(cli: &Cli, a: &PredictArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.model)?;
    let config: Config = ckpt.json("config")?;
    let res = config.model.resolution();
    if let Some(r) = a.resolution {
        if r != res {
            return Err(CliError::new(
                EXIT_COMPAT,
                format!("checkpoint predicts {res}, requested {r}"),
            ));
        }
    }
    let start = Instant::now();
    let nodes = read_nodes(&a.input)?;
    if nodes.is_empty() {
        warn!("{}: no nodes; the map is the output bias only", a.input.display());
    }
    let grid = match cli.precision.unwrap_or(config.train.precision) {
        Precision::F32 => load_model::<f32>(&ckpt)?.predict(&nodes)?,
        Precision::F64 => load_model::<f64>(&ckpt)?.predict(&nodes)?,
    };
    let elapsed = start.elapsed();
    write_outputs(&a.out, &grid)?;
    println!(
        "{} nodes -> {}x{} map in {:.1} ms",
        nodes.len(),
        grid.width,
        grid.height,
        elapsed.as_secs_f64() * 1e3
    );
    Ok(())
}

/// Grid files in `dir` keyed by stem; `.cfg1` wins over `.txt` for the same stem.
fn grid_files(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let (Some(stem), Some(ext)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.extension().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        match ext {
            "cfg1" => {
                out.insert(stem.to_string(), path);
            }
            "txt" => {
                out.entry(stem.to_string()).or_insert(path);
            }
            _ => {}
        }
    }
    Ok(out)
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let preds = grid_files(&a.pred)?;
    let labels = grid_files(&a.label)?;
    for name in preds.keys().filter(|k| !labels.contains_key(*k)) {
        warn!("{name}: prediction has no label, excluded");
    }
    for name in labels.keys().filter(|k| !preds.contains_key(*k)) {
        warn!("{name}: label has no prediction, excluded");
    }
    let mut pairs = Vec::new();
    for (name, p) in &preds {
        if let Some(l) = labels.get(name) {
            pairs.push((name.clone(), read_grid(p)?, read_grid(l)?));
        }
    }
    let refs: Vec<_> = pairs.iter().map(|(n, p, l)| (n.clone(), p, l)).collect();
    let opts = EvalOptions {
        pooled: a.pooled,
        kendall: if a.tau_a {
            KendallVariant::TauA
        } else {
            KendallVariant::TauB
        },
    };
    let report = evaluate_dataset(&refs, opts)?;
    print!("{}", report.to_table());
    if let Some(path) = &a.json {
        fs::write(path, report.to_json()).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn cmd_featurize(a: &FeaturizeArgs) -> CliResult<()> {
    let nodes = read_nodes(&a.input)?;
    let grid = match a.method {
        Method::Density => cell_density_map(&nodes, a.resolution),
        Method::Rudy => {
            let path = a
                .nets
                .as_ref()
                .ok_or_else(|| CliError::new(EXIT_CONFIG, "--nets is required for rudy"))?;
            let nets = resolve_nets(&read_nets(path)?, &nodes)?;
            rudy_map(&nets, &nodes, a.resolution)?
        }
    };
    write_outputs(&a.out, &grid)?;
    println!(
        "{:?} map {}x{} from {} nodes",
        a.method,
        grid.width,
        grid.height,
        nodes.len()
    );
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let start = Instant::now();
    let results = gradcheck::run_suite(a.module, a.tol)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok  " } else { "FAIL" };
        println!("{status} {:<40} max rel err {:.3e}", r.name, r.report.max_rel_error);
        failed += usize::from(!r.passed());
    }
    println!(
        "{} cases, {failed} failed, tol {:.0e}, {:.1}s",
        results.len(),
        a.tol,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(CliError::new(
            EXIT_INTERNAL,
            format!("{failed} gradient check(s) failed"),
        ));
    }
    Ok(())
}

fn cmd_gen(cli: &Cli, a: &GenArgs) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    let synth = SynthConfig::new(a.nodes, a.clusters, a.resolution);
    let samples = dataset::synthetic(seed, a.count, &synth)?;
    dataset::write_dir(&a.out, &samples)?;
    println!("wrote {} circuits to {}", samples.len(), a.out.display());
    let Some(path) = &a.config else {
        return Ok(());
    };
    let mut config = Config::desk();
    config.model.encoder.base_resolution = a.resolution;
    config.train.epochs = 30;
    config.train.warmup_epochs = 3;
    config.train.seed = seed;
    fs::write(path, config.to_json()).map_err(|e| io_err(path, e))?;
    println!("wrote config to {}", path.display());
    Ok(())
}
