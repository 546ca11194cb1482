//! `floodfuse` command-line driver.
//!
//! Exit codes: 0 success, 1 any other failure, 2 malformed configuration or
//! arguments, 3 missing input file. Failures print one JSON object on
//! stderr: `{"error": <kind>, "message": <text>, "path": <config key>}`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use floodfuse::config::{DateRange, RunConfig};
use floodfuse::datapipe::CompletenessRule;
use floodfuse::gradcheck;
use floodfuse::pipeline;
use floodfuse::train::{OptimizerKind, Phase};
use floodfuse::{Error, ModelKind};
use serde_json::json;

#[derive(Parser)]
#[command(name = "floodfuse", version, about = "Fractional inundation mapping with a CNN-LSTM over optical composites")]
struct Cli {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic chip dataset.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Chips per grid side.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        cloud_prob: Option<f64>,
    },
    /// Validate external chip files and write their manifest.
    Ingest {
        /// Directory searched recursively for `.bin` chips.
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Accept chips with one missing target pixel (filled from neighbours).
        #[arg(long)]
        lenient: bool,
    },
    /// Train one leave-one-year-out fold.
    Train {
        #[arg(long)]
        year: i32,
        #[arg(long, value_enum)]
        model: Option<Kind>,
        #[command(flatten)]
        paths: TrainPaths,
        #[command(flatten)]
        opts: TrainOverrides,
    },
    /// Train every fold and write the comparison table.
    Cv {
        #[arg(long, value_enum, default_value = "both")]
        model: Models,
        #[command(flatten)]
        paths: TrainPaths,
        #[command(flatten)]
        opts: TrainOverrides,
    },
    /// Metrics, error map and series of one checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict to the chips of one year.
        #[arg(long)]
        year: Option<i32>,
        #[arg(long)]
        min_visits: Option<usize>,
    },
    /// Ensemble run over a dataset: series, monsoon maxima and maps.
    Infer {
        /// Ensemble member; repeat for more. Defaults to every fold
        /// checkpoint of `--model` in the runs directory.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "fusion")]
        model: Kind,
        #[arg(long)]
        runs: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip samples whose input window touches START..END (repeatable).
        #[arg(long, value_name = "START..END")]
        exclude: Vec<String>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Finite-difference verification of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Fusion,
    Baseline,
}

impl From<Kind> for ModelKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Fusion => ModelKind::Fusion,
            Kind::Baseline => ModelKind::Baseline,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Models {
    Fusion,
    Baseline,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Optimizer {
    Ranger,
    Adam,
}

#[derive(Args)]
struct TrainPaths {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    runs: Option<PathBuf>,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<Optimizer>,
    /// Phases as `EPOCHS:LR` pairs, e.g. `20:1e-3,5:1e-4,5:1e-5`.
    #[arg(long)]
    lr_schedule: Option<String>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    max_steps: Option<usize>,
}

fn parse_schedule(s: &str) -> Result<Vec<Phase>, Error> {
    let bad = |detail: String| Error::Config { path: "train.lr_schedule".into(), message: detail };
    s.split(',')
        .map(|part| {
            let (e, lr) = part.split_once(':').ok_or_else(|| bad(format!("`{part}` is not EPOCHS:LR")))?;
            let epochs = e.trim().parse().map_err(|_| bad(format!("bad epoch count `{e}`")))?;
            let lr = lr.trim().parse().map_err(|_| bad(format!("bad learning rate `{lr}`")))?;
            Ok(Phase { epochs, lr })
        })
        .collect()
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Error> {
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.width {
            t.width = v;
        }
        if let Some(v) = self.hidden {
            t.hidden = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.optimizer {
            t.optimizer = match v {
                Optimizer::Ranger => OptimizerKind::Ranger,
                Optimizer::Adam => OptimizerKind::Adam,
            };
        }
        if let Some(s) = &self.lr_schedule {
            t.lr_schedule = parse_schedule(s)?;
        }
        if self.no_augment {
            t.augment = false;
        }
        if self.max_steps.is_some() {
            t.max_steps = self.max_steps;
        }
        Ok(())
    }
}

impl TrainPaths {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = &self.data {
            cfg.paths.data = d.clone();
        }
        if let Some(r) = &self.runs {
            cfg.paths.runs = r.clone();
        }
    }
}

fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *slot = v.clone();
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth { out, seed, grid, cloud_prob } => {
            set(&mut cfg.paths.data, &out);
            set(&mut cfg.scene.seed, &seed);
            set(&mut cfg.scene.grid, &grid);
            set(&mut cfg.scene.cloud_prob, &cloud_prob);
            cfg.validate()?;
            let m = pipeline::synth(&cfg.scene, &cfg.paths.data)?;
            Ok(json!({ "command": "synth", "chips": m.records.len(), "year_counts": m.year_counts, "out": cfg.paths.data }))
        }
        Command::Ingest { dir, lenient } => {
            set(&mut cfg.paths.data, &dir);
            let rule = if lenient { CompletenessRule::Lenient } else { CompletenessRule::Strict };
            let m = pipeline::ingest(&cfg.paths.data, rule)?;
            Ok(json!({ "command": "ingest", "chips": m.records.len(), "complete": m.total_complete(), "year_counts": m.year_counts }))
        }
        Command::Train { year, model, paths, opts } => {
            paths.apply(&mut cfg);
            opts.apply(&mut cfg)?;
            if let Some(k) = model {
                cfg.train.model = k.into();
            }
            cfg.train.leave_out_year = Some(year);
            cfg.validate()?;
            let out = pipeline::train(&cfg.train, &cfg.paths.data, &cfg.paths.runs)?;
            let last = out.log.last();
            Ok(json!({
                "command": "train",
                "model": cfg.train.model.as_str(),
                "year": year,
                "steps": out.lr_trace.len(),
                "train_rmse": last.map(|l| l.train_rmse),
                "val_rmse": last.map(|l| l.val_rmse),
                "checkpoint": pipeline::checkpoint_path(&cfg.paths.runs, cfg.train.model, year),
            }))
        }
        Command::Cv { model, paths, opts } => {
            paths.apply(&mut cfg);
            opts.apply(&mut cfg)?;
            cfg.validate()?;
            let kinds = match model {
                Models::Fusion => vec![ModelKind::Fusion],
                Models::Baseline => vec![ModelKind::Baseline],
                Models::Both => vec![ModelKind::Fusion, ModelKind::Baseline],
            };
            let folds = pipeline::cv(&cfg.train, &cfg.paths.data, &cfg.paths.runs, &kinds)?;
            let rows: Vec<_> = folds
                .iter()
                .map(|f| json!({ "year": f.year, "model": f.kind.as_str(), "r2": f.metrics.r2, "rmse": f.metrics.rmse }))
                .collect();
            Ok(json!({ "command": "cv", "folds": rows, "table": cfg.paths.runs.join(pipeline::CV_TABLE_FILE) }))
        }
        Command::Eval { checkpoint, data, out, year, min_visits } => {
            set(&mut cfg.paths.data, &data);
            set(&mut cfg.paths.out, &out);
            set(&mut cfg.metrics.min_visits, &min_visits);
            cfg.validate()?;
            let r = pipeline::eval(&checkpoint, &cfg.paths.data, year, &cfg.metrics, &cfg.paths.out)?;
            Ok(json!({ "command": "eval", "metrics": r.metrics, "dates": r.series.len() }))
        }
        Command::Infer { checkpoint, model, runs, data, out, exclude, batch_size } => {
            set(&mut cfg.paths.runs, &runs);
            set(&mut cfg.paths.data, &data);
            set(&mut cfg.paths.out, &out);
            set(&mut cfg.infer.batch_size, &batch_size);
            for e in &exclude {
                let r: DateRange = e.parse().map_err(|err: Error| Error::Config {
                    path: "infer.exclude".into(),
                    message: err.to_string(),
                })?;
                cfg.infer.exclude.push(r);
            }
            cfg.validate()?;
            let members =
                if checkpoint.is_empty() { pipeline::fold_checkpoints(&cfg.paths.runs, model.into())? } else { checkpoint };
            let r = pipeline::infer(
                &members,
                &cfg.paths.data,
                &cfg.infer.exclude,
                &cfg.metrics,
                cfg.infer.batch_size,
                &cfg.paths.out,
            )?;
            Ok(json!({
                "command": "infer",
                "members": members.len(),
                "predicted": r.n_predicted,
                "skipped": r.n_skipped,
                "maxima": r.maxima,
            }))
        }
        Command::Gradcheck { seeds } => {
            let results = gradcheck::run_suite(0..seeds)?;
            for r in &results {
                println!("{}", json!({ "op": r.op, "seed": r.seed, "max_rel_error": r.max_rel_error, "passed": r.passed() }));
            }
            let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| format!("{}#{}", r.op, r.seed)).collect();
            if !failed.is_empty() {
                return Err(Error::InvalidData(format!("gradient check failed for {}", failed.join(", "))));
            }
            Ok(json!({ "command": "gradcheck", "checks": results.len(), "tolerance": gradcheck::TOLERANCE }))
        }
    }
}

fn failure(kind: &str, message: String, path: Option<String>, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message, "path": path }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            return failure("usage", message, None, 2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(Error::Config { path, message }) => failure("config", message, Some(path), 2),
        Err(Error::NotFound(p)) => failure("not_found", format!("file not found: {}", p.display()), None, 3),
        Err(e) => failure("error", e.to_string(), None, 1),
    }
}
