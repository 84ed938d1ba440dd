//! Pipeline driver: prepare event logs, generate synthetic data, train,
//! sweep Pareto fronts, compute hypervolume and recall.
//!
//! Exit codes: 1 usage, 2 data errors, 3 training errors, 4 evaluation
//! errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use parec_core::data::{
    build_labeled_sessions, filter_dataset, generate_synthetic, load_dataset, parse_events,
    save_dataset, temporal_split, Dataset, InputFormat, SyntheticSpec,
};
use parec_core::evaluation::{
    front_to_csv, hypervolume_2d_flagged, nadir_point, recall_at_k, sweep_front_with_threads,
    Metrics, ParetoPoint, ReferencePoint,
};
use parec_core::losses::GFunction;
use parec_core::model::ModelConfig;
use parec_core::sampling::{preference_grid, DirichletParams, PreferenceVector};
use parec_core::training::{load_checkpoint, save_checkpoint, train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Usage = 1,
    Data = 2,
    Train = 3,
    Eval = 4,
}

struct CliError {
    stage: Stage,
    message: String,
}

impl CliError {
    fn new(stage: Stage, message: impl Into<String>) -> Self {
        Self {
            stage,
            message: message.into(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::new(Stage::Data, e.to_string())
}

fn train_err(e: impl std::fmt::Display) -> CliError {
    CliError::new(Stage::Train, e.to_string())
}

fn eval_err(e: impl std::fmt::Display) -> CliError {
    CliError::new(Stage::Eval, e.to_string())
}

fn usage_err(e: impl std::fmt::Display) -> CliError {
    CliError::new(Stage::Usage, e.to_string())
}

#[derive(Parser)]
#[command(
    name = "parec",
    version,
    about = "Multi-objective session-based recommender: train once, sweep the whole click/order trade-off"
)]
struct Cli {
    /// JSON config file; explicit command-line flags win over its values [default: none]
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for front sweeps [default: 1]
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an event log, label sessions, filter, split and write dataset files
    Prepare(PrepareArgs),
    /// Generate a synthetic conflict dataset and split it
    Synth(SynthArgs),
    /// Train the preference-conditioned model
    Train(TrainArgs),
    /// Sweep a preference grid and export the front with metrics
    Front(FrontArgs),
    /// Compute hypervolume for an existing front CSV
    Hv(HvArgs),
    /// Recall@K at a fixed preference
    Recall(RecallArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Input event log [required]
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    /// Input encoding: csv or jsonl [default: csv]
    #[arg(long)]
    format: Option<String>,
    /// Temporal split boundary (epoch seconds); sessions starting strictly
    /// before it train [required]
    #[arg(long)]
    boundary: Option<i64>,
    /// Minimum item support [default: 5]
    #[arg(long)]
    min_support: Option<usize>,
    /// Minimum clicks per session [default: 2]
    #[arg(long)]
    min_length: Option<usize>,
    /// Output directory [default: out]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of sessions [default: 10000]
    #[arg(long)]
    sessions: Option<usize>,
    /// Number of items [default: 200]
    #[arg(long)]
    items: Option<usize>,
    /// Click/order conflict strength in [0,1] [default: 1.0]
    #[arg(long)]
    conflict: Option<f64>,
    /// RNG seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of sessions held out as the test split [default: 0.1]
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Output directory [default: out]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding train.json (and test.json for --lambda-sweep) [required]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Training epochs [default: 10]
    #[arg(long)]
    epochs: Option<usize>,
    /// Sessions per optimizer step [default: 256]
    #[arg(long)]
    batch: Option<usize>,
    /// Learning rate [default: 1e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// Regularization strength lambda [default: 0]
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated lambda values to train sequentially [default: none]
    #[arg(long, value_name = "L1,L2,...")]
    lambda_sweep: Option<String>,
    /// Dirichlet parameters [default: 0.5 0.5]
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    beta: Option<Vec<f64>>,
    /// Contribution map for the regularizer: identity or softmax [default: softmax]
    #[arg(long)]
    g: Option<String>,
    /// Negatives per step for the click loss [default: 128]
    #[arg(long)]
    negatives: Option<usize>,
    /// RNG seed for shuffling, preference draws and negatives [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding width [default: 32]
    #[arg(long)]
    d_model: Option<usize>,
    /// Transformer layers [default: 1]
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads [default: 2]
    #[arg(long)]
    heads: Option<usize>,
    /// Maximum session window [default: 16]
    #[arg(long)]
    max_len: Option<usize>,
    /// Grid size for --lambda-sweep fronts [default: 26]
    #[arg(long)]
    grid: Option<usize>,
    /// Reference point for --lambda-sweep hypervolumes [default: union nadir]
    #[arg(long, num_args = 2, value_names = ["X", "Y"], allow_negative_numbers = true)]
    r#ref: Option<Vec<f64>>,
    /// Output directory [default: out]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FrontArgs {
    /// Trained checkpoint [required]
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Directory holding test.json [required]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Number of grid points [default: 26]
    #[arg(long)]
    grid: Option<usize>,
    /// Clamp keeping pi_o away from {0,1} [default: 1e-3]
    #[arg(long)]
    clamp: Option<f64>,
    /// Negatives per position for the click loss; 0 = full softmax [default: 128]
    #[arg(long)]
    negatives: Option<usize>,
    /// Hypervolume reference point [default: nadir of the sweep]
    #[arg(long, num_args = 2, value_names = ["X", "Y"], allow_negative_numbers = true)]
    r#ref: Option<Vec<f64>>,
    /// K for the recall metric [default: 20]
    #[arg(long)]
    k: Option<usize>,
    /// Evaluation negative-sampling seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: out]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HvArgs {
    /// Front CSV produced by `front` [required]
    #[arg(long, value_name = "FILE")]
    front: Option<PathBuf>,
    /// Reference point [default: nadir of the front]
    #[arg(long, num_args = 2, value_names = ["X", "Y"], allow_negative_numbers = true)]
    r#ref: Option<Vec<f64>>,
    /// Write the report JSON here as well [default: print only]
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecallArgs {
    /// Trained checkpoint [required]
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Directory holding test.json [required]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// K [default: 20]
    #[arg(long)]
    k: Option<usize>,
    /// Order weight pi_o to condition on [default: 0 (pure click)]
    #[arg(long)]
    pi_o: Option<f64>,
    /// Write the report JSON here as well [default: print only]
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// Optional JSON config mirroring the flags; explicit flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    input: Option<PathBuf>,
    format: Option<String>,
    boundary: Option<i64>,
    min_support: Option<usize>,
    min_length: Option<usize>,
    sessions: Option<usize>,
    items: Option<usize>,
    conflict: Option<f64>,
    test_fraction: Option<f64>,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    lambda: Option<f64>,
    lambda_sweep: Option<Vec<f64>>,
    beta: Option<[f64; 2]>,
    g: Option<String>,
    negatives: Option<usize>,
    grid: Option<usize>,
    clamp: Option<f64>,
    #[serde(rename = "ref")]
    reference: Option<[f64; 2]>,
    k: Option<usize>,
    seed: Option<u64>,
    threads: Option<usize>,
    out: Option<PathBuf>,
    d_model: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    max_len: Option<usize>,
}

fn load_config(path: &Option<PathBuf>) -> CliResult<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let raw = std::fs::read_to_string(p)
                .map_err(|e| usage_err(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&raw)
                .map_err(|e| usage_err(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.stage as i32);
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let file = load_config(&cli.config)?;
    let threads = cli.threads.or(file.threads).unwrap_or(1);
    match cli.command {
        Command::Prepare(args) => cmd_prepare(args, &file),
        Command::Synth(args) => cmd_synth(args, &file),
        Command::Train(args) => cmd_train(args, &file, threads),
        Command::Front(args) => cmd_front(args, &file, threads),
        Command::Hv(args) => cmd_hv(args, &file),
        Command::Recall(args) => cmd_recall(args, &file),
    }
}

fn require<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| usage_err(format!("missing required --{flag}")))
}

fn ensure_out_dir(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| data_err(format!("cannot create {}: {e}", out.display())))
}

#[derive(Serialize)]
struct SplitCounts {
    sessions: usize,
    click_events: usize,
    order_events: usize,
    items: usize,
}

impl SplitCounts {
    fn of(ds: &Dataset) -> Self {
        Self {
            sessions: ds.sessions.len(),
            click_events: ds.total_clicks(),
            order_events: ds.total_orders(),
            items: ds.vocab_size(),
        }
    }
}

#[derive(Serialize)]
struct Summary {
    train: SplitCounts,
    test: SplitCounts,
}

fn write_splits(train: &Dataset, test: &Dataset, out: &Path) -> CliResult<()> {
    ensure_out_dir(out)?;
    save_dataset(train, &out.join("train.json")).map_err(data_err)?;
    save_dataset(test, &out.join("test.json")).map_err(data_err)?;
    let summary = Summary {
        train: SplitCounts::of(train),
        test: SplitCounts::of(test),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(out.join("summary.json"), json + "\n").map_err(data_err)?;

    println!("{:<14}{:>12}{:>12}", "", "train", "test");
    for (label, a, b) in [
        ("sessions", summary.train.sessions, summary.test.sessions),
        ("click events", summary.train.click_events, summary.test.click_events),
        ("order events", summary.train.order_events, summary.test.order_events),
        ("items", summary.train.items, summary.test.items),
    ] {
        println!("{label:<14}{a:>12}{b:>12}");
    }
    Ok(())
}

fn cmd_prepare(args: PrepareArgs, file: &FileConfig) -> CliResult<()> {
    let input = require(args.input.or_else(|| file.input.clone()), "input")?;
    let format: InputFormat = args
        .format
        .or_else(|| file.format.clone())
        .unwrap_or_else(|| "csv".into())
        .parse()
        .map_err(usage_err)?;
    let boundary = require(args.boundary.or(file.boundary), "boundary")?;
    let min_support = args.min_support.or(file.min_support).unwrap_or(5);
    let min_length = args.min_length.or(file.min_length).unwrap_or(2);
    let out = args.out.or_else(|| file.out.clone()).unwrap_or_else(|| "out".into());

    if !input.exists() {
        return Err(data_err(format!("input file {} does not exist", input.display())));
    }
    let reader = std::io::BufReader::new(
        std::fs::File::open(&input).map_err(|e| data_err(format!("{}: {e}", input.display())))?,
    );
    let events = parse_events(reader, format).map_err(data_err)?;
    let (dataset, diagnostics) = build_labeled_sessions(&events);
    if diagnostics.dangling_orders > 0 {
        eprintln!(
            "warning: dropped {} order event(s) for never-clicked items",
            diagnostics.dangling_orders
        );
    }
    let filtered = filter_dataset(&dataset, min_support, min_length);
    let (train, test) = temporal_split(&filtered, boundary).map_err(data_err)?;
    write_splits(&train, &test, &out)
}

fn cmd_synth(args: SynthArgs, file: &FileConfig) -> CliResult<()> {
    let spec = SyntheticSpec {
        n_sessions: args.sessions.or(file.sessions).unwrap_or(10_000),
        n_items: args.items.or(file.items).unwrap_or(200),
        conflict: args.conflict.or(file.conflict).unwrap_or(1.0),
        seed: args.seed.or(file.seed).unwrap_or(0),
    };
    let test_fraction = args.test_fraction.or(file.test_fraction).unwrap_or(0.1);
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(usage_err(format!(
            "--test-fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let out = args.out.or_else(|| file.out.clone()).unwrap_or_else(|| "out".into());

    let dataset = generate_synthetic(&spec).map_err(data_err)?;
    // Synthetic session start times are their indices; split on the tail.
    let boundary = ((spec.n_sessions as f64) * (1.0 - test_fraction)).round() as i64;
    let (train, test) = temporal_split(&dataset, boundary).map_err(data_err)?;
    write_splits(&train, &test, &out)
}

fn parse_g(raw: Option<String>) -> CliResult<GFunction> {
    match raw {
        None => Ok(GFunction::Softmax),
        Some(s) => s.parse().map_err(usage_err),
    }
}

fn parse_reference(flag: Option<Vec<f64>>, file: Option<[f64; 2]>) -> Option<ReferencePoint> {
    flag.map(|v| ReferencePoint { r_c: v[0], r_o: v[1] })
        .or(file.map(|[r_c, r_o]| ReferencePoint { r_c, r_o }))
}

fn cmd_train(args: TrainArgs, file: &FileConfig, threads: usize) -> CliResult<()> {
    let data = require(args.data.or_else(|| file.data.clone()), "data")?;
    let out = args.out.or_else(|| file.out.clone()).unwrap_or_else(|| "out".into());
    let train_path = data.join("train.json");
    if !train_path.exists() {
        return Err(data_err(format!("{} does not exist", train_path.display())));
    }
    let train_ds = load_dataset(&train_path).map_err(data_err)?;

    let beta = match args.beta {
        Some(v) => DirichletParams::new(v[0], v[1]).map_err(usage_err)?,
        None => match file.beta {
            Some([a, b]) => DirichletParams::new(a, b).map_err(usage_err)?,
            None => DirichletParams::default(),
        },
    };
    let cfg = TrainConfig {
        batch_size: args.batch.or(file.batch).unwrap_or(256),
        learning_rate: args.lr.or(file.lr).unwrap_or(1e-4),
        epochs: args.epochs.or(file.epochs).unwrap_or(10),
        lambda: args.lambda.or(file.lambda).unwrap_or(0.0),
        beta,
        negatives: args.negatives.or(file.negatives).unwrap_or(128),
        seed: args.seed.or(file.seed).unwrap_or(0),
        g: parse_g(args.g.or_else(|| file.g.clone()))?,
        pi_fixed: None,
    };
    let model_cfg = ModelConfig {
        d_model: args.d_model.or(file.d_model).unwrap_or(32),
        n_layers: args.layers.or(file.layers).unwrap_or(1),
        n_heads: args.heads.or(file.heads).unwrap_or(2),
        max_len: args.max_len.or(file.max_len).unwrap_or(16),
        vocab_size: train_ds.vocab_size(),
        seed: cfg.seed,
    };

    let lambdas: Option<Vec<f64>> = match args.lambda_sweep {
        Some(raw) => Some(
            raw.split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| usage_err(format!("bad --lambda-sweep entry '{s}': {e}"))))
                .collect::<CliResult<Vec<f64>>>()?,
        ),
        None => file.lambda_sweep.clone(),
    };

    ensure_out_dir(&out)?;
    match lambdas {
        None => {
            let (params, opt, _) = run_one_training(&train_ds, &model_cfg, &cfg, &out, None)?;
            save_checkpoint(&params, &opt, &cfg, &out.join("checkpoint.ckpt"))
                .map_err(train_err)?;
            println!("checkpoint written to {}", out.join("checkpoint.ckpt").display());
        }
        Some(lambdas) => {
            let grid_n = args.grid.or(file.grid).unwrap_or(26);
            let reference = parse_reference(args.r#ref, file.reference);
            lambda_sweep(
                &train_ds, &data, &model_cfg, &cfg, &lambdas, grid_n, reference, &out, threads,
            )?;
        }
    }
    Ok(())
}

fn run_one_training(
    train_ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out: &Path,
    log_suffix: Option<&str>,
) -> CliResult<(parec_core::model::Parameters, parec_core::training::OptimizerState, ())> {
    let (params, opt, summaries, records) = train(train_ds, model_cfg, cfg).map_err(train_err)?;
    let mut log = String::new();
    for record in &records {
        log.push_str(&serde_json::to_string(record).expect("record serializes"));
        log.push('\n');
    }
    let log_name = match log_suffix {
        Some(s) => format!("train_log_{s}.jsonl"),
        None => "train_log.jsonl".to_string(),
    };
    std::fs::write(out.join(&log_name), log).map_err(train_err)?;
    for (i, s) in summaries.iter().enumerate() {
        println!(
            "epoch {:>3}/{}: total={:.6} l_c={:.6} l_o={:.6} ({} steps)",
            i + 1,
            cfg.epochs,
            s.mean_total,
            s.mean_l_c,
            s.mean_l_o,
            s.steps
        );
    }
    Ok((params, opt, ()))
}

#[derive(Serialize)]
struct LambdaSweepReport {
    lambdas: Vec<f64>,
    hv: Vec<f64>,
    reference: [f64; 2],
    grid_size: usize,
}

#[allow(clippy::too_many_arguments)]
fn lambda_sweep(
    train_ds: &Dataset,
    data: &Path,
    model_cfg: &ModelConfig,
    base_cfg: &TrainConfig,
    lambdas: &[f64],
    grid_n: usize,
    reference: Option<ReferencePoint>,
    out: &Path,
    threads: usize,
) -> CliResult<()> {
    let test_path = data.join("test.json");
    if !test_path.exists() {
        return Err(data_err(format!(
            "--lambda-sweep needs {}",
            test_path.display()
        )));
    }
    let test_ds = load_dataset(&test_path).map_err(data_err)?;
    let grid = preference_grid(grid_n, parec_core::sampling::DEFAULT_GRID_CLAMP)
        .map_err(usage_err)?;

    let mut fronts = Vec::new();
    for &lambda in lambdas {
        println!("--- lambda = {lambda} ---");
        let cfg = TrainConfig { lambda, ..*base_cfg };
        let suffix = format!("lambda{lambda}");
        let (params, opt, _) = run_one_training(train_ds, model_cfg, &cfg, out, Some(&suffix))?;
        save_checkpoint(&params, &opt, &cfg, &out.join(format!("checkpoint_{suffix}.ckpt")))
            .map_err(train_err)?;
        let front = sweep_front_with_threads(&params, &test_ds, &grid, cfg.negatives, cfg.seed, threads)
            .map_err(eval_err)?;
        fronts.push(front);
    }

    // One shared reference point makes the hypervolumes comparable.
    let reference = match reference {
        Some(r) => r,
        None => {
            let union: Vec<(f64, f64)> = fronts
                .iter()
                .flat_map(|f| f.points.iter().map(|p| (p.l_c, p.l_o)))
                .collect();
            let (r_c, r_o) = nadir_point(&union).map_err(eval_err)?;
            ReferencePoint { r_c, r_o }
        }
    };
    let hvs: Vec<f64> = fronts
        .iter()
        .map(|f| {
            let coords: Vec<(f64, f64)> = f.points.iter().map(|p| (p.l_c, p.l_o)).collect();
            let (hv, flagged) = hypervolume_2d_flagged(&coords, &reference);
            if flagged > 0 {
                eprintln!("warning: {flagged} front point(s) outside the reference box");
            }
            hv
        })
        .collect();

    let mut header = String::from("lambda    ");
    let mut row = String::from("hv        ");
    for (l, hv) in lambdas.iter().zip(hvs.iter()) {
        let _ = write!(header, "{l:>12}");
        let _ = write!(row, "{hv:>12.5}");
    }
    println!("{header}\n{row}");

    let report = LambdaSweepReport {
        lambdas: lambdas.to_vec(),
        hv: hvs,
        reference: [reference.r_c, reference.r_o],
        grid_size: grid_n,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out.join("lambda_sweep.json"), json + "\n").map_err(eval_err)?;
    Ok(())
}

fn cmd_front(args: FrontArgs, file: &FileConfig, threads: usize) -> CliResult<()> {
    let checkpoint = require(args.checkpoint.or_else(|| file.checkpoint.clone()), "checkpoint")?;
    let data = require(args.data.or_else(|| file.data.clone()), "data")?;
    let out = args.out.or_else(|| file.out.clone()).unwrap_or_else(|| "out".into());
    let grid_n = args.grid.or(file.grid).unwrap_or(26);
    let clamp = args
        .clamp
        .or(file.clamp)
        .unwrap_or(parec_core::sampling::DEFAULT_GRID_CLAMP);
    let negatives = args.negatives.or(file.negatives).unwrap_or(128);
    let k = args.k.or(file.k).unwrap_or(20);
    let seed = args.seed.or(file.seed).unwrap_or(0);

    let test_path = data.join("test.json");
    if !test_path.exists() {
        return Err(eval_err(format!("{} does not exist", test_path.display())));
    }
    let (params, _, _) = load_checkpoint(&checkpoint).map_err(eval_err)?;
    let test_ds = load_dataset(&test_path).map_err(eval_err)?;
    let grid = preference_grid(grid_n, clamp).map_err(eval_err)?;

    let mut front =
        sweep_front_with_threads(&params, &test_ds, &grid, negatives, seed, threads)
            .map_err(eval_err)?;
    if let Some(reference) = parse_reference(args.r#ref, file.reference) {
        front.reference = reference;
    }

    let coords: Vec<(f64, f64)> = front.points.iter().map(|p| (p.l_c, p.l_o)).collect();
    let (hv, flagged) = hypervolume_2d_flagged(&coords, &front.reference);
    if flagged > 0 {
        eprintln!("warning: {flagged} non-dominated point(s) outside the reference box contribute zero");
    }
    let nadir = nadir_point(&coords).map_err(eval_err)?;
    let pure_click = PreferenceVector::new(1.0, 0.0).expect("valid corner");
    let recall = recall_at_k(&params, &test_ds, &pure_click, k).map_err(eval_err)?;

    ensure_out_dir(&out).map_err(|e| eval_err(e.message))?;
    std::fs::write(out.join("front.csv"), front_to_csv(&front)).map_err(eval_err)?;
    let metrics = Metrics {
        hv,
        reference: [front.reference.r_c, front.reference.r_o],
        nadir: [nadir.0, nadir.1],
        recall_at_20: recall,
        grid_size: grid_n,
    };
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    std::fs::write(out.join("metrics.json"), json + "\n").map_err(eval_err)?;
    println!(
        "front: {} points, hv={hv:.6} vs ref [{}, {}], recall@{k}={recall:.4}",
        front.points.len(),
        front.reference.r_c,
        front.reference.r_o
    );
    Ok(())
}

fn read_front_csv(path: &Path) -> CliResult<Vec<ParetoPoint>> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| eval_err(format!("{}: {e}", path.display())))?;
    let mut lines = raw.lines();
    match lines.next() {
        Some("pi_o,l_c,l_o") => {}
        other => {
            return Err(eval_err(format!(
                "{} is not a front CSV (header {other:?})",
                path.display()
            )))
        }
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(eval_err(format!("bad row {} in {}", i + 2, path.display())));
        }
        let parse = |s: &str| -> CliResult<f64> {
            s.parse()
                .map_err(|e| eval_err(format!("bad number '{s}' in {}: {e}", path.display())))
        };
        points.push(ParetoPoint {
            pi_o: parse(fields[0])?,
            l_c: parse(fields[1])?,
            l_o: parse(fields[2])?,
        });
    }
    if points.is_empty() {
        return Err(eval_err(format!("{} has no data rows", path.display())));
    }
    Ok(points)
}

#[derive(Serialize)]
struct HvReport {
    hv: f64,
    reference: [f64; 2],
    nadir: [f64; 2],
    n_points: usize,
}

fn cmd_hv(args: HvArgs, file: &FileConfig) -> CliResult<()> {
    let front_path = require(args.front, "front")?;
    let points = read_front_csv(&front_path)?;
    let coords: Vec<(f64, f64)> = points.iter().map(|p| (p.l_c, p.l_o)).collect();
    let nadir = nadir_point(&coords).map_err(eval_err)?;
    let reference = parse_reference(args.r#ref, file.reference)
        .unwrap_or(ReferencePoint { r_c: nadir.0, r_o: nadir.1 });
    let (hv, flagged) = hypervolume_2d_flagged(&coords, &reference);
    if flagged > 0 {
        eprintln!("warning: {flagged} non-dominated point(s) outside the reference box contribute zero");
    }
    let report = HvReport {
        hv,
        reference: [reference.r_c, reference.r_o],
        nadir: [nadir.0, nadir.1],
        n_points: points.len(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(out) = args.out {
        std::fs::write(&out, json + "\n").map_err(eval_err)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RecallReport {
    recall: f64,
    k: usize,
    pi: [f64; 2],
    positions: String,
}

fn cmd_recall(args: RecallArgs, file: &FileConfig) -> CliResult<()> {
    let checkpoint = require(args.checkpoint.or_else(|| file.checkpoint.clone()), "checkpoint")?;
    let data = require(args.data.or_else(|| file.data.clone()), "data")?;
    let k = args.k.or(file.k).unwrap_or(20);
    let pi_o = args.pi_o.unwrap_or(0.0);
    let pi = PreferenceVector::from_pi_o(pi_o).map_err(usage_err)?;

    let (params, _, _) = load_checkpoint(&checkpoint).map_err(eval_err)?;
    let test_ds = load_dataset(&data.join("test.json")).map_err(eval_err)?;
    let recall = recall_at_k(&params, &test_ds, &pi, k).map_err(eval_err)?;
    println!("recall@{k} at pi=[{}, {}]: {recall:.6}", pi.pi_c(), pi.pi_o());
    if let Some(out) = args.out {
        let report = RecallReport {
            recall,
            k,
            pi: [pi.pi_c(), pi.pi_o()],
            positions: "all test prediction positions".into(),
        };
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&out, json + "\n").map_err(eval_err)?;
    }
    Ok(())
}
