//! `dqlife`: file-in, file-out front end for the ΔQ(V) lifetime pipeline.
//!
//! Every command writes into `--out`. If a command fails, a `_FAILED` file
//! holding the error is left next to whatever it had written so far.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dqlife_core::analysis::{
    ah_range, best_pair, charge_discharge_compare, compute_features, heatmap_sweep, retention_baseline, window_sweep,
    HeatmapConfig, WindowConfig,
};
use dqlife_core::curve::{DEFAULT_GRID_POINTS, DEFAULT_V_HI, DEFAULT_V_LO};
use dqlife_core::features::{read_features_csv, write_features_csv};
use dqlife_core::model::{write_cycling_csv, write_metadata_csv};
use dqlife_core::synth::FleetManifest;
use dqlife_core::*;

const FAILED_MARKER: &str = "_FAILED";

#[derive(Parser)]
#[command(
    name = "dqlife",
    version,
    about = "Early-life battery lifetime prediction from ΔQ(V) curves"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic fleet (cycling.csv, metadata.csv, manifest.json).
    Synth(SynthArgs),
    /// ΔQ features and end of life per cell (features.csv, feature_errors.csv).
    Features(FeaturesArgs),
    /// ΔQ(V) curve of every cell in long form (curves.csv, curve_errors.csv).
    Curve(FeaturesArgs),
    /// Log-correlation over (x, y) throughput pairs (heatmap.csv).
    Heatmap(HeatmapArgs),
    /// Log-correlation against the lower edge of the voltage window (window.csv).
    Window(WindowArgs),
    /// Charge- against discharge-curve statistics (compare.csv).
    Compare(CompareArgs),
    /// Ridge fit on every row of a feature file (model.json, predictions.csv).
    Fit(FitArgs),
    /// Repeated random-split evaluation against the regress-to-mean baseline (evaluation.json).
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Overrides the seed in `--config`.
    #[arg(long)]
    seed: Option<u64>,
    /// Fleet configuration JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Cycling log CSV.
    #[arg(long)]
    input: PathBuf,
    /// Cell metadata CSV.
    #[arg(long)]
    metadata: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    grid_points: usize,
}

#[derive(Args)]
struct PairArgs {
    #[arg(long, default_value_t = 190.0)]
    x_ah: f64,
    #[arg(long, default_value_t = 10.0)]
    y_ah: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Charge,
    Discharge,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Charge => Direction::Charge,
            DirectionArg::Discharge => Direction::Discharge,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StatisticArg {
    Minimum,
    Mean,
    Variance,
    Skew,
    Kurtosis,
}

impl From<StatisticArg> for Statistic {
    fn from(s: StatisticArg) -> Self {
        match s {
            StatisticArg::Minimum => Statistic::Minimum,
            StatisticArg::Mean => Statistic::Mean,
            StatisticArg::Variance => Statistic::Variance,
            StatisticArg::Skew => Statistic::Skew,
            StatisticArg::Kurtosis => Statistic::Kurtosis,
        }
    }
}

#[derive(Args)]
struct FeaturesArgs {
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, value_enum, default_value_t = DirectionArg::Discharge)]
    direction: DirectionArg,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Pairs must satisfy y < x <= cap.
    #[arg(long, default_value_t = 200.0)]
    cap_ah: f64,
    /// Spacing of the x and y axes; both start at one step.
    #[arg(long, default_value_t = 10.0)]
    step_ah: f64,
    #[arg(long, value_enum, default_value_t = StatisticArg::Variance)]
    statistic: StatisticArg,
    #[arg(long, value_enum, default_value_t = DirectionArg::Discharge)]
    direction: DirectionArg,
    /// Also emit the mirrored entries with y > x.
    #[arg(long)]
    symmetric: bool,
}

#[derive(Args)]
struct WindowArgs {
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    pair: PairArgs,
    /// Comma-separated lower window edges in V (default 3.00, 3.05, …, 4.00).
    #[arg(long, value_delimiter = ',')]
    v_floor: Vec<f64>,
    #[arg(long, value_enum, default_value_t = DirectionArg::Discharge)]
    direction: DirectionArg,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    pair: PairArgs,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Feature CSV written by `features`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 8.0)]
    alpha: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Feature CSV written by `features`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 8.0)]
    alpha: f64,
    #[arg(long, default_value_t = 8)]
    train: usize,
    #[arg(long, default_value_t = 4)]
    test: usize,
    #[arg(long, default_value_t = 100)]
    splits: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match &cli.command {
        Command::Synth(a) => &a.out.out,
        Command::Features(a) | Command::Curve(a) => &a.out.out,
        Command::Heatmap(a) => &a.out.out,
        Command::Window(a) => &a.out.out,
        Command::Compare(a) => &a.out.out,
        Command::Fit(a) => &a.out.out,
        Command::Evaluate(a) => &a.out.out,
    }
    .clone();
    match run(cli.command, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if fs::create_dir_all(&out).is_ok() {
                let _ = fs::write(out.join(FAILED_MARKER), format!("{e:#}\n"));
            }
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).with_context(|| format!("removing stale {}", marker.display()))?;
    }
    match command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Features(a) => cmd_features(a, out),
        Command::Curve(a) => cmd_curve(a, out),
        Command::Heatmap(a) => cmd_heatmap(a, out),
        Command::Window(a) => cmd_window(a, out),
        Command::Compare(a) => cmd_compare(a, out),
        Command::Fit(a) => cmd_fit(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(file))
}

fn load_cells(data: &DataArgs) -> Result<(Vec<CellRecord>, VoltageGrid)> {
    let cells = ingest_cycling_csv(open(&data.input)?, open(&data.metadata)?)
        .with_context(|| format!("ingesting {}", data.input.display()))?;
    let grid = VoltageGrid::new(DEFAULT_V_LO, DEFAULT_V_HI, data.grid_points)?;
    Ok((cells, grid))
}

fn cmd_synth(a: SynthArgs, out: &Path) -> Result<()> {
    let mut config: FleetConfig = match &a.config {
        Some(path) => serde_json::from_reader(open(path)?).with_context(|| format!("parsing {}", path.display()))?,
        None => FleetConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let fleet = synth_fleet(&config)?;
    let records: Vec<CellRecord> = fleet.iter().map(|c| c.record.clone()).collect();
    let metadata: Vec<CellMetadata> = records.iter().map(|r| r.metadata.clone()).collect();

    let mut w = create(out, "cycling.csv")?;
    write_cycling_csv(&records, &mut w)?;
    w.flush()?;
    let mut w = create(out, "metadata.csv")?;
    write_metadata_csv(&metadata, &mut w)?;
    w.flush()?;
    write_json(out, "manifest.json", &FleetManifest::new(&config, &fleet))?;

    println!("synthesised {} cells with seed {}", fleet.len(), config.seed);
    for c in &fleet {
        println!(
            "  {}  group {}  true EOL {:.1} Ah",
            c.record.cell_id(),
            c.condition.group,
            c.true_eol
        );
    }
    Ok(())
}

fn write_errors(out: &Path, name: &str, errors: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(out, name)?);
    w.write_record(["cell_id", "error"])?;
    for (id, e) in errors {
        w.write_record([id, e])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_features(a: FeaturesArgs, out: &Path) -> Result<()> {
    let (cells, grid) = load_cells(&a.data)?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (id, row) in compute_features(&cells, &grid, a.pair.x_ah, a.pair.y_ah, a.direction.into()) {
        match row {
            Ok(r) => rows.push(r),
            Err(e) => errors.push((id, e.to_string())),
        }
    }
    let mut w = create(out, "features.csv")?;
    write_features_csv(&rows, &mut w)?;
    w.flush()?;
    write_errors(out, "feature_errors.csv", &errors)?;

    println!(
        "ΔQ({}-{}) features: {} cells, {} errors",
        a.pair.x_ah,
        a.pair.y_ah,
        rows.len(),
        errors.len()
    );
    for (id, e) in &errors {
        println!("  {id}: {e}");
    }
    Ok(())
}

fn cmd_curve(a: FeaturesArgs, out: &Path) -> Result<()> {
    let (cells, grid) = load_cells(&a.data)?;
    let mut w = csv::Writer::from_writer(create(out, "curves.csv")?);
    w.write_record(["cell_id", "voltage_v", "delta_q_ah"])?;
    let mut errors = Vec::new();
    for cell in &cells {
        match delta_q(cell, a.pair.x_ah, a.pair.y_ah, &grid, a.direction.into(), None) {
            Ok(dq) => {
                for (v, q) in grid.voltages().zip(&dq.dq) {
                    if let Some(q) = q {
                        w.write_record([cell.cell_id().to_string(), v.to_string(), q.to_string()])?;
                    }
                }
            }
            Err(e) => errors.push((cell.cell_id().to_string(), e.to_string())),
        }
    }
    w.flush()?;
    write_errors(out, "curve_errors.csv", &errors)?;
    println!(
        "ΔQ({}-{}) curves: {} cells, {} errors",
        a.pair.x_ah,
        a.pair.y_ah,
        cells.len() - errors.len(),
        errors.len()
    );
    Ok(())
}

fn cmd_heatmap(a: HeatmapArgs, out: &Path) -> Result<()> {
    if !(a.cap_ah > a.step_ah) {
        bail!("--cap-ah {} must exceed --step-ah {}", a.cap_ah, a.step_ah);
    }
    let (cells, grid) = load_cells(&a.data)?;
    let axis: Vec<f64> = ah_range(a.step_ah, a.cap_ah, a.step_ah)?
        .into_iter()
        .filter(|&v| v < a.cap_ah)
        .collect();
    let cfg = HeatmapConfig {
        x_values: axis.clone(),
        y_values: axis,
        cap: a.cap_ah,
        statistic: a.statistic.into(),
        direction: a.direction.into(),
        symmetric: a.symmetric,
    };
    let h = heatmap_sweep(&cells, &grid, &cfg)?;
    let mut w = create(out, "heatmap.csv")?;
    h.write_csv(&mut w, cfg.cap, cfg.symmetric)?;
    w.flush()?;

    let (x, y) = best_pair(&h)?;
    let rho = h.get(x, y).unwrap_or(f64::NAN);
    println!("best pair: x = {x} Ah, y = {y} Ah, rho = {rho:.4}");
    Ok(())
}

fn cmd_window(a: WindowArgs, out: &Path) -> Result<()> {
    let (cells, grid) = load_cells(&a.data)?;
    let mut cfg = WindowConfig {
        x_ah: a.pair.x_ah,
        y_ah: a.pair.y_ah,
        direction: a.direction.into(),
        ..Default::default()
    };
    if !a.v_floor.is_empty() {
        cfg.v_floor_values = a.v_floor;
    }
    let result = window_sweep(&cells, &grid, &cfg)?;
    let mut w = create(out, "window.csv")?;
    result.write_csv(&mut w, &cfg.statistics)?;
    w.flush()?;
    println!(
        "window sweep: {} floors x {} statistics",
        cfg.v_floor_values.len(),
        cfg.statistics.len()
    );
    Ok(())
}

fn cmd_compare(a: CompareArgs, out: &Path) -> Result<()> {
    let (cells, grid) = load_cells(&a.data)?;
    let result = charge_discharge_compare(&cells, &grid, a.pair.x_ah, a.pair.y_ah)?;
    let mut w = create(out, "compare.csv")?;
    result.write_csv(&mut w)?;
    w.flush()?;
    let show = |d| {
        result
            .rho(d, Statistic::Variance)
            .map_or_else(|| "missing".to_string(), |r| format!("{r:.4}"))
    };
    println!(
        "variance rho: discharge {}, charge {}",
        show(Direction::Discharge),
        show(Direction::Charge)
    );
    match retention_baseline(&cells) {
        Ok(r) => println!("retention at 200 Ah rho: {r:.4}"),
        Err(e) => println!("retention at 200 Ah rho: unavailable ({e})"),
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let rows = read_features_csv(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    Ok(Dataset::from_feature_rows(&rows)?)
}

fn cmd_fit(a: FitArgs, out: &Path) -> Result<()> {
    let data = load_dataset(&a.input)?;
    let model = fit_ridge(&data, a.alpha)?;
    let fitted = predict(&model, &data.x)?;
    write_json(out, "model.json", &model)?;

    let mut w = csv::Writer::from_writer(create(out, "predictions.csv")?);
    w.write_record(["cell_id", "eol_ah", "predicted_eol_ah"])?;
    for ((id, y), yh) in data.ids.iter().zip(&data.y).zip(&fitted) {
        w.write_record([id.clone(), 10f64.powf(*y).to_string(), 10f64.powf(*yh).to_string()])?;
    }
    w.flush()?;

    let m = regress::metrics(&fitted, &data.y)?;
    println!(
        "ridge alpha = {}: training RMSE {:.1} Ah, MPE {:.1}%",
        a.alpha, m.rmse, m.mpe
    );
    Ok(())
}

#[derive(Serialize)]
struct Evaluation {
    alpha: f64,
    train: usize,
    test: usize,
    splits: usize,
    seed: u64,
    model: EvalReport,
    baseline: EvalReport,
    test_rmse_ratio: f64,
}

fn cmd_evaluate(a: EvaluateArgs, out: &Path) -> Result<()> {
    let data = load_dataset(&a.input)?;
    let cfg = SplitConfig {
        train_count: a.train,
        test_count: a.test,
        n_splits: a.splits,
        alpha: a.alpha,
        seed: a.seed,
    };
    let model = split_evaluate(&data, &cfg)?;
    let baseline = regress_to_mean_baseline(&data, &cfg)?;
    let report = Evaluation {
        alpha: a.alpha,
        train: a.train,
        test: a.test,
        splits: a.splits,
        seed: a.seed,
        model,
        baseline,
        test_rmse_ratio: model.test_rmse / baseline.test_rmse,
    };
    write_json(out, "evaluation.json", &report)?;
    println!(
        "test RMSE {:.1} Ah (MPE {:.1}%) vs regress-to-mean {:.1} Ah over {} splits",
        model.test_rmse, model.test_mpe, baseline.test_rmse, a.splits
    );
    Ok(())
}
