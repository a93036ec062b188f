use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use stapbench::bench::{emit_report, run_sweep, train_on, Scenario, SweepAxis, SweepSpec, DESK_TRIALS, FULL_SCALE_TRIALS};
use stapbench::crb::{average_reports, crb_for_trial, AmplitudeSource, CrbOptions, CrbReport, ScalingMode};
use stapbench::estimators::{peak_cell_midpoint, Estimate, GdConfig, GradientMode};
use stapbench::io::{load_tensor, save_tensor, write_heatmap_csv, Dataset, TruthRow};
use stapbench::learned::{CnnModel, InputScaling, TrainConfig};
use stapbench::scene::{default_scene, SceneConfig};

#[derive(Parser)]
#[command(name = "stapbench", version, about = "Space-time radar localization benchmark")]
struct Cli {
    /// Scene configuration (TOML); defaults to the built-in scene.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; defaults to the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trials and write a dataset directory.
    Simulate(SimulateArgs),
    /// Build NAMF tensors for every trial of a dataset.
    Heatmap(HeatmapArgs),
    /// Run the estimators on every trial of a dataset.
    Estimate(EstimateArgs),
    /// Per-trial and averaged Cramér-Rao bounds for a dataset.
    Crb(CrbArgs),
    /// Train the network on a dataset.
    Train(TrainArgs),
    /// End-to-end sweep over SCNR or snapshot count.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Scnr,
    Snapshots,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradientArg {
    Analytic,
    Fd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalingArg {
    Verbatim,
    Snapshot,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputArg {
    Max,
    Raw,
}

impl From<GradientArg> for GradientMode {
    fn from(g: GradientArg) -> Self {
        match g {
            GradientArg::Analytic => GradientMode::Analytic,
            GradientArg::Fd => GradientMode::FiniteDifference,
        }
    }
}

impl From<ScalingArg> for ScalingMode {
    fn from(s: ScalingArg) -> Self {
        match s {
            ScalingArg::Verbatim => ScalingMode::Verbatim,
            ScalingArg::Snapshot => ScalingMode::SnapshotScaled,
        }
    }
}

impl From<InputArg> for InputScaling {
    fn from(s: InputArg) -> Self {
        match s {
            InputArg::Max => InputScaling::MaxNormalize,
            InputArg::Raw => InputScaling::Raw,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Output SCNR in dB (overrides the configuration).
    #[arg(long)]
    scnr: Option<f64>,
    /// Snapshot count K (overrides the configuration).
    #[arg(long)]
    snapshots: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HeatmapArgs {
    dataset: PathBuf,
    /// Output directory (default: `<dataset>/heatmaps`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one long-form CSV per tensor.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct EstimateArgs {
    dataset: PathBuf,
    /// Network checkpoint; without it only MP and GD are reported.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "analytic")]
    gradient: GradientArg,
    /// Output CSV (default: `<dataset>/estimates.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CrbArgs {
    dataset: PathBuf,
    #[arg(long = "crb-scaling", value_enum, default_value = "verbatim")]
    crb_scaling: ScalingArg,
    /// Use the mean snapshot power |S_j|² instead of |S̄|².
    #[arg(long)]
    snapshot_power: bool,
    /// Output directory (default: the dataset directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    dataset: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, value_enum, default_value = "max")]
    input: InputArg,
    /// Output directory for `model.ckpt` and `training_log.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "scnr")]
    axis: AxisArg,
    /// Trials per sweep point.
    #[arg(long, conflicts_with = "full_scale")]
    trials: Option<usize>,
    /// Use 10 000 trials per point.
    #[arg(long)]
    full_scale: bool,
    #[arg(long, value_enum, default_value = "analytic")]
    gradient: GradientArg,
    /// Bound drawn in the plots (both are written to the CSV).
    #[arg(long = "crb-scaling", value_enum, default_value = "verbatim")]
    crb_scaling: ScalingArg,
    #[arg(long, value_enum, default_value = "max")]
    input: InputArg,
    /// Velocity grid step in m/s (overrides the configuration).
    #[arg(long)]
    velocity_step: Option<f64>,
    /// Restrict the sweep to these values (comma separated).
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<SceneConfig> {
    let cfg = match path {
        Some(p) => SceneConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => default_scene(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.rng_seed = s;
    }
    if let Some(s) = args.scnr {
        cfg.target_scnr_db = s;
    }
    if let Some(k) = args.snapshots {
        cfg.snapshots = k;
    }
    let sc = Scenario::new(cfg)?;
    let ds = Dataset::create(&args.out, &sc.cfg)?;
    let truths = (0..args.trials)
        .into_par_iter()
        .map(|trial| -> Result<TruthRow> {
            let data = sc.simulate(sc.cfg.rng_seed, None, trial)?;
            ds.write_trial(trial, &data)?;
            Ok(TruthRow::new(trial, &data.truth, &data.signal))
        })
        .collect::<Result<Vec<_>>>()?;
    ds.write_truths(&truths)?;
    log::info!("wrote {} trials to {}", truths.len(), args.out.display());
    Ok(())
}

fn tensor_path(dir: &Path, trial: usize) -> PathBuf {
    dir.join(format!("tensor_{trial:05}.stap"))
}

fn heatmap(args: &HeatmapArgs) -> Result<()> {
    let ds = Dataset::open(&args.dataset)?;
    let sc = Scenario::new(ds.config()?)?;
    let out = args.out.clone().unwrap_or_else(|| args.dataset.join("heatmaps"));
    std::fs::create_dir_all(&out)?;
    ds.truths()?.par_iter().try_for_each(|row| -> Result<()> {
        let data = ds.read_trial(row.trial, row.truth())?;
        let t = sc.heatmap(&sc.prepare_bins(&data)?, Some(data.truth))?;
        save_tensor(&tensor_path(&out, row.trial), &t)?;
        if args.csv {
            write_heatmap_csv(&out.join(format!("tensor_{:05}.csv", row.trial)), &t)?;
        }
        Ok(())
    })?;
    Ok(())
}

#[derive(Serialize)]
struct EstimateRow {
    trial_id: usize,
    method: String,
    theta_hat: f64,
    v_hat: f64,
    iterations: usize,
    final_loss: Option<f64>,
}

impl EstimateRow {
    fn new(trial_id: usize, e: &Estimate) -> Self {
        EstimateRow {
            trial_id,
            method: e.method.tag().to_string(),
            theta_hat: e.azimuth_deg,
            v_hat: e.velocity_mps,
            iterations: e.iterations_used,
            final_loss: e.final_loss,
        }
    }
}

fn estimate(args: &EstimateArgs) -> Result<()> {
    let ds = Dataset::open(&args.dataset)?;
    let sc = Scenario::new(ds.config()?)?;
    let model = args.model.as_deref().map(CnnModel::load).transpose()?;
    let gd = GdConfig { gradient_mode: args.gradient.into(), ..GdConfig::default() };
    let per_trial = ds
        .truths()?
        .par_iter()
        .map(|row| -> Result<Vec<EstimateRow>> {
            let data = ds.read_trial(row.trial, row.truth())?;
            let bins = sc.prepare_bins(&data)?;
            let t = sc.heatmap(&bins, Some(data.truth))?;
            let mp = peak_cell_midpoint(&t)?;
            let mut rows = vec![EstimateRow::new(row.trial, &mp)];
            rows.push(EstimateRow::new(row.trial, &sc.gradient_descent(&bins, &data.truth, &mp, &gd)?));
            if let Some(m) = &model {
                rows.push(EstimateRow::new(row.trial, &m.predict(&t)?));
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = args.out.clone().unwrap_or_else(|| args.dataset.join("estimates.csv"));
    write_csv(&out, &per_trial.into_iter().flatten().collect::<Vec<_>>())
}

#[derive(Serialize)]
struct CrbTrialRow {
    trial_id: usize,
    crb_theta_deg2: Option<f64>,
    crb_vel_mps2: Option<f64>,
    scaling_mode: &'static str,
    unbounded: bool,
}

#[derive(Serialize)]
struct CrbSummaryRow {
    sweep_axis: &'static str,
    sweep_value: f64,
    crb_theta_deg2: f64,
    crb_vel_mps2: f64,
    scaling_mode: &'static str,
    excluded_trials: usize,
}

fn crb(args: &CrbArgs) -> Result<()> {
    let ds = Dataset::open(&args.dataset)?;
    let sc = Scenario::new(ds.config()?)?;
    let mode: ScalingMode = args.crb_scaling.into();
    let options = CrbOptions {
        amplitude: if args.snapshot_power { AmplitudeSource::SnapshotPower } else { AmplitudeSource::MeanSignal },
    };
    let truths = ds.truths()?;
    let reports: Vec<stapbench::Result<CrbReport>> = truths
        .par_iter()
        .map(|row| {
            let data = ds.read_trial(row.trial, row.truth())?;
            crb_for_trial(&sc.cfg, &sc.model, &sc.steering, &data.truth, &data.signal, mode, options)
        })
        .collect();
    let mut rows = Vec::with_capacity(reports.len());
    for (row, r) in truths.iter().zip(&reports) {
        rows.push(match r {
            Ok(r) => CrbTrialRow {
                trial_id: row.trial,
                crb_theta_deg2: Some(r.crb_theta),
                crb_vel_mps2: Some(r.crb_velocity),
                scaling_mode: mode.tag(),
                unbounded: false,
            },
            Err(stapbench::Error::UnboundedCrb) => CrbTrialRow {
                trial_id: row.trial,
                crb_theta_deg2: None,
                crb_vel_mps2: None,
                scaling_mode: mode.tag(),
                unbounded: true,
            },
            Err(e) => bail!("trial {}: {e}", row.trial),
        });
    }
    let out = args.out.clone().unwrap_or_else(|| args.dataset.clone());
    std::fs::create_dir_all(&out)?;
    write_csv(&out.join("crb_trials.csv"), &rows)?;
    let avg = average_reports(&reports)?;
    write_csv(
        &out.join("crb.csv"),
        &[CrbSummaryRow {
            sweep_axis: "scnr",
            sweep_value: sc.cfg.target_scnr_db,
            crb_theta_deg2: avg.crb_theta,
            crb_vel_mps2: avg.crb_velocity,
            scaling_mode: mode.tag(),
            excluded_trials: avg.excluded,
        }],
    )
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let ds = Dataset::open(&args.dataset)?;
    let cfg = ds.config()?;
    let sc = Scenario::new(cfg.clone())?;
    let truths = ds.truths()?;
    let heatmaps = args.dataset.join("heatmaps");
    let tensors = truths
        .par_iter()
        .map(|row| -> Result<_> {
            let cached = tensor_path(&heatmaps, row.trial);
            if cached.is_file() {
                return Ok(load_tensor(&cached, &cfg)?);
            }
            let data = ds.read_trial(row.trial, row.truth())?;
            Ok(sc.heatmap(&sc.prepare_bins(&data)?, Some(data.truth))?)
        })
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<_> = truths.iter().map(TruthRow::truth).collect();
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        seed: cli.seed.unwrap_or(cfg.rng_seed),
        input_scaling: args.input.into(),
        ..TrainConfig::default()
    };
    let (model, log) = train_on(&cfg, &tensors, &targets, &train_cfg)?;
    std::fs::create_dir_all(&args.out)?;
    model.save(&args.out.join("model.ckpt"))?;
    log.write_csv(&args.out.join("training_log.csv"))?;
    log::info!("best validation loss at epoch {} of {}", log.best_epoch, log.epochs.len());
    Ok(())
}

fn sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(step) = args.velocity_step {
        cfg.velocity_step_mps = step;
        cfg.validate()?;
    }
    let axis = match args.axis {
        AxisArg::Scnr => SweepAxis::Scnr,
        AxisArg::Snapshots => SweepAxis::Snapshots,
    };
    let trials = if args.full_scale { FULL_SCALE_TRIALS } else { args.trials.unwrap_or(DESK_TRIALS) };
    let seed = cli.seed.unwrap_or(cfg.rng_seed);
    let mut spec = SweepSpec::new(axis, trials, seed);
    if let Some(v) = &args.values {
        spec.values = v.clone();
    }
    spec.gd.gradient_mode = args.gradient.into();
    spec.train.input_scaling = args.input.into();
    spec.train.seed = seed;
    spec.plot_scaling = args.crb_scaling.into();
    spec.validate()?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join(format!("spec_{}.json", axis.tag())), serde_json::to_string_pretty(&spec)?)?;
    let report = run_sweep(&spec, &cfg)?;
    let files = emit_report(&report, &args.out, spec.plot_scaling)?;
    println!("{}", files.results.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Simulate(a) => simulate(&cli, a),
        Command::Heatmap(a) => heatmap(a),
        Command::Estimate(a) => estimate(a),
        Command::Crb(a) => crb(a),
        Command::Train(a) => train(&cli, a),
        Command::Sweep(a) => sweep(&cli, a),
    }
}
