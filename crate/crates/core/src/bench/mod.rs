//! End-to-end trials and the SCNR / snapshot-count sweeps.
//!
//! A trial places a target, synthesizes every range bin, whitens each bin with
//! its own sample covariance and builds the NAMF tensor. The peak-cell
//! midpoint is read from every tensor. Trials are split by index: the first
//! 90% train the network, the rest are the test set on which all three
//! methods and the CRB are evaluated. Gradient descent is started from the
//! peak-cell estimate and is given the true range bin and the true value of
//! the parameter it is not estimating.

mod plot;
mod report;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crb::{average_reports, crb_for_trial, CrbAverage, CrbOptions, CrbReport, ScalingMode};
use crate::error::{Error, Result};
use crate::estimators::{peak_cell_midpoint, Estimate, GdConfig, GdProblem, Method};
use crate::heatmap::{heatmap_from_bins, GridSteering, HeatmapTensor, WhitenedBin};
use crate::learned::{samples_from_tensors, train, CnnArch, CnnModel, Normalization, TrainConfig, TrainingLog};
use crate::rng::{stream, Purpose};
use crate::scene::{phase_centers, place_target, SceneConfig, TargetTruth};
use crate::stats::ErrorSplit;
use crate::steering::Steering;
use crate::synth::{build_covariance, calibrate_amplitude, draw_signal, synthesize_trial, CovarianceModel, TrialData};

pub use plot::{render_plot, PlotSeries};
pub use report::{emit_report, read_report_csv, EmittedFiles, ReportRow};

/// Everything about a scene that is shared by its trials.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: SceneConfig,
    pub steering: Steering,
    pub model: CovarianceModel,
    pub grid: GridSteering,
}

impl Scenario {
    pub fn new(cfg: SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let steering = Steering::new(&cfg, &phase_centers(&cfg)?);
        let model = build_covariance(&cfg, &steering)?;
        let grid = GridSteering::new(&cfg, &steering);
        Ok(Scenario { cfg, steering, model, grid })
    }

    /// Places and synthesizes trial `trial`. Placement, RCS and signal phases
    /// come from a stream shared by all sweep points; clutter and noise from
    /// a per-point stream.
    pub fn simulate(&self, seed: u64, point: Option<usize>, trial: usize) -> Result<TrialData> {
        let cfg = &self.cfg;
        let mut placement = stream(seed, Purpose::Placement, None, trial);
        let truth = place_target(cfg, &mut placement, |az, v| {
            calibrate_amplitude(cfg, &self.model, &self.steering.space_time(az, cfg.elevation_rad, v))
        })?;
        let signal = draw_signal(truth.amplitude(), cfg.snapshots, &mut placement);
        let mut interference = stream(seed, Purpose::Interference, point, trial);
        synthesize_trial(cfg, &self.model, &self.steering, &truth, &signal, &mut interference)
    }

    pub fn prepare_bins(&self, data: &TrialData) -> Result<Vec<WhitenedBin>> {
        data.y
            .iter()
            .zip(&data.z)
            .map(|(y, z)| WhitenedBin::prepare(&y.values, &z.values))
            .collect()
    }

    pub fn heatmap(&self, bins: &[WhitenedBin], truth: Option<TargetTruth>) -> Result<HeatmapTensor> {
        let mut t = heatmap_from_bins(&self.cfg, &self.grid, bins)?;
        t.truth = truth;
        Ok(t)
    }

    /// Both descents from `init`, each with the other parameter at its truth.
    /// The reported loss is evaluated at the combined estimate.
    pub fn gradient_descent(
        &self,
        bins: &[WhitenedBin],
        truth: &TargetTruth,
        init: &Estimate,
        gd: &GdConfig,
    ) -> Result<Estimate> {
        let bin = bins
            .get(truth.range_bin)
            .ok_or_else(|| Error::InvalidConfig(format!("range bin {} out of range", truth.range_bin)))?;
        let problem = GdProblem::with_gram(&self.cfg, &self.steering, &bin.whitener, bin.gram.clone(), bin.data.ncols())?;
        let az = problem.azimuth_run(init.azimuth_deg, truth.velocity_mps, gd)?.estimate;
        let vel = problem.velocity_run(truth.azimuth_deg, init.velocity_mps, gd)?.estimate;
        Ok(Estimate {
            azimuth_deg: az.azimuth_deg,
            velocity_mps: vel.velocity_mps,
            method: Method::GradientDescent,
            iterations_used: az.iterations_used + vel.iterations_used,
            final_loss: Some(problem.loss(az.azimuth_deg, vel.velocity_mps)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Scnr,
    Snapshots,
}

impl SweepAxis {
    pub fn tag(self) -> &'static str {
        match self {
            SweepAxis::Scnr => "scnr",
            SweepAxis::Snapshots => "snapshots",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::Scnr => "mean output SCNR (dB)",
            SweepAxis::Snapshots => "snapshots K",
        }
    }

    /// `{−20, −15, …, 20}` dB or `{75, 100, …, 300}` snapshots.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::Scnr => (-20..=20).step_by(5).map(f64::from).collect(),
            SweepAxis::Snapshots => (75..=300).step_by(25).map(f64::from).collect(),
        }
    }
}

pub const DESK_TRIALS: usize = 2000;
pub const FULL_SCALE_TRIALS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Snapshot count held fixed on the SCNR axis.
    pub fixed_snapshots: usize,
    /// SCNR held fixed on the snapshot axis.
    pub fixed_scnr_db: f64,
    pub trials: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub gd: GdConfig,
    pub train: TrainConfig,
    pub crb: CrbOptions,
    /// Bound drawn in the plots; the CSV carries both.
    pub plot_scaling: ScalingMode,
}

impl SweepSpec {
    pub fn new(axis: SweepAxis, trials: usize, seed: u64) -> Self {
        SweepSpec {
            axis,
            values: axis.default_values(),
            fixed_snapshots: 300,
            fixed_scnr_db: 20.0,
            trials,
            seed,
            train_fraction: 0.9,
            gd: GdConfig::default(),
            train: TrainConfig::default(),
            crb: CrbOptions::default(),
            plot_scaling: ScalingMode::Verbatim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 10 {
            return Err(Error::InvalidConfig(format!("at least 10 trials per point are required, got {}", self.trials)));
        }
        if self.values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidConfig("sweep values must be strictly increasing".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig("train_fraction must lie in (0, 1)".into()));
        }
        let (train, test) = self.split();
        if train < 2 || test < 1 {
            return Err(Error::InvalidConfig(format!("split of {} trials leaves {train} train / {test} test", self.trials)));
        }
        if self.axis == SweepAxis::Snapshots && self.values.iter().any(|k| k.fract() != 0.0 || *k < 2.0) {
            return Err(Error::InvalidConfig("snapshot counts must be integers of at least 2".into()));
        }
        self.gd.validate()?;
        self.train.validate()
    }

    /// Number of training and test trials; training takes the lower indices.
    pub fn split(&self) -> (usize, usize) {
        let train = (self.trials as f64 * self.train_fraction).round() as usize;
        let train = train.min(self.trials);
        (train, self.trials - train)
    }

    pub fn point_config(&self, base: &SceneConfig, value: f64) -> SceneConfig {
        let mut cfg = base.clone();
        match self.axis {
            SweepAxis::Scnr => {
                cfg.target_scnr_db = value;
                cfg.snapshots = self.fixed_snapshots;
            }
            SweepAxis::Snapshots => {
                cfg.snapshots = value as usize;
                cfg.target_scnr_db = self.fixed_scnr_db;
            }
        }
        cfg.rng_seed = self.seed;
        cfg
    }
}

/// Per-trial results kept for aggregation.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub truth: TargetTruth,
    pub tensor: HeatmapTensor,
    pub peak: Estimate,
    /// Test trials only.
    pub evaluation: Option<TestEvaluation>,
}

#[derive(Debug, Clone)]
pub struct TestEvaluation {
    /// `None` when the descent produced a non-finite value.
    pub gd: Option<Estimate>,
    /// `None` when the bound is unbounded (zero signal).
    pub crb_verbatim: Option<CrbReport>,
    pub crb_scaled: Option<CrbReport>,
}

impl TestEvaluation {
    pub fn excluded(&self) -> bool {
        self.gd.is_none() || self.crb_verbatim.is_none() || self.crb_scaled.is_none()
    }
}

fn bounded(r: Result<CrbReport>) -> Result<Option<CrbReport>> {
    match r {
        Ok(r) => Ok(Some(r)),
        Err(Error::UnboundedCrb) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Runs trial `trial` of sweep point `point`.
pub fn run_trial(sc: &Scenario, spec: &SweepSpec, point: usize, trial: usize, test: bool) -> Result<TrialOutcome> {
    let data = sc.simulate(spec.seed, Some(point), trial)?;
    let bins = sc.prepare_bins(&data)?;
    let tensor = sc.heatmap(&bins, Some(data.truth))?;
    let peak = peak_cell_midpoint(&tensor)?;
    let evaluation = if test {
        let gd = match sc.gradient_descent(&bins, &data.truth, &peak, &spec.gd) {
            Ok(e) => Some(e),
            Err(Error::NonFinite { context, iteration }) => {
                log::warn!("point {point}, trial {trial}: non-finite {context} at iteration {iteration}; trial excluded");
                None
            }
            Err(e) => return Err(e),
        };
        let crb = |mode| bounded(crb_for_trial(&sc.cfg, &sc.model, &sc.steering, &data.truth, &data.signal, mode, spec.crb));
        Some(TestEvaluation {
            gd,
            crb_verbatim: crb(ScalingMode::Verbatim)?,
            crb_scaled: crb(ScalingMode::SnapshotScaled)?,
        })
    } else {
        None
    };
    Ok(TrialOutcome { truth: data.truth, tensor, peak, evaluation })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub theta: ErrorSplit,
    pub velocity: ErrorSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointTiming {
    pub trials_s: f64,
    pub training_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointReport {
    pub value: f64,
    pub trials: usize,
    pub test_trials: usize,
    pub excluded: usize,
    pub methods: Vec<MethodMetrics>,
    pub crb_verbatim: CrbAverage,
    pub crb_scaled: CrbAverage,
    pub training: TrainingLog,
    pub timing: PointTiming,
}

impl PointReport {
    pub fn method(&self, m: Method) -> Option<&MethodMetrics> {
        self.methods.iter().find(|x| x.method == m)
    }

    pub fn crb(&self, mode: ScalingMode) -> &CrbAverage {
        match mode {
            ScalingMode::Verbatim => &self.crb_verbatim,
            ScalingMode::SnapshotScaled => &self.crb_scaled,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub plot_scaling: ScalingMode,
    pub points: Vec<PointReport>,
}

fn metrics(method: Method, estimates: &[(f64, f64)], truths: &[(f64, f64)]) -> Result<MethodMetrics> {
    let (theta, velocity) = crate::stats::bias_variance_decomposition(estimates, truths)?;
    Ok(MethodMetrics { method, theta, velocity })
}

/// One sweep point: trials in parallel (collected in index order), then the
/// network trained on the training split, then test-set metrics.
pub fn run_point(spec: &SweepSpec, base: &SceneConfig, point: usize) -> Result<PointReport> {
    let start = Instant::now();
    let value = spec.values[point];
    let sc = Scenario::new(spec.point_config(base, value))?;
    let (n_train, _) = spec.split();
    let outcomes = (0..spec.trials)
        .into_par_iter()
        .map(|trial| {
            run_trial(&sc, spec, point, trial, trial >= n_train)
                .map_err(|e| Error::Trial { point, trial, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;
    let trials_s = start.elapsed().as_secs_f64();

    let (train_set, test_set) = outcomes.split_at(n_train);
    let norm = Normalization::for_scene(&sc.cfg, spec.train.input_scaling);
    let tensors: Vec<HeatmapTensor> = train_set.iter().map(|o| o.tensor.clone()).collect();
    let truths: Vec<TargetTruth> = train_set.iter().map(|o| o.truth).collect();
    let samples = samples_from_tensors(&tensors, &truths, &norm)?;
    drop(tensors);
    let train_start = Instant::now();
    let mut rng = stream(spec.seed, Purpose::Training, Some(point), 0);
    let (network, log) = train(&samples, CnnArch::for_scene(&sc.cfg), norm, &spec.train, &mut rng)?;
    let training_s = train_start.elapsed().as_secs_f64();

    let kept: Vec<&TrialOutcome> = test_set
        .iter()
        .filter(|o| !o.evaluation.as_ref().is_some_and(TestEvaluation::excluded))
        .collect();
    let excluded = test_set.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::Empty("test trials after exclusions"));
    }
    let truths: Vec<(f64, f64)> = kept.iter().map(|o| (o.truth.azimuth_deg, o.truth.velocity_mps)).collect();
    let pair = |e: &Estimate| (e.azimuth_deg, e.velocity_mps);
    let peak: Vec<_> = kept.iter().map(|o| pair(&o.peak)).collect();
    let gd: Vec<_> = kept
        .iter()
        .map(|o| pair(o.evaluation.as_ref().and_then(|e| e.gd.as_ref()).expect("kept trials have a descent")))
        .collect();
    let cnn = kept
        .par_iter()
        .map(|o| network.predict(&o.tensor).map(|e| pair(&e)))
        .collect::<Result<Vec<_>>>()?;
    let methods = vec![
        metrics(Method::PeakCell, &peak, &truths)?,
        metrics(Method::GradientDescent, &gd, &truths)?,
        metrics(Method::Network, &cnn, &truths)?,
    ];

    let crb_of = |f: fn(&TestEvaluation) -> Option<CrbReport>| -> Result<CrbAverage> {
        let reports: Vec<Result<CrbReport>> = kept
            .iter()
            .map(|o| Ok(f(o.evaluation.as_ref().expect("test trial")).expect("kept trials are bounded")))
            .collect();
        let mut avg = average_reports(&reports)?;
        avg.excluded = excluded;
        Ok(avg)
    };
    let crb_verbatim = crb_of(|e| e.crb_verbatim)?;
    let crb_scaled = crb_of(|e| e.crb_scaled)?;

    let total_s = start.elapsed().as_secs_f64();
    log::info!(
        "{} = {value}: {} trials in {trials_s:.1} s, network trained in {training_s:.1} s ({} epochs)",
        spec.axis.tag(),
        spec.trials,
        log.epochs.len()
    );
    Ok(PointReport {
        value,
        trials: spec.trials,
        test_trials: test_set.len(),
        excluded,
        methods,
        crb_verbatim,
        crb_scaled,
        training: log,
        timing: PointTiming { trials_s, training_s, total_s },
    })
}

pub fn run_sweep(spec: &SweepSpec, base: &SceneConfig) -> Result<SweepReport> {
    spec.validate()?;
    let points = (0..spec.values.len())
        .map(|p| run_point(spec, base, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { axis: spec.axis, plot_scaling: spec.plot_scaling, points })
}

/// Trains a network on every trial of a point's data; used by the `train`
/// subcommand.
pub fn train_on(
    cfg: &SceneConfig,
    tensors: &[HeatmapTensor],
    truths: &[TargetTruth],
    train_cfg: &TrainConfig,
) -> Result<(CnnModel, TrainingLog)> {
    let norm = Normalization::for_scene(cfg, train_cfg.input_scaling);
    let samples = samples_from_tensors(tensors, truths, &norm)?;
    let mut rng = stream(train_cfg.seed, Purpose::Training, None, 0);
    train(&samples, CnnArch::for_scene(cfg), norm, train_cfg, &mut rng)
}
