//! Fisher information and Cramér-Rao bounds for azimuth and velocity.
//!
//! Each return is modelled as `y ~ CN(b S̄, R)` with `R = Σ_c + Σ_n` the true
//! interference covariance. For a circular complex Gaussian with a
//! parameter-dependent mean the Fisher information is
//!
//! ```text
//! I(ϑ) = 2 |S̄|² Re[(∂b/∂ϑ)^H R^{-1} (∂b/∂ϑ)]
//! ```
//!
//! which is what the squared-score expectation `E[(∂/∂ϑ ln p)²]` evaluates
//! to; [`fisher_monte_carlo_check`] estimates that expectation directly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, CVector, C64};
use crate::scene::{SceneConfig, TargetTruth};
use crate::stats::pairwise_sum;
use crate::steering::Steering;
use crate::synth::{draw_clutter, draw_noise, CovarianceModel, SignalRow};

const RAD2_PER_DEG2: f64 = (std::f64::consts::PI / 180.0) * (std::f64::consts::PI / 180.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingMode {
    /// Single-return information, no snapshot factor.
    Verbatim,
    /// Information of `K` independent returns.
    SnapshotScaled,
}

impl ScalingMode {
    pub fn tag(self) -> &'static str {
        match self {
            ScalingMode::Verbatim => "verbatim",
            ScalingMode::SnapshotScaled => "snapshot",
        }
    }

    fn factor(self, snapshots: usize) -> f64 {
        match self {
            ScalingMode::Verbatim => 1.0,
            ScalingMode::SnapshotScaled => snapshots as f64,
        }
    }
}

/// Which signal power enters the bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmplitudeSource {
    /// `|S̄|²`, the squared modulus of the snapshot mean.
    #[default]
    MeanSignal,
    /// `mean_j |S_j|²`.
    SnapshotPower,
}

impl AmplitudeSource {
    pub fn power(self, signal: &SignalRow) -> f64 {
        match self {
            AmplitudeSource::MeanSignal => signal.mean_power(),
            AmplitudeSource::SnapshotPower => signal.snapshot_power(),
        }
    }
}

/// `2 |S̄|² Re(∂b^H R^{-1} ∂b)` per rad², given `R^{-1}`.
pub fn fisher_theta(s_bar: C64, db_dtheta: &CVector, r_inv: &CMatrix) -> Result<f64> {
    fisher(s_bar.norm_sqr(), db_dtheta, r_inv)
}

/// `2 |S̄|² Re(∂b^H R^{-1} ∂b)` per (m/s)², given `R^{-1}`.
pub fn fisher_velocity(s_bar: C64, db_dv: &CVector, r_inv: &CMatrix) -> Result<f64> {
    fisher(s_bar.norm_sqr(), db_dv, r_inv)
}

fn fisher(power: f64, d: &CVector, r_inv: &CMatrix) -> Result<f64> {
    if r_inv.shape() != (d.len(), d.len()) {
        return Err(Error::dims(d.len(), r_inv.nrows()));
    }
    Ok(2.0 * power * linalg::quad_form_re(d, r_inv, d).max(0.0))
}

/// Per-trial bound. Information values are per deg² and per (m/s)²; bounds
/// are their reciprocals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrbReport {
    pub crb_theta: f64,
    pub crb_velocity: f64,
    pub fisher_theta: f64,
    pub fisher_velocity: f64,
    pub scaling_mode: ScalingMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CrbOptions {
    pub amplitude: AmplitudeSource,
}

/// Bound at a trial's truth. Zero signal power or an information-free
/// parameter yields [`Error::UnboundedCrb`].
pub fn crb_for_trial(
    cfg: &SceneConfig,
    model: &CovarianceModel,
    steering: &Steering,
    truth: &TargetTruth,
    signal: &SignalRow,
    scaling: ScalingMode,
    options: CrbOptions,
) -> Result<CrbReport> {
    let power = options.amplitude.power(signal);
    let d = steering.derivative(truth.azimuth_rad(), cfg.elevation_rad, truth.velocity_mps);
    let k = scaling.factor(signal.values.len());
    let r_inv = model.total_inverse();
    let f_theta = k * fisher(power, &d.d_theta, r_inv)? * RAD2_PER_DEG2;
    let f_vel = k * fisher(power, &d.d_velocity, r_inv)?;
    if !(f_theta > 0.0 && f_vel > 0.0) || !(f_theta.is_finite() && f_vel.is_finite()) {
        return Err(Error::UnboundedCrb);
    }
    Ok(CrbReport {
        crb_theta: 1.0 / f_theta,
        crb_velocity: 1.0 / f_vel,
        fisher_theta: f_theta,
        fisher_velocity: f_vel,
        scaling_mode: scaling,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrbAverage {
    pub crb_theta: f64,
    pub crb_velocity: f64,
    pub included: usize,
    pub excluded: usize,
}

/// Arithmetic mean of per-trial bounds in input order; unbounded trials are
/// counted and left out.
pub fn average_reports(reports: &[Result<CrbReport>]) -> Result<CrbAverage> {
    let mut theta = Vec::with_capacity(reports.len());
    let mut vel = Vec::with_capacity(reports.len());
    let mut excluded = 0;
    for r in reports {
        match r {
            Ok(r) => {
                theta.push(r.crb_theta);
                vel.push(r.crb_velocity);
            }
            Err(Error::UnboundedCrb) => excluded += 1,
            Err(e) => return Err(Error::Degenerate(format!("CRB evaluation failed: {e}"))),
        }
    }
    if theta.is_empty() {
        return Err(Error::Empty("bounded CRB trials"));
    }
    let n = theta.len() as f64;
    Ok(CrbAverage {
        crb_theta: pairwise_sum(&theta) / n,
        crb_velocity: pairwise_sum(&vel) / n,
        included: theta.len(),
        excluded,
    })
}

/// Mean bound over a set of trials, each evaluated at its own truth.
pub fn crb_sweep_average(
    cfg: &SceneConfig,
    model: &CovarianceModel,
    steering: &Steering,
    trials: &[(TargetTruth, SignalRow)],
    scaling: ScalingMode,
    options: CrbOptions,
) -> Result<CrbAverage> {
    if trials.is_empty() {
        return Err(Error::Empty("trial set"));
    }
    let reports: Vec<_> = trials
        .iter()
        .map(|(truth, signal)| crb_for_trial(cfg, model, steering, truth, signal, scaling, options))
        .collect();
    average_reports(&reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherParameter {
    /// Azimuth, information per rad².
    Azimuth,
    /// Velocity, information per (m/s)².
    Velocity,
}

/// Monte Carlo estimate of `E[(∂/∂ϑ ln p(y | ϑ))²]` at the truth.
///
/// Draws `y = b S̄ + w`, `w ~ CN(0, R)`, and takes the score as a central
/// difference of `ln p = −(y − b S̄)^H R^{-1} (y − b S̄) + const`.
#[allow(clippy::too_many_arguments)]
pub fn fisher_monte_carlo_check(
    cfg: &SceneConfig,
    model: &CovarianceModel,
    steering: &Steering,
    truth: &TargetTruth,
    s_bar: C64,
    parameter: FisherParameter,
    n_mc: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<f64> {
    if n_mc == 0 {
        return Err(Error::Empty("Monte Carlo draws"));
    }
    let theta = truth.azimuth_rad();
    let v = truth.velocity_mps;
    let phi = cfg.elevation_rad;
    let r_inv = model.total_inverse();
    let mean_at = |t: f64, vel: f64| steering.space_time(t, phi, vel).values * s_bar;
    let (h, plus, minus) = match parameter {
        FisherParameter::Azimuth => {
            let h = 1e-6;
            (h, mean_at(theta + h, v), mean_at(theta - h, v))
        }
        FisherParameter::Velocity => {
            let h = 1e-5;
            (h, mean_at(theta, v + h), mean_at(theta, v - h))
        }
    };
    let centre = mean_at(theta, v);
    let log_likelihood = |y: &CVector, m: &CVector| {
        let e = y - m;
        -linalg::quad_form_re(&e, r_inv, &e)
    };
    let mut squares = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let w = draw_clutter(model, 1, rng)?.values + draw_noise(model, 1, rng)?.values;
        let y = &centre + w.column(0);
        let score = (log_likelihood(&y, &plus) - log_likelihood(&y, &minus)) / (2.0 * h);
        squares.push(score * score);
    }
    Ok(pairwise_sum(&squares) / n_mc as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use crate::scene::{default_scene, phase_centers};
    use crate::synth::build_covariance;

    fn identity_model(n: usize) -> CovarianceModel {
        CovarianceModel::from_parts(CMatrix::zeros(n, n), CMatrix::identity(n, n), f64::NEG_INFINITY).unwrap()
    }

    fn truth() -> TargetTruth {
        TargetTruth { range_bin: 1, azimuth_deg: 25.0, velocity_mps: 182.0, rcs_db: 0.0 }
    }

    #[test]
    fn identity_covariance_closed_form() {
        let cfg = default_scene();
        let st = Steering::new(&cfg, &phase_centers(&cfg).unwrap());
        let d = st.derivative(25f64.to_radians(), 0.0, 182.0);
        let eye = CMatrix::identity(64, 64);
        let s = C64::new(0.3, -0.4);
        let f = fisher_theta(s, &d.d_theta, &eye).unwrap();
        let direct = 2.0 * 0.25 * d.d_theta.iter().map(|x| x.norm_sqr()).sum::<f64>();
        assert!((f - direct).abs() < 1e-12 * direct);
        let f = fisher_velocity(s, &d.d_velocity, &eye).unwrap();
        let direct = 2.0 * 0.25 * d.d_velocity.iter().map(|x| x.norm_sqr()).sum::<f64>();
        assert!((f - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn amplitude_scaling_and_phase_invariance() {
        let cfg = default_scene();
        let st = Steering::new(&cfg, &phase_centers(&cfg).unwrap());
        let model = build_covariance(&cfg, &st).unwrap();
        let d = st.derivative(0.4, 0.0, 181.0).d_theta;
        let f1 = fisher_theta(C64::new(1.0, 0.0), &d, model.total_inverse()).unwrap();
        let f2 = fisher_theta(C64::new(2.0, 0.0), &d, model.total_inverse()).unwrap();
        let fp = fisher_theta(C64::from_polar(1.0, 2.1), &d, model.total_inverse()).unwrap();
        assert!((f2 / f1 - 4.0).abs() < 1e-12);
        assert!((fp / f1 - 1.0).abs() < 1e-12);
        assert_eq!(fisher_theta(C64::new(0.0, 0.0), &d, model.total_inverse()).unwrap(), 0.0);
    }

    #[test]
    fn zero_signal_is_unbounded() {
        let cfg = default_scene();
        let st = Steering::new(&cfg, &phase_centers(&cfg).unwrap());
        let signal = SignalRow::new(vec![C64::new(0.0, 0.0); 4]);
        let r = crb_for_trial(&cfg, &identity_model(64), &st, &truth(), &signal, ScalingMode::Verbatim, CrbOptions::default());
        assert!(matches!(r, Err(Error::UnboundedCrb)));
    }

    #[test]
    fn single_pulse_has_no_velocity_information() {
        let cfg = SceneConfig { num_pulses: 1, ..default_scene() };
        let st = Steering::new(&cfg, &phase_centers(&cfg).unwrap());
        let d = st.derivative(0.4, 0.0, 181.0).d_velocity;
        assert_eq!(fisher_velocity(C64::new(1.0, 0.0), &d, &CMatrix::identity(16, 16)).unwrap(), 0.0);
        let signal = SignalRow::new(vec![C64::new(1.0, 0.0); 4]);
        let r = crb_for_trial(&cfg, &identity_model(16), &st, &truth(), &signal, ScalingMode::Verbatim, CrbOptions::default());
        assert!(matches!(r, Err(Error::UnboundedCrb)));
    }

    #[test]
    fn report_units_and_scaling_modes() {
        let cfg = default_scene();
        let st = Steering::new(&cfg, &phase_centers(&cfg).unwrap());
        let model = build_covariance(&cfg, &st).unwrap();
        let signal = SignalRow::new(vec![C64::new(0.5, 0.1); 300]);
        let t = truth();
        let v = crb_for_trial(&cfg, &model, &st, &t, &signal, ScalingMode::Verbatim, CrbOptions::default()).unwrap();
        let s = crb_for_trial(&cfg, &model, &st, &t, &signal, ScalingMode::SnapshotScaled, CrbOptions::default()).unwrap();
        assert!((v.crb_theta / s.crb_theta - 300.0).abs() < 1e-9);
        assert!((v.crb_theta * v.fisher_theta - 1.0).abs() < 1e-15);
        let d = st.derivative(t.azimuth_rad(), 0.0, t.velocity_mps);
        let per_rad = fisher_theta(signal.mean, &d.d_theta, model.total_inverse()).unwrap();
        let crb_rad = 1.0 / per_rad;
        assert!((v.crb_theta / crb_rad - (180.0 / std::f64::consts::PI).powi(2)).abs() < 1e-6);
    }

    #[test]
    fn averaging_rules() {
        let r = |x: f64| Ok(CrbReport { crb_theta: x, crb_velocity: 2.0 * x, fisher_theta: 1.0 / x, fisher_velocity: 0.5 / x, scaling_mode: ScalingMode::Verbatim });
        let avg = average_reports(&[r(1.0), r(3.0), Err(Error::UnboundedCrb)]).unwrap();
        assert_eq!(avg.crb_theta, 2.0);
        assert_eq!(avg.crb_velocity, 4.0);
        assert_eq!((avg.included, avg.excluded), (2, 1));
        assert!(average_reports(&[Err(Error::UnboundedCrb)]).is_err());
    }

    #[test]
    fn zero_signal_monte_carlo_is_zero() {
        let cfg = default_scene();
        let st = Steering::new(&cfg, &phase_centers(&cfg).unwrap());
        let model = identity_model(64);
        let mut rng = stream(3, Purpose::Auxiliary, None, 0);
        let f = fisher_monte_carlo_check(&cfg, &model, &st, &truth(), C64::new(0.0, 0.0), FisherParameter::Azimuth, 100, &mut rng).unwrap();
        assert_eq!(f, 0.0);
    }
}
