//! Peak-cell-midpoint and gradient-descent azimuth/velocity estimators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::HeatmapTensor;
use crate::linalg::{self, CMatrix, CVector, C64};
use crate::scene::SceneConfig;
use crate::steering::Steering;
use crate::synth::Whitener;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MP")]
    PeakCell,
    #[serde(rename = "GD")]
    GradientDescent,
    #[serde(rename = "CNN")]
    Network,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::PeakCell, Method::GradientDescent, Method::Network];

    pub fn tag(self) -> &'static str {
        match self {
            Method::PeakCell => "MP",
            Method::GradientDescent => "GD",
            Method::Network => "CNN",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub azimuth_deg: f64,
    pub velocity_mps: f64,
    pub method: Method,
    pub iterations_used: usize,
    pub final_loss: Option<f64>,
}

/// Flat index of the largest tensor entry; ties go to the lowest index.
pub fn peak_cell(t: &HeatmapTensor) -> Result<(usize, usize, usize)> {
    if t.values.is_empty() {
        return Err(Error::Empty("heatmap tensor"));
    }
    let mut best = 0;
    for (i, &v) in t.values.iter().enumerate() {
        if v > t.values[best] {
            best = i;
        }
    }
    if !(t.values[best] > 0.0) {
        return Err(Error::Degenerate("heatmap tensor has no positive entry".into()));
    }
    Ok(t.coordinates(best))
}

/// Grid coordinates of the dominant tensor cell.
pub fn peak_cell_midpoint(t: &HeatmapTensor) -> Result<Estimate> {
    let (_, j, l) = peak_cell(t)?;
    Ok(Estimate {
        azimuth_deg: t.azimuth_deg[j],
        velocity_mps: t.velocity_mps[l],
        method: Method::PeakCell,
        iterations_used: 0,
        final_loss: None,
    })
}

/// Least-squares coefficients `ĉ = ã^H Ỹ / (ã^H ã)`, one per snapshot.
pub fn ls_coefficients(a: &CVector, y: &CMatrix) -> Result<CVector> {
    if a.len() != y.nrows() {
        return Err(Error::dims(y.nrows(), a.len()));
    }
    let energy = linalg::norm_sqr(a);
    if !(energy > 0.0) {
        return Err(Error::Degenerate("zero steering vector".into()));
    }
    Ok(y.adjoint() * a / C64::new(energy, 0.0))
}

/// Mean squared modulus of the rank-one residual `Ỹ − ã ĉ` over all
/// `Λ·L × K` entries, with `ĉ` refit for `ã`.
pub fn gd_loss(a: &CVector, y: &CMatrix) -> Result<f64> {
    let c = ls_coefficients(a, y)?;
    let (n, k) = y.shape();
    let mut total = 0.0;
    for j in 0..k {
        // `c` holds conj(ĉ_j) because it is computed as Ỹ^H ã.
        let cj = c[j].conj();
        for i in 0..n {
            total += (y[(i, j)] - a[i] * cj).norm_sqr();
        }
    }
    Ok(total / (n * k) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

/// Unit in which the azimuth step `θ ← θ − α·∂L/∂θ` is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AngleUnit {
    Radians,
    Degrees,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdConfig {
    pub learning_rate_az: f64,
    pub learning_rate_vel: f64,
    pub iters_az: usize,
    pub iters_vel: usize,
    pub gradient_mode: GradientMode,
    /// Central-difference step, relative to the parameter magnitude.
    pub fd_step: f64,
    pub azimuth_unit: AngleUnit,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            learning_rate_az: 1e-5,
            learning_rate_vel: 1e-2,
            iters_az: 100,
            iters_vel: 150,
            gradient_mode: GradientMode::Analytic,
            fd_step: 1e-5,
            azimuth_unit: AngleUnit::Radians,
        }
    }
}

impl GdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate_az >= 0.0 && self.learning_rate_vel >= 0.0) {
            return Err(Error::InvalidConfig("learning rates must be non-negative".into()));
        }
        if self.iters_az < 1 || self.iters_vel < 1 {
            return Err(Error::InvalidConfig("iteration counts must be at least 1".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidConfig("fd_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Parameter {
    Azimuth,
    Velocity,
}

/// Whitened data of the known target bin plus what is needed to rebuild
/// whitened steering vectors.
///
/// Loss and gradient are evaluated through the Gram matrix `G = Ỹ Ỹ^H`: with
/// `E = ã^H ã` the refit gives `‖ã^H Ỹ‖² = ã^H G ã`, `Ỹ ĉ^H = G ã / E` and
/// `‖ĉ‖² = ã^H G ã / E²`, so each iteration costs `O((ΛL)²)` rather than
/// `O(ΛL·K)`.
#[derive(Debug, Clone)]
pub struct GdProblem<'a> {
    cfg: &'a SceneConfig,
    steering: &'a Steering,
    whitener: &'a Whitener,
    gram: CMatrix,
    energy: f64,
    rows: usize,
    snapshots: usize,
}

/// Result of one descent run with the loss before every step and at the end.
#[derive(Debug, Clone)]
pub struct GdRun {
    pub estimate: Estimate,
    pub losses: Vec<f64>,
}

impl<'a> GdProblem<'a> {
    /// `data` is the whitened target-bin matrix `Ỹ_ρ*`.
    pub fn new(cfg: &'a SceneConfig, steering: &'a Steering, whitener: &'a Whitener, data: &CMatrix) -> Result<Self> {
        Self::with_gram(cfg, steering, whitener, linalg::gram_outer(data), data.ncols())
    }

    /// Reuses a precomputed `Ỹ Ỹ^H` (as held by a prepared heatmap bin).
    pub fn with_gram(
        cfg: &'a SceneConfig,
        steering: &'a Steering,
        whitener: &'a Whitener,
        gram: CMatrix,
        snapshots: usize,
    ) -> Result<Self> {
        let rows = steering.dimension();
        if gram.shape() != (rows, rows) || whitener.matrix().shape() != (rows, rows) {
            return Err(Error::dims(format!("{rows}x{rows}"), format!("{:?}", gram.shape())));
        }
        if snapshots == 0 {
            return Err(Error::Empty("snapshot matrix"));
        }
        let energy = linalg::trace_re(&gram);
        Ok(GdProblem { cfg, steering, whitener, gram, energy, rows, snapshots })
    }

    fn whitened(&self, theta_deg: f64, v: f64) -> CVector {
        let a = self.steering.space_time(theta_deg.to_radians(), self.cfg.elevation_rad, v);
        self.whitener.apply_vector(&a.values)
    }

    fn scale(&self) -> f64 {
        (self.rows * self.snapshots) as f64
    }

    /// `(E, G ã, ã^H G ã)` for a whitened steering vector.
    fn projection(&self, a: &CVector) -> Result<(f64, CVector, f64)> {
        let e = linalg::norm_sqr(a);
        if !(e > 0.0) {
            return Err(Error::Degenerate("zero steering vector".into()));
        }
        let ga = &self.gram * a;
        let q = linalg::dot(a, &ga).re.max(0.0);
        Ok((e, ga, q))
    }

    /// Loss at (θ in degrees, v).
    pub fn loss(&self, theta_deg: f64, v: f64) -> Result<f64> {
        let (e, _, q) = self.projection(&self.whitened(theta_deg, v))?;
        Ok(((self.energy - q / e) / self.scale()).max(0.0))
    }

    /// Analytic ∂L/∂θ per radian, with ĉ at its least-squares optimum.
    pub fn gradient_azimuth(&self, theta_deg: f64, v: f64) -> Result<f64> {
        let d = self.steering.d_theta(theta_deg.to_radians(), self.cfg.elevation_rad, v);
        self.analytic_gradient(theta_deg, v, &d)
    }

    /// Analytic ∂L/∂v per m/s.
    pub fn gradient_velocity(&self, theta_deg: f64, v: f64) -> Result<f64> {
        let d = self.steering.d_velocity(theta_deg.to_radians(), self.cfg.elevation_rad, v);
        self.analytic_gradient(theta_deg, v, &d)
    }

    // With E = Ỹ − ã ĉ and r = E ĉ^H, dL = −(2 / nK) Re(r^H dã). The ĉ
    // dependence drops out because ĉ minimizes L for fixed ã.
    fn analytic_gradient(&self, theta_deg: f64, v: f64, d_unwhitened: &CVector) -> Result<f64> {
        let a = self.whitened(theta_deg, v);
        let da = self.whitener.apply_vector(d_unwhitened);
        let (e, ga, q) = self.projection(&a)?;
        let r = ga / C64::new(e, 0.0) - &a * C64::new(q / (e * e), 0.0);
        Ok(-2.0 * linalg::dot(&r, &da).re / self.scale())
    }

    fn fd_gradient(&self, which: Parameter, theta_deg: f64, v: f64, rel_step: f64) -> Result<f64> {
        match which {
            Parameter::Azimuth => {
                let theta = theta_deg.to_radians();
                let h = rel_step * theta.abs().max(1e-3);
                let up = self.loss((theta + h).to_degrees(), v)?;
                let down = self.loss((theta - h).to_degrees(), v)?;
                Ok((up - down) / (2.0 * h))
            }
            Parameter::Velocity => {
                let h = rel_step * v.abs().max(1.0);
                Ok((self.loss(theta_deg, v + h)? - self.loss(theta_deg, v - h)?) / (2.0 * h))
            }
        }
    }

    fn gradient(&self, which: Parameter, theta_deg: f64, v: f64, gd: &GdConfig) -> Result<f64> {
        match (gd.gradient_mode, which) {
            (GradientMode::Analytic, Parameter::Azimuth) => self.gradient_azimuth(theta_deg, v),
            (GradientMode::Analytic, Parameter::Velocity) => self.gradient_velocity(theta_deg, v),
            (GradientMode::FiniteDifference, _) => self.fd_gradient(which, theta_deg, v, gd.fd_step),
        }
    }

    fn descend(&self, which: Parameter, theta_deg: f64, v: f64, gd: &GdConfig) -> Result<GdRun> {
        gd.validate()?;
        let (mut theta, mut vel) = (theta_deg, v);
        let iterations = match which {
            Parameter::Azimuth => gd.iters_az,
            Parameter::Velocity => gd.iters_vel,
        };
        let mut losses = Vec::with_capacity(iterations + 1);
        for t in 0..iterations {
            let loss = self.loss(theta, vel)?;
            let grad = self.gradient(which, theta, vel, gd)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFinite { context: "gradient-descent loss or gradient", iteration: t });
            }
            losses.push(loss);
            match which {
                Parameter::Azimuth => {
                    // `grad` is per radian.
                    let step = match gd.azimuth_unit {
                        AngleUnit::Radians => (gd.learning_rate_az * grad).to_degrees(),
                        AngleUnit::Degrees => gd.learning_rate_az * grad.to_radians(),
                    };
                    theta = self.cfg.clamp_azimuth(theta - step);
                }
                Parameter::Velocity => {
                    vel = self.cfg.clamp_velocity(vel - gd.learning_rate_vel * grad);
                }
            }
        }
        let final_loss = self.loss(theta, vel)?;
        if !final_loss.is_finite() {
            return Err(Error::NonFinite { context: "gradient-descent loss", iteration: iterations });
        }
        losses.push(final_loss);
        Ok(GdRun {
            estimate: Estimate {
                azimuth_deg: theta,
                velocity_mps: vel,
                method: Method::GradientDescent,
                iterations_used: iterations,
                final_loss: Some(final_loss),
            },
            losses,
        })
    }

    /// Azimuth descent with the velocity held at its known true value.
    pub fn azimuth_run(&self, theta_init_deg: f64, v_true: f64, gd: &GdConfig) -> Result<GdRun> {
        self.descend(Parameter::Azimuth, theta_init_deg, v_true, gd)
    }

    /// Velocity descent with the azimuth held at its known true value.
    pub fn velocity_run(&self, theta_true_deg: f64, v_init: f64, gd: &GdConfig) -> Result<GdRun> {
        self.descend(Parameter::Velocity, theta_true_deg, v_init, gd)
    }
}

pub fn gd_azimuth(problem: &GdProblem<'_>, theta_init_deg: f64, v_true: f64, gd: &GdConfig) -> Result<Estimate> {
    Ok(problem.azimuth_run(theta_init_deg, v_true, gd)?.estimate)
}

pub fn gd_velocity(problem: &GdProblem<'_>, theta_true_deg: f64, v_init: f64, gd: &GdConfig) -> Result<Estimate> {
    Ok(problem.velocity_run(theta_true_deg, v_init, gd)?.estimate)
}
