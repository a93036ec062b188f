//! Array, Doppler and space-time steering vectors and their derivatives.
//!
//! Conventions: the array factor is `ξ_m = exp(i·k·⟨z_m, u(θ, φ)⟩)` with
//! `u = [cosφ·cosθ, cosφ·sinθ, sinφ]`; the Doppler factor is
//! `ψ_p = exp(−i·2π·(f_dop/f_PR)·p)`; the space-time vector is `ψ ⊗ ξ`, so
//! entry `p·L + m` is `ψ_p·ξ_m`. Angles are radians, velocities m/s.

use std::f64::consts::PI;

use crate::linalg::{CMatrix, CVector, C64};
use crate::scene::{SceneConfig, SubarrayPhaseCenters, SPEED_OF_LIGHT};

/// A space-time steering vector together with the coordinates it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeVector {
    pub values: CVector,
    pub azimuth_rad: f64,
    pub elevation_rad: f64,
    pub velocity_mps: f64,
}

/// Analytic partial derivatives of the space-time vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringDerivative {
    /// ∂a/∂θ, per radian.
    pub d_theta: CVector,
    /// ∂a/∂v, per m/s.
    pub d_velocity: CVector,
}

/// Steering vector factory for one scene geometry.
#[derive(Debug, Clone)]
pub struct Steering {
    positions: Vec<[f64; 3]>,
    wavenumber: f64,
    /// `2π · (2 f_c / c) / f_PR`: Doppler phase advance per pulse per m/s.
    doppler_phase_rate: f64,
    pulses: usize,
}

impl Steering {
    pub fn new(cfg: &SceneConfig, z: &SubarrayPhaseCenters) -> Self {
        Steering {
            positions: z.positions.clone(),
            wavenumber: cfg.wavenumber(),
            doppler_phase_rate: 2.0 * PI * (2.0 * cfg.carrier_freq_hz / SPEED_OF_LIGHT) / cfg.prf_hz,
            pulses: cfg.num_pulses,
        }
    }

    pub fn channels(&self) -> usize {
        self.positions.len()
    }

    pub fn pulses(&self) -> usize {
        self.pulses
    }

    pub fn dimension(&self) -> usize {
        self.pulses * self.positions.len()
    }

    fn projections(&self, direction: [f64; 3]) -> impl Iterator<Item = f64> + '_ {
        self.positions
            .iter()
            .map(move |z| z[0] * direction[0] + z[1] * direction[1] + z[2] * direction[2])
    }

    pub fn array(&self, theta: f64, phi: f64) -> CVector {
        let u = [phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin()];
        let k = self.wavenumber;
        CVector::from_iterator(self.channels(), self.projections(u).map(|d| C64::cis(k * d)))
    }

    pub fn doppler(&self, v: f64) -> CVector {
        let rate = self.doppler_phase_rate * v;
        CVector::from_iterator(self.pulses, (0..self.pulses).map(|p| C64::cis(-rate * p as f64)))
    }

    pub fn space_time(&self, theta: f64, phi: f64, v: f64) -> SpaceTimeVector {
        SpaceTimeVector {
            values: kron(&self.doppler(v), &self.array(theta, phi)),
            azimuth_rad: theta,
            elevation_rad: phi,
            velocity_mps: v,
        }
    }

    /// `ψ(v) ⊗ [i·k·(z·g) ⊙ ξ(θ, φ)]` with `g = ∂u/∂θ = [−cosφ·sinθ, cosφ·cosθ, 0]`.
    pub fn d_theta(&self, theta: f64, phi: f64, v: f64) -> CVector {
        let g = [-phi.cos() * theta.sin(), phi.cos() * theta.cos(), 0.0];
        let ik = C64::new(0.0, self.wavenumber);
        let xi = self.array(theta, phi);
        let dxi = CVector::from_iterator(
            self.channels(),
            self.projections(g).zip(xi.iter()).map(|(zg, x)| ik * zg * x),
        );
        kron(&self.doppler(v), &dxi)
    }

    /// `[−i·(2f_c/c)·h ⊙ ψ(v)] ⊗ ξ(θ, φ)` with `h_p = 2π·p / f_PR`.
    pub fn d_velocity(&self, theta: f64, phi: f64, v: f64) -> CVector {
        let psi = self.doppler(v);
        let dpsi = CVector::from_iterator(
            self.pulses,
            psi.iter()
                .enumerate()
                .map(|(p, x)| C64::new(0.0, -self.doppler_phase_rate * p as f64) * x),
        );
        kron(&dpsi, &self.array(theta, phi))
    }

    pub fn derivative(&self, theta: f64, phi: f64, v: f64) -> SteeringDerivative {
        SteeringDerivative {
            d_theta: self.d_theta(theta, phi, v),
            d_velocity: self.d_velocity(theta, phi, v),
        }
    }

    /// Steering vectors for every (azimuth, velocity) grid point as columns,
    /// column index `j·n_vel + l`.
    pub fn grid_matrix(&self, cfg: &SceneConfig) -> CMatrix {
        let az = cfg.azimuth_grid();
        let vel = cfg.velocity_grid();
        let mut out = CMatrix::zeros(self.dimension(), az.count * vel.count);
        for j in 0..az.count {
            let xi = self.array(az.value(j).to_radians(), cfg.elevation_rad);
            for l in 0..vel.count {
                let a = kron(&self.doppler(vel.value(l)), &xi);
                out.set_column(j * vel.count + l, &a);
            }
        }
        out
    }
}

/// Kronecker product of two column vectors, `left` outermost.
pub fn kron(left: &CVector, right: &CVector) -> CVector {
    let n = right.len();
    CVector::from_fn(left.len() * n, |i, _| left[i / n] * right[i % n])
}

pub fn array_steering(cfg: &SceneConfig, z: &SubarrayPhaseCenters, theta: f64, phi: f64) -> CVector {
    Steering::new(cfg, z).array(theta, phi)
}

pub fn doppler_steering(cfg: &SceneConfig, v: f64) -> CVector {
    let rate = 2.0 * PI * cfg.doppler_hz(v) / cfg.prf_hz;
    CVector::from_iterator(cfg.num_pulses, (0..cfg.num_pulses).map(|p| C64::cis(-rate * p as f64)))
}

pub fn space_time_steering(
    cfg: &SceneConfig,
    z: &SubarrayPhaseCenters,
    theta: f64,
    phi: f64,
    v: f64,
) -> SpaceTimeVector {
    Steering::new(cfg, z).space_time(theta, phi, v)
}

pub fn steering_derivative_theta(
    cfg: &SceneConfig,
    z: &SubarrayPhaseCenters,
    theta: f64,
    phi: f64,
    v: f64,
) -> CVector {
    Steering::new(cfg, z).d_theta(theta, phi, v)
}

pub fn steering_derivative_velocity(
    cfg: &SceneConfig,
    z: &SubarrayPhaseCenters,
    theta: f64,
    phi: f64,
    v: f64,
) -> CVector {
    Steering::new(cfg, z).d_velocity(theta, phi, v)
}
