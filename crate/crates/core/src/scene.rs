//! Scenario geometry, radar parameters and random target placement.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Propagation speed used throughout (m/s). With this value the 5 MHz
/// waveform gives 30 m range bins.
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

/// Velocity step that reproduces the nominal 21-cell velocity axis over
/// [175, 190] m/s.
pub const DEFAULT_VELOCITY_STEP: f64 = 0.75;
/// Nominal 0.5 m/s velocity step (31 cells over the default span).
pub const NOMINAL_VELOCITY_STEP: f64 = 0.5;

/// Every configurable physical and experimental parameter.
///
/// Angles are in degrees here; steering and estimator code converts to radians
/// internally. `elevation_rad` is the one angle stored in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub carrier_freq_hz: f64,
    pub bandwidth_hz: f64,
    pub prf_hz: f64,
    pub num_pulses: usize,
    pub num_channels: usize,
    pub element_spacing_m: f64,
    pub full_array_cols: usize,
    pub full_array_rows: usize,
    pub platform_height_m: f64,
    pub range_lower_m: f64,
    pub range_upper_m: f64,
    pub azimuth_min_deg: f64,
    pub azimuth_max_deg: f64,
    pub velocity_min_mps: f64,
    pub velocity_max_mps: f64,
    pub azimuth_step_deg: f64,
    pub velocity_step_mps: f64,
    pub num_range_bins: usize,
    pub elevation_rad: f64,
    pub cnr_db: f64,
    /// RCS spread `l`, in dB around the calibrated mean amplitude.
    pub rcs_spread: f64,
    pub snapshots: usize,
    pub target_scnr_db: f64,
    pub rng_seed: u64,
    /// Number of equal-power clutter patches spread over [-90°, 90°].
    pub clutter_patches: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        default_scene()
    }
}

pub fn default_scene() -> SceneConfig {
    SceneConfig {
        carrier_freq_hz: 1.0e10,
        bandwidth_hz: 5.0e6,
        prf_hz: 1100.0,
        num_pulses: 4,
        num_channels: 16,
        element_spacing_m: 0.015,
        full_array_cols: 48,
        full_array_rows: 5,
        platform_height_m: 1000.0,
        range_lower_m: 14538.0,
        range_upper_m: 14688.0,
        azimuth_min_deg: 20.0,
        azimuth_max_deg: 30.0,
        velocity_min_mps: 175.0,
        velocity_max_mps: 190.0,
        azimuth_step_deg: 0.4,
        velocity_step_mps: DEFAULT_VELOCITY_STEP,
        num_range_bins: 5,
        elevation_rad: 0.0,
        cnr_db: 20.0,
        rcs_spread: 10.0,
        snapshots: 300,
        target_scnr_db: 20.0,
        rng_seed: 0,
        clutter_patches: 181,
    }
}

/// A uniformly spaced axis `min + j * step`, `j < count`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisGrid {
    pub min: f64,
    pub step: f64,
    pub count: usize,
}

impl AxisGrid {
    pub fn spanning(min: f64, max: f64, step: f64) -> Self {
        // Small slack so that 10 / 0.4 does not floor to 24.
        let count = ((max - min) / step + 1e-9).floor() as usize + 1;
        AxisGrid { min, step, count }
    }

    pub fn value(&self, j: usize) -> f64 {
        self.min + j as f64 * self.step
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|j| self.value(j)).collect()
    }

    /// Index of the grid point closest to `x`, clamped to the axis.
    pub fn nearest(&self, x: f64) -> usize {
        let j = ((x - self.min) / self.step).round();
        j.clamp(0.0, (self.count - 1) as f64) as usize
    }
}

impl SceneConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SceneConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let span = self.range_upper_m - self.range_lower_m;
        let expected = self.num_range_bins as f64 * self.range_bin_size();
        if ((span - expected) / expected).abs() > 1e-6 {
            return bad(format!(
                "range extent {span} m does not equal {} bins of {} m",
                self.num_range_bins,
                self.range_bin_size()
            ));
        }
        if !(self.azimuth_min_deg < self.azimuth_max_deg) {
            return bad("azimuth_min_deg must be below azimuth_max_deg".into());
        }
        if !(self.velocity_min_mps < self.velocity_max_mps) {
            return bad("velocity_min_mps must be below velocity_max_mps".into());
        }
        if self.num_pulses < 1 || self.num_channels < 1 || self.num_range_bins < 1 {
            return bad("num_pulses, num_channels and num_range_bins must be at least 1".into());
        }
        if self.snapshots < 2 {
            return bad("snapshots must be at least 2: mean-centering a single snapshot erases it".into());
        }
        if self.full_array_cols % self.num_channels != 0 {
            return bad(format!(
                "full_array_cols {} is not divisible by num_channels {}",
                self.full_array_cols, self.num_channels
            ));
        }
        if !(self.azimuth_step_deg > 0.0 && self.velocity_step_mps > 0.0) {
            return bad("grid steps must be positive".into());
        }
        if !(self.prf_hz > 0.0 && self.carrier_freq_hz > 0.0 && self.bandwidth_hz > 0.0) {
            return bad("frequencies must be positive".into());
        }
        if self.rcs_spread < 0.0 {
            return bad("rcs_spread must be non-negative".into());
        }
        if self.clutter_patches < 1 {
            return bad("clutter_patches must be at least 1".into());
        }
        Ok(())
    }

    /// Space-time dimension `Λ·L`.
    pub fn dimension(&self) -> usize {
        self.num_pulses * self.num_channels
    }

    pub fn range_bin_size(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.bandwidth_hz)
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.carrier_freq_hz / SPEED_OF_LIGHT
    }

    pub fn doppler_hz(&self, velocity_mps: f64) -> f64 {
        2.0 * velocity_mps * self.carrier_freq_hz / SPEED_OF_LIGHT
    }

    pub fn azimuth_grid(&self) -> AxisGrid {
        AxisGrid::spanning(self.azimuth_min_deg, self.azimuth_max_deg, self.azimuth_step_deg)
    }

    pub fn velocity_grid(&self) -> AxisGrid {
        AxisGrid::spanning(self.velocity_min_mps, self.velocity_max_mps, self.velocity_step_mps)
    }

    pub fn clamp_azimuth(&self, deg: f64) -> f64 {
        deg.clamp(self.azimuth_min_deg, self.azimuth_max_deg)
    }

    pub fn clamp_velocity(&self, v: f64) -> f64 {
        v.clamp(self.velocity_min_mps, self.velocity_max_mps)
    }
}

/// Ground truth for one randomly placed target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetTruth {
    pub range_bin: usize,
    pub azimuth_deg: f64,
    pub velocity_mps: f64,
    /// Signal modulus in dB (`20 log10 σ`).
    pub rcs_db: f64,
}

impl TargetTruth {
    pub fn amplitude(&self) -> f64 {
        10f64.powf(self.rcs_db / 20.0)
    }

    pub fn azimuth_rad(&self) -> f64 {
        self.azimuth_deg.to_radians()
    }
}

/// Beamformed sub-array phase centres, one row per channel (metres).
#[derive(Debug, Clone, PartialEq)]
pub struct SubarrayPhaseCenters {
    pub positions: Vec<[f64; 3]>,
}

impl SubarrayPhaseCenters {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Phase centres of the `L` sub-arrays of `48/L × rows` elements.
///
/// The full array lies along the second (y) axis, centred on the origin, so
/// broadside is θ = 0 and the spatial phase of channel `m` is `k·y_m·sinθ·cosφ`.
/// Vertical element rows average to zero height.
pub fn phase_centers(cfg: &SceneConfig) -> Result<SubarrayPhaseCenters> {
    let l = cfg.num_channels;
    if l == 0 || cfg.full_array_cols % l != 0 {
        return Err(Error::InvalidConfig(format!(
            "full_array_cols {} is not divisible by num_channels {l}",
            cfg.full_array_cols
        )));
    }
    let group = cfg.full_array_cols / l;
    let offset = (cfg.full_array_cols as f64 - 1.0) / 2.0;
    let positions = (0..l)
        .map(|m| {
            let first = (m * group) as f64;
            let centroid = first + (group as f64 - 1.0) / 2.0;
            [0.0, (centroid - offset) * cfg.element_spacing_m, 0.0]
        })
        .collect();
    Ok(SubarrayPhaseCenters { positions })
}

/// Places a target uniformly in the processing region.
///
/// `mean_amplitude(azimuth_rad, velocity)` returns the calibrated mean modulus
/// μ for a target at that position; the drawn modulus is uniform in dB over
/// `[20log10 μ − l/2, 20log10 μ + l/2]`.
pub fn place_target<R, F>(cfg: &SceneConfig, rng: &mut R, mean_amplitude: F) -> Result<TargetTruth>
where
    R: Rng + ?Sized,
    F: FnOnce(f64, f64) -> Result<f64>,
{
    let range_bin = rng.random_range(0..cfg.num_range_bins);
    let azimuth_deg = uniform(rng, cfg.azimuth_min_deg, cfg.azimuth_max_deg);
    let velocity_mps = uniform(rng, cfg.velocity_min_mps, cfg.velocity_max_mps);
    let spread: f64 = rng.random();
    let mu = mean_amplitude(azimuth_deg.to_radians(), velocity_mps)?;
    let rcs_db = 20.0 * mu.log10() + (spread - 0.5) * cfg.rcs_spread;
    Ok(TargetTruth {
        range_bin,
        azimuth_deg,
        velocity_mps,
        rcs_db,
    })
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    lo + u * (hi - lo)
}
